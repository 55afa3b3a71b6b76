use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ptcomplete::checkpoint::Checkpoint;
use ptcomplete::config::RunConfig;
use ptcomplete::train::{self, Trainer};
use ptcomplete::{io, selftest, svg, Error};

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "ptcomplete", version, about = "Relation-aware point cloud completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a log and checkpoints under the config's output_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint; its config must match.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the config's held-out set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Report path; a `.json` sibling is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Complete a partial scan (.xyz or .ply).
    Complete {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prefix for input/prediction/overlay SVG projections.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Run the oracle and gradient-check suites.
    Selftest,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => EXIT_CONFIG,
        Some(Error::Diverged(_)) => EXIT_DIVERGED,
        Some(Error::Io(_) | Error::Checksum(_) | Error::InvalidData(_)) => EXIT_IO,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => EXIT_IO,
        None => 1,
    }
}

fn run_train(config: &Path, seed: Option<u64>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            if ckpt.config != cfg {
                return Err(Error::Config(format!("{} was written by a different configuration", path.display())).into());
            }
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::new(cfg.clone())?,
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    let log_path = cfg.output_dir.join("train_log.txt");
    let log_file = if resume.is_some() {
        File::options().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    };
    let mut log = BufWriter::new(log_file);
    if resume.is_none() {
        writeln!(log, "# run_hash={}", cfg.run_hash())?;
        trainer.checkpoint().save(&cfg.output_dir.join("ckpt_init.bin"))?;
    }
    let total = cfg.total_steps();
    eprintln!("training {} steps ({} parameters), run {}", total, trainer.state.params.num_scalars(), &cfg.run_hash()[..12]);
    let every = cfg.checkpoint_every;
    trainer.run(None, |t, entry| {
        writeln!(log, "{}", entry.to_line())?;
        let done = entry.step + 1;
        if done % 10 == 0 || done == total {
            eprintln!("step {done}/{total} total={:.5} ema={:.5}", entry.loss.total, entry.loss_ema);
        }
        if every > 0 && done % every == 0 {
            log.flush()?;
            t.checkpoint().save(&cfg.output_dir.join(format!("ckpt_{done:06}.bin")))?;
        }
        Ok(())
    })?;
    log.flush()?;
    let final_path = cfg.output_dir.join("final.bin");
    trainer.checkpoint().save(&final_path)?;
    eprintln!("wrote {}", final_path.display());
    Ok(())
}

fn run_eval(ckpt: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let ckpt = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if ckpt.config.model != cfg.model {
        return Err(Error::Config("checkpoint model layout differs from the config".into()).into());
    }
    let report = train::evaluate(&cfg, &ckpt.state.params)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, report.to_text())?;
    std::fs::write(out.with_extension("json"), report.to_json())?;
    print!("{}", report.to_text());
    Ok(())
}

fn run_complete(ckpt: &Path, input: &Path, out: &Path, svg_prefix: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let partial = io::load_cloud(input).with_context(|| format!("reading {}", input.display()))?;
    let completed = train::complete(&ckpt, &partial)?;
    io::save_cloud(out, &completed).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {} points to {}", completed.count(), out.display());
    if let Some(prefix) = svg_prefix {
        for f in svg::write_figures(prefix, &partial, &completed)? {
            eprintln!("wrote {}", f.display());
        }
    }
    Ok(())
}

fn run_selftest() -> Result<()> {
    let results = selftest::run()?;
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if failed > 0 {
        bail!("{failed} of {} self-test checks failed", results.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, seed, resume } => run_train(config, *seed, resume.as_deref()),
        Command::Eval { ckpt, config, out } => run_eval(ckpt, config, out),
        Command::Complete { ckpt, input, out, svg } => run_complete(ckpt, input, out, svg.as_deref()),
        Command::Selftest => run_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
