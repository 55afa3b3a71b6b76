mod common;

use common::*;
use ptcomplete::autodiff::decayed_lr;
use ptcomplete::checkpoint::Checkpoint;
use ptcomplete::completion::CompletionModel;
use ptcomplete::config::RunConfig;
use ptcomplete::geom::PointCloud;
use ptcomplete::train::{self, Trainer};
use ptcomplete::Error;

fn quick(extra: &[(&str, &str)]) -> RunConfig {
    let mut keys = vec![("train_shapes", "4"), ("eval_shapes", "2"), ("batch", "2"), ("epochs", "1")];
    keys.extend_from_slice(extra);
    let mut cfg = tiny_run();
    for (k, v) in keys {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

#[test]
fn config_text_round_trips() {
    for cfg in [RunConfig::default(), RunConfig::pcn(), tiny_run(), quick(&[("weights", "r2"), ("correction", "false"), ("lambda", "0")])] {
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.run_hash(), cfg.run_hash());
    }
}

#[test]
fn config_errors_name_the_problem() {
    for text in ["epochs = -1", "nonsense = 3", "stage_counts = 64,128", "lr", "weights = sometimes", "keep_fraction = 1.5"] {
        match RunConfig::parse(text) {
            Err(Error::Config(msg)) => assert!(!msg.is_empty()),
            other => panic!("{text:?} gave {other:?}"),
        }
    }
}

#[test]
fn zero_epochs_leaves_the_initialisation() {
    let cfg = quick(&[("epochs", "0")]);
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let init = trainer.state.params.clone();
    let mut steps = 0;
    trainer.run(None, |_, _| {
        steps += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(steps, 0);
    assert_eq!(trainer.state.params, init);
    let model = CompletionModel::new(cfg.model.clone()).unwrap();
    assert_eq!(model.init_params(&mut rng(cfg.seed)).unwrap(), init);
}

#[test]
fn log_lines_satisfy_the_loss_identity() {
    let cfg = quick(&[("epochs", "2"), ("lambda", "0.7")]);
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let mut logs = Vec::new();
    trainer.run(None, |_, l| {
        logs.push(*l);
        Ok(())
    })
    .unwrap();
    assert_eq!(logs.len() as u64, cfg.total_steps());
    for (i, l) in logs.iter().enumerate() {
        assert_eq!(l.step, i as u64);
        let b = &l.loss;
        assert!((b.total - (b.j0 + b.j1 + b.lambda * b.j_denoise)).abs() <= 1e-12);
        assert_eq!(b.lambda, 0.7);
        assert!(b.j_denoise > 0.0);
        assert_eq!(l.lr, decayed_lr(cfg.lr, cfg.lr_decay_factor, cfg.decay_interval(), l.step));
        let line = l.to_line();
        for key in ["step=", "lr=", "j0=", "j1=", "j_denoise=", "lambda=", "total=", "ema="] {
            assert!(line.contains(key), "{line}");
        }
    }
}

#[test]
fn lambda_zero_drops_the_denoising_term() {
    let cfg = quick(&[("lambda", "0")]);
    let mut trainer = Trainer::new(cfg).unwrap();
    let log = trainer.step().unwrap();
    assert_eq!(log.loss.j_denoise, 0.0);
    assert_eq!(log.loss.total, log.loss.j0 + log.loss.j1);
}

#[test]
fn learning_rate_decays_on_step_intervals() {
    let cfg = RunConfig::default();
    let interval = cfg.decay_interval();
    assert_eq!(interval, cfg.total_steps() / cfg.lr_decay_intervals);
    assert_eq!(decayed_lr(1.0, 0.9, interval, interval - 1), 1.0);
    assert_eq!(decayed_lr(1.0, 0.9, interval, interval), 0.9);
    assert!((decayed_lr(1.0, 0.9, 10, 35) - 0.729).abs() < 1e-15);
}

#[test]
fn batches_cover_each_epoch_once() {
    let cfg = quick(&[("train_shapes", "5"), ("batch", "2"), ("epochs", "3")]);
    let trainer = Trainer::new(cfg.clone()).unwrap();
    assert_eq!(cfg.steps_per_epoch(), 3);
    for epoch in 0..3 {
        let mut seen: Vec<usize> = (0..3).flat_map(|s| trainer.batch_indices(epoch * 3 + s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let cfg = quick(&[("epochs", "3")]);
    let full = {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.run(None, |_, _| Ok(())).unwrap();
        t
    };
    let twin = {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.run(None, |_, _| Ok(())).unwrap();
        t
    };
    assert_eq!(full.state, twin.state);
    assert_eq!(train::evaluate(&cfg, &full.state.params).unwrap(), train::evaluate(&cfg, &twin.state.params).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let mut first = Trainer::new(cfg.clone()).unwrap();
    first.run(Some(3), |_, _| Ok(())).unwrap();
    assert_eq!(first.state.step, 3);
    first.checkpoint().save(&path).unwrap();
    let mut second = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
    second.run(None, |_, _| Ok(())).unwrap();
    assert_eq!(second.state, full.state);

    let other = quick(&[("epochs", "3"), ("seed", "1")]);
    let mut t = Trainer::new(other).unwrap();
    t.run(None, |_, _| Ok(())).unwrap();
    assert_ne!(t.state.params, full.state.params);
}

#[test]
fn corrupted_and_truncated_checkpoints_are_rejected() {
    let cfg = quick(&[]);
    let trainer = Trainer::new(cfg).unwrap();
    let bytes = trainer.checkpoint().to_bytes();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), trainer.checkpoint());
    for pos in [0, 17, bytes.len() / 3, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum(_))), "flip at {pos}");
    }
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    assert!(Checkpoint::from_bytes(&[]).is_err());
}

#[test]
fn evaluation_report_records_protocol() {
    let cfg = quick(&[]);
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let report = train::evaluate(&cfg, &trainer.state.params).unwrap();
    for key in ["cd_l1", "cd_l2", "dense_cd_l1", "dense_cd_l2", "fscore", "fidelity", "mmd"] {
        assert!(report.get(key).is_some_and(f64::is_finite), "{key}");
    }
    assert_eq!(report.n_shapes, 2);
    assert_eq!(report.threshold_fraction, 0.01);
    let text = report.to_text();
    assert!(text.contains(&cfg.run_hash()));
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert!(json.is_object());
}

#[test]
fn completion_works_in_the_callers_frame() {
    let cfg = quick(&[]);
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let ckpt = trainer.checkpoint();
    let (partial, _) = train::eval_pair(&cfg, 0).unwrap();
    // Move the scan far from the origin and scale it up.
    let moved = PointCloud::new(partial.points().iter().map(|p| [p[0] * 40.0 + 100.0, p[1] * 40.0 - 7.0, p[2] * 40.0]).collect()).unwrap();
    let out = train::complete(&ckpt, &moved).unwrap();
    let m = &cfg.model;
    assert_eq!(out.count(), m.n_proxy * m.upsample + cfg.input_points);
    let c = out.centroid();
    assert!((c[0] - 100.0).abs() < 40.0 && (c[1] + 7.0).abs() < 40.0 && c[2].abs() < 40.0, "{c:?}");
    assert_eq!(train::complete(&ckpt, &moved).unwrap(), out);
    let few = PointCloud::new(moved.points()[..10].to_vec()).unwrap();
    assert_eq!(train::complete(&ckpt, &few).unwrap().count(), out.count());
}
