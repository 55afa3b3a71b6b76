//! Run configuration as a flat `key=value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Every key has a default (the desk-scale setup), so an empty
//! file is a valid configuration. Lists are comma separated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::completion::{CorrectionConfig, ModelConfig};
use crate::data::{PairSpec, ShapeFamily};
use crate::error::{Error, Result};
use crate::relation::WeightMode;

/// Everything that determines a training or evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub shape_family: ShapeFamily,
    pub n_gt_points: usize,
    pub keep_fraction: f64,
    pub input_points: usize,
    pub model: ModelConfig,
    pub lambda: f64,
    pub sigma_noise: f64,
    pub n_denoise: usize,
    pub patch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// The total step budget is split into this many equal decay intervals.
    pub lr_decay_intervals: u64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub batch: usize,
    pub train_shapes: usize,
    pub eval_shapes: usize,
    pub fscore_fraction: f64,
    pub seed: u64,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            shape_family: ShapeFamily::Torus,
            n_gt_points: 1024,
            keep_fraction: 0.5,
            input_points: 512,
            model: ModelConfig::desk(),
            lambda: 1.0,
            sigma_noise: 0.05,
            n_denoise: 16,
            patch_size: 64,
            lr: 1e-3,
            lr_decay_factor: 0.9,
            lr_decay_intervals: 30,
            weight_decay: 0.0,
            epochs: 10,
            batch: 8,
            train_shapes: 64,
            eval_shapes: 20,
            fscore_fraction: 0.01,
            seed: 0,
            checkpoint_every: 0,
            output_dir: PathBuf::from("run"),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_pair(key: &str, value: &str) -> Result<[usize; 2]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok([parse_num(key, a)?, parse_num(key, b)?]),
        _ => Err(Error::Config(format!("{key}: expected two comma-separated values, got {value:?}"))),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn weights_name(w: WeightMode) -> &'static str {
    match w {
        WeightMode::Unit => "unit",
        WeightMode::Learned { r1: true, r2: true } => "full",
        WeightMode::Learned { r1: true, r2: false } => "r1",
        WeightMode::Learned { r1: false, r2: true } => "r2",
        WeightMode::Learned { r1: false, r2: false } => "none",
    }
}

fn parse_weights(value: &str) -> Result<WeightMode> {
    Ok(match value {
        "unit" => WeightMode::Unit,
        "full" => WeightMode::FULL,
        "r1" => WeightMode::Learned { r1: true, r2: false },
        "r2" => WeightMode::Learned { r1: false, r2: true },
        "none" => WeightMode::Learned { r1: false, r2: false },
        _ => return Err(Error::Config(format!("weights: expected unit, full, r1, r2 or none, got {value:?}"))),
    })
}

impl RunConfig {
    /// The full-scale (2048-point input) schedule with otherwise default settings.
    pub fn pcn() -> Self {
        Self { n_gt_points: 16384, input_points: 2048, model: ModelConfig::pcn(), ..Self::default() }
    }

    pub fn pair_spec(&self) -> PairSpec {
        PairSpec {
            family: self.shape_family,
            n_gt: self.n_gt_points,
            keep_fraction: self.keep_fraction,
            input_points: self.input_points,
        }
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train_shapes.div_ceil(self.batch) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs * self.steps_per_epoch()
    }

    /// Steps between learning rate decays (0 disables decay).
    pub fn decay_interval(&self) -> u64 {
        if self.lr_decay_intervals == 0 {
            return 0;
        }
        (self.total_steps() / self.lr_decay_intervals).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_gt_points", self.n_gt_points),
            ("input_points", self.input_points),
            ("patch_size", self.patch_size),
            ("batch", self.batch),
            ("train_shapes", self.train_shapes),
            ("eval_shapes", self.eval_shapes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!("keep_fraction {} outside (0, 1]", self.keep_fraction)));
        }
        if self.n_gt_points < 8 {
            return Err(Error::Config("n_gt_points must be at least 8".into()));
        }
        if self.patch_size > self.n_gt_points {
            return Err(Error::Config("patch_size exceeds n_gt_points".into()));
        }
        if self.input_points < self.model.schedule.dense_count {
            return Err(Error::Config("input_points is smaller than the extractor's dense count".into()));
        }
        let reals = [
            ("lambda", self.lambda),
            ("sigma_noise", self.sigma_noise),
            ("lr", self.lr),
            ("lr_decay_factor", self.lr_decay_factor),
            ("weight_decay", self.weight_decay),
        ];
        if let Some((name, v)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
        }
        if !(self.fscore_fraction > 0.0 && self.fscore_fraction.is_finite()) {
            return Err(Error::Config("fscore_fraction must be positive".into()));
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut m.schedule;
        match key {
            "shape_family" => self.shape_family = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "n_gt_points" => self.n_gt_points = parse_num(key, value)?,
            "keep_fraction" => self.keep_fraction = parse_num(key, value)?,
            "input_points" => self.input_points = parse_num(key, value)?,
            "dense_count" => s.dense_count = parse_num(key, value)?,
            "dense_dim" => s.dense_dim = parse_num(key, value)?,
            "stage_counts" => s.stage_counts = parse_pair(key, value)?,
            "stage_dims" => s.stage_dims = parse_pair(key, value)?,
            "extractor_heads" => s.attn_heads = parse_num(key, value)?,
            "k" => m.k = parse_num(key, value)?,
            "m_subset" => m.m_subset = parse_num(key, value)?,
            "weight_hidden" => m.weight_hidden = parse_num(key, value)?,
            "weights" => m.weights = parse_weights(value)?,
            "encoder_depth" => m.encoder_depth = parse_num(key, value)?,
            "decoder_depth" => m.decoder_depth = parse_num(key, value)?,
            "heads" => m.heads = parse_num(key, value)?,
            "ffn_hidden" => m.ffn_hidden = parse_num(key, value)?,
            "n_proxy" => m.n_proxy = parse_num(key, value)?,
            "correction" => {
                let on = parse_bool(key, value)?;
                m.correction = match (on, m.correction.take()) {
                    (true, Some(c)) => Some(c),
                    (true, None) => Some(CorrectionConfig::desk()),
                    (false, _) => None,
                };
            }
            "correction_dense_points" | "correction_lift_dim" | "correction_mid_count" | "correction_dims" | "correction_heads" => {
                let Some(c) = m.correction.as_mut() else {
                    return Err(Error::Config(format!("{key} given while correction=false")));
                };
                match key {
                    "correction_dense_points" => c.dense_points = parse_num(key, value)?,
                    "correction_lift_dim" => c.lift_dim = parse_num(key, value)?,
                    "correction_mid_count" => c.mid_count = parse_num(key, value)?,
                    "correction_dims" => c.dims = parse_pair(key, value)?,
                    _ => c.heads = parse_num(key, value)?,
                }
            }
            "upsample" => m.upsample = parse_num(key, value)?,
            "offset_radius" => m.offset_radius = parse_num(key, value)?,
            "include_input" => m.include_input = parse_bool(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "sigma_noise" => self.sigma_noise = parse_num(key, value)?,
            "n_denoise" => self.n_denoise = parse_num(key, value)?,
            "patch_size" => self.patch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_num(key, value)?,
            "lr_decay_intervals" => self.lr_decay_intervals = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "train_shapes" => self.train_shapes = parse_num(key, value)?,
            "eval_shapes" => self.eval_shapes = parse_num(key, value)?,
            "fscore_fraction" => self.fscore_fraction = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a configuration file body on top of the defaults and
    /// validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)));
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &m.schedule;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("shape_family", self.shape_family.to_string());
        put("n_gt_points", self.n_gt_points.to_string());
        put("keep_fraction", format!("{:?}", self.keep_fraction));
        put("input_points", self.input_points.to_string());
        put("dense_count", s.dense_count.to_string());
        put("dense_dim", s.dense_dim.to_string());
        put("stage_counts", format!("{},{}", s.stage_counts[0], s.stage_counts[1]));
        put("stage_dims", format!("{},{}", s.stage_dims[0], s.stage_dims[1]));
        put("extractor_heads", s.attn_heads.to_string());
        put("k", m.k.to_string());
        put("m_subset", m.m_subset.to_string());
        put("weight_hidden", m.weight_hidden.to_string());
        put("weights", weights_name(m.weights).to_string());
        put("encoder_depth", m.encoder_depth.to_string());
        put("decoder_depth", m.decoder_depth.to_string());
        put("heads", m.heads.to_string());
        put("ffn_hidden", m.ffn_hidden.to_string());
        put("n_proxy", m.n_proxy.to_string());
        put("correction", m.correction.is_some().to_string());
        if let Some(c) = &m.correction {
            put("correction_dense_points", c.dense_points.to_string());
            put("correction_lift_dim", c.lift_dim.to_string());
            put("correction_mid_count", c.mid_count.to_string());
            put("correction_dims", format!("{},{}", c.dims[0], c.dims[1]));
            put("correction_heads", c.heads.to_string());
        }
        put("upsample", m.upsample.to_string());
        put("offset_radius", format!("{:?}", m.offset_radius));
        put("include_input", m.include_input.to_string());
        put("lambda", format!("{:?}", self.lambda));
        put("sigma_noise", format!("{:?}", self.sigma_noise));
        put("n_denoise", self.n_denoise.to_string());
        put("patch_size", self.patch_size.to_string());
        put("lr", format!("{:?}", self.lr));
        put("lr_decay_factor", format!("{:?}", self.lr_decay_factor));
        put("lr_decay_intervals", self.lr_decay_intervals.to_string());
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("epochs", self.epochs.to_string());
        put("batch", self.batch.to_string());
        put("train_shapes", self.train_shapes.to_string());
        put("eval_shapes", self.eval_shapes.to_string());
        put("fscore_fraction", format!("{:?}", self.fscore_fraction));
        put("seed", self.seed.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("output_dir", self.output_dir.display().to_string());
        out
    }

    /// Hex SHA-256 of the canonical config text, the crate version and the
    /// seed.
    pub fn run_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update(self.seed.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
