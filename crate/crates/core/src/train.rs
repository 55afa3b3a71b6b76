//! Seeded training, evaluation and inference loops.
//!
//! All randomness is derived from the run seed and the step or shape
//! index, so a run is a pure function of its configuration and resuming
//! from a checkpoint continues it bitwise-identically.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{decayed_lr, AdamW, AdamWConfig, Graph, ParamStore, INIT_SCHEME};
use crate::checkpoint::{Checkpoint, TrainState};
use crate::completion::{CompletionModel, Forward};
use crate::config::RunConfig;
use crate::data::{self, make_pair};
use crate::error::{Error, Result};
use crate::geom::{self, PointCloud};
use crate::metrics::{self, build_denoise_queries, loss_graph, LossBreakdown, MetricReport};

const TRAIN_SALT: u64 = 0x7261_696e;
const EVAL_SALT: u64 = 0x6576_616c;
const DENOISE_SALT: u64 = 0x6e6f_6973;
const ORDER_SALT: u64 = 0x6f72_6465;
const FORWARD_SALT: u64 = 0x6677_6400;
const EMA_DECAY: f64 = 0.9;

/// SplitMix64 finaliser over a combination of seed words.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        z = (z ^ p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Training pair `index` of the run.
pub fn train_pair(cfg: &RunConfig, index: usize) -> Result<(PointCloud, PointCloud)> {
    make_pair(&cfg.pair_spec(), mix_seed(&[cfg.seed, TRAIN_SALT, index as u64]))
}

/// Held-out pair `index`; disjoint seeds from the training pairs.
pub fn eval_pair(cfg: &RunConfig, index: usize) -> Result<(PointCloud, PointCloud)> {
    make_pair(&cfg.pair_spec(), mix_seed(&[cfg.seed, EVAL_SALT, index as u64]))
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    /// Step index before the update.
    pub step: u64,
    pub lr: f64,
    /// Batch means of the loss components.
    pub loss: LossBreakdown,
    pub loss_ema: f64,
}

impl StepLog {
    /// `step=.. lr=.. j0=.. j1=.. j_denoise=.. lambda=.. total=.. ema=..`
    /// with shortest round-trip float formatting.
    pub fn to_line(&self) -> String {
        let l = &self.loss;
        format!(
            "step={} lr={:?} j0={:?} j1={:?} j_denoise={:?} lambda={:?} total={:?} ema={:?}",
            self.step, self.lr, l.j0, l.j1, l.j_denoise, l.lambda, l.total, self.loss_ema
        )
    }
}

/// A model, its training data and the mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: CompletionModel,
    pub state: TrainState,
    pairs: Vec<(PointCloud, PointCloud)>,
}

impl Trainer {
    /// Fresh parameters drawn from the run seed.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = CompletionModel::new(cfg.model.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = model.init_params(&mut rng)?;
        let optimizer = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
        let state = TrainState { step: 0, params, optimizer, loss_ema: None };
        Self::with_state(cfg, model, state)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let model = CompletionModel::new(ckpt.config.model.clone())?;
        Self::with_state(ckpt.config, model, ckpt.state)
    }

    fn with_state(cfg: RunConfig, model: CompletionModel, state: TrainState) -> Result<Self> {
        let pairs = (0..cfg.train_shapes).map(|i| train_pair(&cfg, i)).collect::<Result<_>>()?;
        Ok(Self { cfg, model, state, pairs })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.cfg.clone(), state: self.state.clone() }
    }

    pub fn pairs(&self) -> &[(PointCloud, PointCloud)] {
        &self.pairs
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.cfg.total_steps()
    }

    /// Training-set indices used at `step`: a per-epoch seeded shuffle cut
    /// into consecutive batches.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let per_epoch = self.cfg.steps_per_epoch();
        let epoch = step / per_epoch;
        let mut order: Vec<usize> = (0..self.cfg.train_shapes).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, ORDER_SALT, epoch])));
        let start = (step % per_epoch) as usize * self.cfg.batch;
        order[start..(start + self.cfg.batch).min(order.len())].to_vec()
    }

    /// Objective and parameter gradients for one training pair.
    pub fn item_loss(&self, step: u64, index: usize) -> Result<(LossBreakdown, BTreeMap<String, Vec<f64>>)> {
        let (partial, gt) = &self.pairs[index];
        let cfg = &self.cfg;
        let mut g = Graph::new();
        let fwd = self.model.forward(&mut g, &self.state.params, partial, mix_seed(&[cfg.seed, FORWARD_SALT, index as u64]))?;
        let queries = if cfg.lambda > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, DENOISE_SALT, step, index as u64]));
            build_denoise_queries(gt, cfg.n_denoise, cfg.sigma_noise, cfg.patch_size, &mut rng)?
        } else {
            Vec::new()
        };
        let local = if queries.is_empty() {
            None
        } else {
            let centers: Vec<_> = queries.iter().map(|q| q.noisy_center).collect();
            Some(self.model.predict_local(&mut g, &self.state.params, &fwd, &centers)?)
        };
        let (loss, breakdown) =
            loss_graph(&mut g, fwd.proxies.coords, fwd.dense, gt, &queries, local, cfg.model.upsample, cfg.lambda)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at step {step} on shape {index}")));
        }
        let grads = g.backward(loss)?;
        Ok((breakdown, g.param_grads(&grads)))
    }

    /// One optimizer step over the next batch. Per-item gradients are
    /// summed in batch order and averaged.
    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.state.step;
        let batch = self.batch_indices(step);
        let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let (mut j0, mut j1, mut jd) = (0.0, 0.0, 0.0);
        let mut empty = false;
        for &i in &batch {
            let (b, grads) = self.item_loss(step, i)?;
            j0 += b.j0;
            j1 += b.j1;
            jd += b.j_denoise;
            empty |= b.denoise_empty;
            for (name, gv) in grads {
                match sum.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, v)| *a += v),
                    None => {
                        sum.insert(name, gv);
                    }
                }
            }
        }
        let n = batch.len() as f64;
        for acc in sum.values_mut() {
            acc.iter_mut().for_each(|a| *a /= n);
        }
        let lr = decayed_lr(self.cfg.lr, self.cfg.lr_decay_factor, self.cfg.decay_interval(), step);
        self.state.optimizer.step(&mut self.state.params, &sum, lr)?;
        let loss = LossBreakdown::compose(j0 / n, j1 / n, jd / n, self.cfg.lambda, empty);
        let ema = match self.state.loss_ema {
            None => loss.total,
            Some(e) => EMA_DECAY * e + (1.0 - EMA_DECAY) * loss.total,
        };
        self.state.loss_ema = Some(ema);
        self.state.step += 1;
        Ok(StepLog { step, lr, loss, loss_ema: ema })
    }

    /// Steps until the configured budget or `stop_at` (an absolute step
    /// count) is reached, whichever comes first.
    pub fn run(&mut self, stop_at: Option<u64>, mut on_step: impl FnMut(&Self, &StepLog) -> Result<()>) -> Result<()> {
        let end = stop_at.map_or(self.cfg.total_steps(), |s| s.min(self.cfg.total_steps()));
        while self.state.step < end {
            let log = self.step()?;
            on_step(self, &log)?;
        }
        Ok(())
    }
}

/// Forward pass of `model` on one partial cloud with a seed tied to the
/// shape index.
fn predict(model: &CompletionModel, params: &ParamStore, partial: &PointCloud, seed: u64) -> Result<(Graph, Forward)> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, params, partial, seed)?;
    Ok((g, fwd))
}

/// Mean metrics over `pairs`. `cd_*`, `fscore`, `fidelity` and `mmd` use
/// the evaluated output cloud; `dense_cd_*` use the dense prediction
/// alone.
pub fn evaluate_pairs(cfg: &RunConfig, params: &ParamStore, pairs: &[(PointCloud, PointCloud)], salt: u64) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let model = CompletionModel::new(cfg.model.clone())?;
    let names = ["cd_l1", "cd_l2", "dense_cd_l1", "dense_cd_l2", "fscore", "fidelity", "mmd"];
    let mut sums = [0.0; 7];
    let mut pred_points = 0;
    for (i, (partial, gt)) in pairs.iter().enumerate() {
        let (g, fwd) = predict(&model, params, partial, mix_seed(&[cfg.seed, salt, i as u64]))?;
        let dense = PointCloud::from_flat(g.value(fwd.dense).data())?;
        let out = model.output_cloud(&g, &fwd, partial)?;
        pred_points = out.count();
        let vals = [
            metrics::chamfer_l1(&out, gt)?,
            metrics::chamfer_l2(&out, gt)?,
            metrics::chamfer_l1(&dense, gt)?,
            metrics::chamfer_l2(&dense, gt)?,
            metrics::f_score(&out, gt, cfg.fscore_fraction)?,
            metrics::fidelity(partial, &out)?,
            metrics::mmd(&out, std::slice::from_ref(gt))?,
        ];
        for (s, v) in sums.iter_mut().zip(vals) {
            *s += v;
        }
    }
    let n = pairs.len() as f64;
    let weights = match cfg.model.weights {
        crate::relation::WeightMode::Unit => "unit".to_string(),
        crate::relation::WeightMode::Learned { r1, r2 } => format!("learned(r1={r1},r2={r2})"),
    };
    Ok(MetricReport {
        entries: names.iter().zip(sums).map(|(k, s)| (k.to_string(), s / n)).collect(),
        threshold_fraction: cfg.fscore_fraction,
        n_shapes: pairs.len(),
        pred_points,
        gt_points: pairs[0].1.count(),
        notes: vec![
            ("run_hash".into(), cfg.run_hash()),
            ("lambda".into(), format!("{:?}", cfg.lambda)),
            ("sigma_noise".into(), format!("{:?}", cfg.sigma_noise)),
            ("weights".into(), weights),
            ("correction".into(), cfg.model.correction.is_some().to_string()),
            ("include_input".into(), cfg.model.include_input.to_string()),
            ("init".into(), INIT_SCHEME.into()),
            ("fidelity_mmd_protocol".into(), "single-reference approximation".into()),
        ],
    })
}

/// Metrics on the run's seeded held-out set.
pub fn evaluate(cfg: &RunConfig, params: &ParamStore) -> Result<MetricReport> {
    let pairs = (0..cfg.eval_shapes).map(|i| eval_pair(cfg, i)).collect::<Result<Vec<_>>>()?;
    evaluate_pairs(cfg, params, &pairs, EVAL_SALT)
}

/// Completes an arbitrary partial scan: normalises it into the unit ball,
/// resamples it to the configured input size, predicts, and maps the
/// result back to the input frame.
pub fn complete(ckpt: &Checkpoint, input: &PointCloud) -> Result<PointCloud> {
    let cfg = &ckpt.config;
    let model = CompletionModel::new(cfg.model.clone())?;
    let (normalized, frame) = geom::normalize_unit_sphere(input);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, EVAL_SALT]));
    let partial = if normalized.count() > cfg.input_points {
        let idx = geom::farthest_point_sample(&normalized, cfg.input_points, cfg.seed)?;
        normalized.select(&idx)?
    } else {
        data::resample(&normalized, cfg.input_points, &mut rng)?
    };
    let (g, fwd) = predict(&model, &ckpt.state.params, &partial, cfg.seed)?;
    let out = model.output_cloud(&g, &fwd, &partial)?;
    Ok(frame.invert(&out))
}
