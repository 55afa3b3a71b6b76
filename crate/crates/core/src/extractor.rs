//! Coarse-to-fine feature extraction.
//!
//! Phase one is a single EdgeConv layer over the raw partial cloud that
//! keeps `dense_count` farthest-point centres. Phase two alternates global
//! self-attention with an [`StLfe`] stage twice, halving the point count
//! and widening features each round. A positional embedding of the final
//! centres is returned alongside the features.

use rand::Rng;

use crate::attention::{AttnMaps, SelfAttentionBlock};
use crate::autodiff::nn::{Activation, Mlp, LEAKY};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{invalid_arg, Result};
use crate::geom::{self, PointCloud};
use crate::relation::{Lgrp, LgrpConfig, StLfe, WeightMode};

/// Point counts and feature widths through the extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorSchedule {
    pub dense_count: usize,
    pub dense_dim: usize,
    pub stage_counts: [usize; 2],
    pub stage_dims: [usize; 2],
    pub attn_heads: usize,
}

impl ExtractorSchedule {
    /// 512/16 → 256/32 → 128/64.
    pub fn desk() -> Self {
        Self { dense_count: 512, dense_dim: 16, stage_counts: [256, 128], stage_dims: [32, 64], attn_heads: 4 }
    }

    /// 1048/96 → 512/192 → 256/384 with six heads.
    pub fn pcn() -> Self {
        Self { dense_count: 1048, dense_dim: 96, stage_counts: [512, 256], stage_dims: [192, 384], attn_heads: 6 }
    }

    pub fn output_dim(&self) -> usize {
        self.stage_dims[1]
    }

    pub fn output_count(&self) -> usize {
        self.stage_counts[1]
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.dense_count, self.stage_counts[0], self.stage_counts[1]];
        let dims = [self.dense_dim, self.stage_dims[0], self.stage_dims[1]];
        if counts.windows(2).any(|w| w[1] >= w[0]) || counts[2] == 0 {
            return invalid_arg(format!("stage counts must strictly decrease: {counts:?}"));
        }
        if dims.windows(2).any(|w| w[1] <= w[0]) || dims[0] == 0 {
            return invalid_arg(format!("stage widths must strictly increase: {dims:?}"));
        }
        if self.attn_heads == 0 || dims[..2].iter().any(|d| d % self.attn_heads != 0) {
            return invalid_arg(format!("widths {dims:?} are not divisible by {} heads", self.attn_heads));
        }
        Ok(())
    }
}

/// Output of [`Extractor::forward`].
#[derive(Debug, Clone)]
pub struct Extracted {
    /// Indices of the final centres into the input cloud.
    pub source_indices: Vec<usize>,
    pub coords: Var,
    pub feats: Var,
    pub pos_embed: Var,
    /// `(count, width)` after each stage, starting with phase one.
    pub trace: Vec<(usize, usize)>,
}

/// Farthest-point-sampled single EdgeConv layer with raw coordinates as the
/// initial features. Neighbours are drawn from the full input.
#[derive(Debug, Clone)]
pub struct EdgeConvSingle {
    pub dense_count: usize,
    lgrp: Lgrp,
}

impl EdgeConvSingle {
    pub fn new(prefix: &str, k: usize, dense_count: usize, out_dim: usize) -> Result<Self> {
        let mut cfg = LgrpConfig::new(k, 1, 3, out_dim);
        cfg.weights = WeightMode::Unit;
        Ok(Self { dense_count, lgrp: Lgrp::new(prefix, cfg)? })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.lgrp.init(store, rng)
    }

    /// Returns the sampled indices, their coordinates and features.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &PointCloud, seed: u64) -> Result<(Vec<usize>, Var, Var)> {
        if self.dense_count > input.count() {
            return invalid_arg(format!("cannot sample {} dense points from {}", self.dense_count, input.count()));
        }
        let centers = geom::farthest_point_sample(input, self.dense_count, seed)?;
        let index = geom::knn(&input.select(&centers)?, input, self.lgrp.cfg.k)?;
        let all = g.constant(Tensor::matrix(input.count(), 3, input.to_flat())?);
        let qc = g.gather_rows(all, &centers)?;
        let feats = self.lgrp.forward(g, store, qc, qc, all, all, &index)?;
        Ok((centers, qc, feats))
    }
}

#[derive(Debug, Clone)]
pub struct Extractor {
    pub schedule: ExtractorSchedule,
    edgeconv: EdgeConvSingle,
    rounds: Vec<(SelfAttentionBlock, StLfe)>,
    pos: Mlp,
}

impl Extractor {
    pub fn new(prefix: &str, schedule: ExtractorSchedule, k: usize, m_subset: usize, weights: WeightMode, weight_hidden: usize) -> Result<Self> {
        schedule.validate()?;
        let edgeconv = EdgeConvSingle::new(&format!("{prefix}.edgeconv"), k, schedule.dense_count, schedule.dense_dim)?;
        let mut rounds = Vec::with_capacity(2);
        let mut width = schedule.dense_dim;
        for r in 0..2 {
            let attn = SelfAttentionBlock::new(&format!("{prefix}.round{r}.attn"), width, schedule.attn_heads)?;
            let mut cfg = LgrpConfig::new(k, m_subset, width, schedule.stage_dims[r]);
            cfg.weights = weights;
            cfg.weight_hidden = weight_hidden;
            let stlfe = StLfe::new(&format!("{prefix}.round{r}.stlfe"), cfg, schedule.stage_counts[r])?;
            rounds.push((attn, stlfe));
            width = schedule.stage_dims[r];
        }
        let pos = Mlp::chain(&format!("{prefix}.pos"), &[3, width, width], LEAKY, Activation::Identity)?;
        Ok(Self { schedule, edgeconv, rounds, pos })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.edgeconv.init(store, rng)?;
        for (attn, stlfe) in &self.rounds {
            attn.init(store, rng)?;
            stlfe.init(store, rng)?;
        }
        self.pos.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, partial: &PointCloud, seed: u64, maps: &mut AttnMaps) -> Result<Extracted> {
        let (mut source, mut coords, mut feats) = self.edgeconv.forward(g, store, partial, seed)?;
        let mut trace = vec![(g.value(feats).rows(), g.value(feats).cols())];
        for (r, (attn, stlfe)) in self.rounds.iter().enumerate() {
            feats = attn.forward(g, store, feats, maps)?;
            let stage = stlfe.forward(g, store, coords, feats, seed.wrapping_add(r as u64 + 1), &[])?;
            source = stage.centers.iter().map(|&c| source[c]).collect();
            coords = stage.coords;
            feats = stage.feats;
            trace.push((g.value(feats).rows(), g.value(feats).cols()));
        }
        let pos_embed = self.pos.forward(g, store, coords)?;
        Ok(Extracted { source_indices: source, coords, feats, pos_embed, trace })
    }
}
