//! Relation-weighted local aggregation.
//!
//! For a target point `Q` and its k nearest neighbours `V_i`:
//!
//! * `r1(Q, V_i)` is the per-axis absolute coordinate difference.
//! * `r2(Q, V_i)` is `| mean_{j<M} e_j − e_i |` elementwise, where
//!   `e_j = feat(V_j) − feat(Q)` and the mean runs over the `M` nearest
//!   neighbours.
//!
//! [`Lgrp`] turns `concat(r1, r2)` into per-neighbour, per-channel weights in
//! (0, 1), multiplies them into EdgeConv features and max-pools over the
//! neighbourhood. [`StLfe`] wraps it with farthest point downsampling.

use rand::Rng;

use crate::autodiff::nn::{Activation, Mlp, LEAKY};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{invalid_arg, Result};
use crate::geom::{self, NeighborIndex, PointCloud};

/// Per-axis absolute coordinate differences, shape `[n_query, k, 3]`.
///
/// `neighbor_coords` holds `k` consecutive rows per query.
pub fn compute_r1(g: &mut Graph, query_coords: Var, neighbor_coords: Var, k: usize) -> Result<Var> {
    let nq = g.value(query_coords).rows();
    if g.value(neighbor_coords).rows() != nq * k || g.value(query_coords).cols() != 3 {
        return invalid_arg(format!(
            "r1: expected {} neighbour rows for {nq} queries with k = {k}",
            nq * k
        ));
    }
    let q = repeat_rows(g, query_coords, k)?;
    let diff = g.sub(neighbor_coords, q)?;
    let r1 = g.abs(diff);
    g.reshape(r1, &[nq, k, 3])
}

/// Deviation of every directed edge from the mean edge of the first
/// `m_subset` neighbours, shape `[n_query, k, d]`. Neighbour rows must be
/// ordered nearest first.
pub fn compute_r2(g: &mut Graph, query_feats: Var, neighbor_feats: Var, k: usize, m_subset: usize) -> Result<Var> {
    let q = repeat_rows(g, query_feats, k)?;
    if g.shape(q) != g.shape(neighbor_feats) {
        return invalid_arg("r2: neighbour features do not match query rows × k");
    }
    let edges = g.sub(neighbor_feats, q)?;
    r2_from_edges(g, edges, k, m_subset)
}

fn r2_from_edges(g: &mut Graph, edges: Var, k: usize, m_subset: usize) -> Result<Var> {
    if m_subset == 0 || m_subset > k {
        return invalid_arg(format!("m_subset = {m_subset} must lie in 1..={k}"));
    }
    let rows = g.value(edges).rows();
    let d = g.value(edges).cols();
    let nq = rows / k;
    let head: Vec<usize> = (0..nq).flat_map(|q| (0..m_subset).map(move |j| q * k + j)).collect();
    let head = g.gather_rows(edges, &head)?;
    let head = g.reshape(head, &[nq, m_subset, d])?;
    let mean = g.mean_over_axis(head, 1)?;
    let mean = repeat_rows(g, mean, k)?;
    let dev = g.sub(mean, edges)?;
    let r2 = g.abs(dev);
    g.reshape(r2, &[nq, k, d])
}

/// Row `i` of the output is row `i / times` of `x`.
pub(crate) fn repeat_rows(g: &mut Graph, x: Var, times: usize) -> Result<Var> {
    let rows = g.value(x).rows();
    let idx: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat_n(r, times)).collect();
    g.gather_rows(x, &idx)
}

/// Which relation metrics feed the contribution-weight MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// Learned weights from the selected metrics.
    Learned { r1: bool, r2: bool },
    /// Weight branch fixed to ones: plain EdgeConv with max pooling.
    Unit,
}

impl WeightMode {
    pub const FULL: WeightMode = WeightMode::Learned { r1: true, r2: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct LgrpConfig {
    pub k: usize,
    pub m_subset: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight_hidden: usize,
    pub weights: WeightMode,
}

impl LgrpConfig {
    pub fn new(k: usize, m_subset: usize, in_dim: usize, out_dim: usize) -> Self {
        Self { k, m_subset, in_dim, out_dim, weight_hidden: 32, weights: WeightMode::FULL }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.in_dim == 0 || self.out_dim == 0 || self.weight_hidden == 0 {
            return invalid_arg("LGRP dimensions must be positive");
        }
        if self.m_subset == 0 || self.m_subset > self.k {
            return invalid_arg(format!("m_subset = {} must lie in 1..={}", self.m_subset, self.k));
        }
        if let WeightMode::Learned { r1: false, r2: false } = self.weights {
            return invalid_arg("learned weights need at least one relation metric");
        }
        Ok(())
    }
}

/// Local geometric relationship perception block.
///
/// Parameters live under `{prefix}.edge.*` (EdgeConv branch) and
/// `{prefix}.weight.*` (contribution-weight branch).
#[derive(Debug, Clone)]
pub struct Lgrp {
    pub cfg: LgrpConfig,
    edge: Mlp,
    weight: Option<Mlp>,
}

impl Lgrp {
    pub fn new(prefix: &str, cfg: LgrpConfig) -> Result<Self> {
        cfg.validate()?;
        let edge = Mlp::new(&format!("{prefix}.edge"), &[(2 * cfg.in_dim, cfg.out_dim, LEAKY)])?;
        let weight = match cfg.weights {
            WeightMode::Unit => None,
            WeightMode::Learned { r1, r2 } => {
                let width = if r1 { 3 } else { 0 } + if r2 { cfg.in_dim } else { 0 };
                Some(Mlp::new(
                    &format!("{prefix}.weight"),
                    &[(width, cfg.weight_hidden, LEAKY), (cfg.weight_hidden, cfg.out_dim, Activation::Sigmoid)],
                )?)
            }
        };
        Ok(Self { cfg, edge, weight })
    }

    pub fn edge_mlp(&self) -> &Mlp {
        &self.edge
    }

    pub fn weight_mlp(&self) -> Option<&Mlp> {
        self.weight.as_ref()
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.edge.init(store, rng)?;
        if let Some(w) = &self.weight {
            w.init(store, rng)?;
        }
        Ok(())
    }

    /// Aggregates features of `index`'s neighbours (rows of `ref_*`) onto
    /// each query point. Output shape `[n_query, out_dim]`.
    ///
    /// Each neighbour row is first put in `(distance, index)` order, so the
    /// result does not depend on how the caller ordered neighbours.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query_coords: Var,
        query_feats: Var,
        ref_coords: Var,
        ref_feats: Var,
        index: &NeighborIndex,
    ) -> Result<Var> {
        let k = self.cfg.k;
        let nq = g.value(query_coords).rows();
        if index.k() != k || index.n_query() != nq {
            return invalid_arg(format!(
                "neighbour index is {}×{}, expected {nq}×{k}",
                index.n_query(),
                index.k()
            ));
        }
        if g.value(query_feats).rows() != nq || g.value(ref_feats).rows() != g.value(ref_coords).rows() {
            return invalid_arg("features are not row-aligned with coordinates");
        }
        if g.value(query_feats).cols() != self.cfg.in_dim || g.value(ref_feats).cols() != self.cfg.in_dim {
            return invalid_arg(format!("expected feature width {}", self.cfg.in_dim));
        }
        let ids = canonical_neighbor_ids(index);
        let q_rep = repeat_rows(g, query_feats, k)?;
        let nbr = g.gather_rows(ref_feats, &ids)?;
        let edges = g.sub(nbr, q_rep)?;
        let edge_in = g.concat(&[q_rep, edges])?;
        let mut per_neighbor = self.edge.forward(g, store, edge_in)?;

        if let (Some(weight), WeightMode::Learned { r1, r2 }) = (&self.weight, self.cfg.weights) {
            let mut metrics = Vec::with_capacity(2);
            if r1 {
                let nc = g.gather_rows(ref_coords, &ids)?;
                let m = compute_r1(g, query_coords, nc, k)?;
                metrics.push(g.reshape(m, &[nq * k, 3])?);
            }
            if r2 {
                let m = r2_from_edges(g, edges, k, self.cfg.m_subset)?;
                metrics.push(g.reshape(m, &[nq * k, self.cfg.in_dim])?);
            }
            let relation = g.concat(&metrics)?;
            let w = weight.forward(g, store, relation)?;
            per_neighbor = g.mul(per_neighbor, w)?;
        }
        let grouped = g.reshape(per_neighbor, &[nq, k, self.cfg.out_dim])?;
        g.max_over_axis(grouped, 1)
    }
}

/// Neighbour ids per row sorted by `(distance, id)`, flattened.
fn canonical_neighbor_ids(index: &NeighborIndex) -> Vec<usize> {
    let mut out = Vec::with_capacity(index.ids().len());
    let mut row: Vec<(f64, usize)> = Vec::with_capacity(index.k());
    for q in 0..index.n_query() {
        row.clear();
        row.extend(index.row_dist(q).iter().copied().zip(index.row_ids(q).iter().copied()));
        row.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(row.iter().map(|&(_, i)| i));
    }
    out
}

/// Reads the coordinate rows of a graph node as a point cloud.
pub(crate) fn cloud_of(g: &Graph, coords: Var) -> Result<PointCloud> {
    PointCloud::from_flat(g.value(coords).data())
}

/// Output of a downsampling stage: indices of the kept centres into the
/// stage input, their coordinates and their new features.
#[derive(Debug, Clone)]
pub struct Stage {
    pub centers: Vec<usize>,
    pub coords: Var,
    pub feats: Var,
}

/// Scale-tailored local feature extractor: farthest-point pruning to
/// `out_count` centres followed by an [`Lgrp`] over neighbours drawn from the
/// full input, widening features to `cfg.out_dim`.
#[derive(Debug, Clone)]
pub struct StLfe {
    pub lgrp: Lgrp,
    pub out_count: usize,
}

impl StLfe {
    pub fn new(prefix: &str, cfg: LgrpConfig, out_count: usize) -> Result<Self> {
        if cfg.out_dim < cfg.in_dim {
            return invalid_arg(format!("ST-LFE cannot shrink width {} to {}", cfg.in_dim, cfg.out_dim));
        }
        if out_count == 0 {
            return invalid_arg("ST-LFE output count must be positive");
        }
        Ok(Self { lgrp: Lgrp::new(&format!("{prefix}.lgrp"), cfg)?, out_count })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.lgrp.init(store, rng)
    }

    /// Centres are chosen by farthest point sampling seeded with `seed`;
    /// indices in `keep` are selected first (in order) when given.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        coords: Var,
        feats: Var,
        seed: u64,
        keep: &[usize],
    ) -> Result<Stage> {
        let cloud = cloud_of(g, coords)?;
        if self.out_count > cloud.count() {
            return invalid_arg(format!("ST-LFE cannot keep {} of {} points", self.out_count, cloud.count()));
        }
        let centers = if keep.is_empty() {
            geom::farthest_point_sample(&cloud, self.out_count, seed)?
        } else {
            geom::farthest_point_sample_from(&cloud, self.out_count, keep)?
        };
        let center_cloud = cloud.select(&centers)?;
        let index = geom::knn(&center_cloud, &cloud, self.lgrp.cfg.k)?;
        let qc = g.gather_rows(coords, &centers)?;
        let qf = g.gather_rows(feats, &centers)?;
        let out = self.lgrp.forward(g, store, qc, qf, coords, feats, &index)?;
        Ok(Stage { centers, coords: qc, feats: out })
    }
}
