//! Encoder, proxy generator, proxy correction, decoder and rebuild head,
//! assembled into the full completion network.
//!
//! Parameter namespaces: `extractor.*`, `encoder.*`, `generator.*`,
//! `correction.*`, `decoder.*`, `rebuild.*`.

use rand::Rng;

use crate::attention::{AttnMaps, DecoderBlock, EncoderBlock, SelfAttentionBlock};
use crate::autodiff::nn::{Activation, LayerNorm, Linear, Mlp, LEAKY};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{invalid_arg, Result};
use crate::extractor::{Extracted, Extractor, ExtractorSchedule};
use crate::geom::{self, PointCloud};
use crate::relation::{repeat_rows, LgrpConfig, StLfe, WeightMode};

/// Weight scale of the layers that feed a `radial_tanh`, keeping initial
/// outputs in its near-linear range.
pub const HEAD_INIT_SCALE: f64 = 0.1;

/// Low-width correction module layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionConfig {
    /// Points re-sampled from the partial input.
    pub dense_points: usize,
    /// Width of the coordinate lift applied to every point.
    pub lift_dim: usize,
    /// Point count after the first ST-LFE; the second returns to `n_proxy`.
    pub mid_count: usize,
    pub dims: [usize; 2],
    pub heads: usize,
}

impl CorrectionConfig {
    pub fn desk() -> Self {
        Self { dense_points: 384, lift_dim: 8, mid_count: 128, dims: [16, 24], heads: 2 }
    }

    /// 1536 re-introduced points; 2048 → 1024 → 512 together with 512 proxies.
    pub fn pcn() -> Self {
        Self { dense_points: 1536, lift_dim: 8, mid_count: 1024, dims: [16, 24], heads: 2 }
    }

    pub fn max_width(&self) -> usize {
        self.lift_dim.max(self.dims[0]).max(self.dims[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub schedule: ExtractorSchedule,
    pub k: usize,
    pub m_subset: usize,
    pub weight_hidden: usize,
    pub weights: WeightMode,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub n_proxy: usize,
    pub correction: Option<CorrectionConfig>,
    pub upsample: usize,
    pub offset_radius: f64,
    /// Append the partial input to the evaluated output cloud.
    pub include_input: bool,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            schedule: ExtractorSchedule::desk(),
            k: 16,
            m_subset: 4,
            weight_hidden: 32,
            weights: WeightMode::FULL,
            encoder_depth: 6,
            decoder_depth: 8,
            heads: 4,
            ffn_hidden: 64,
            n_proxy: 64,
            correction: Some(CorrectionConfig::desk()),
            upsample: 16,
            offset_radius: 0.15,
            include_input: true,
        }
    }

    pub fn pcn() -> Self {
        Self {
            schedule: ExtractorSchedule::pcn(),
            heads: 6,
            ffn_hidden: 384,
            n_proxy: 512,
            correction: Some(CorrectionConfig::pcn()),
            upsample: 32,
            ..Self::desk()
        }
    }

    pub fn dim(&self) -> usize {
        self.schedule.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.k == 0 || self.m_subset == 0 || self.m_subset > self.k {
            return invalid_arg(format!("need 1 <= M ({}) <= k ({})", self.m_subset, self.k));
        }
        if self.k > self.schedule.output_count() {
            return invalid_arg("k exceeds the smallest extractor stage");
        }
        if self.n_proxy == 0 || self.upsample == 0 || self.encoder_depth == 0 || self.decoder_depth == 0 {
            return invalid_arg("proxy count, upsample factor and depths must be positive");
        }
        if !(self.offset_radius > 0.0) {
            return invalid_arg("offset radius must be positive");
        }
        if !self.dim().is_multiple_of(self.heads) {
            return invalid_arg(format!("width {} not divisible by {} heads", self.dim(), self.heads));
        }
        if let Some(c) = &self.correction {
            if c.mid_count <= self.n_proxy || c.mid_count > self.n_proxy + c.dense_points {
                return invalid_arg("correction mid count must lie in (n_proxy, n_proxy + dense_points]");
            }
            if self.k > self.n_proxy {
                return invalid_arg("k exceeds the proxy count used by the correction module");
            }
            if c.lift_dim % c.heads != 0 || c.dims[0] < c.lift_dim || c.dims[1] < c.dims[0] {
                return invalid_arg("correction widths must be non-decreasing and divisible by its heads");
            }
        }
        Ok(())
    }
}

/// Sparse proxies: centre coordinates and features, row-aligned.
#[derive(Debug, Clone, Copy)]
pub struct ProxySet {
    pub coords: Var,
    pub feats: Var,
}

/// Max-pools the encoder output to a global vector, predicts proxy centres
/// inside the unit ball, and builds proxy features from (global, centre).
#[derive(Debug, Clone)]
pub struct Generator {
    pub n_proxy: usize,
    coord_mlp: Mlp,
    feat_mlp: Mlp,
}

impl Generator {
    pub fn new(prefix: &str, dim: usize, n_proxy: usize) -> Result<Self> {
        Ok(Self {
            n_proxy,
            coord_mlp: Mlp::chain(&format!("{prefix}.coords"), &[dim, dim, n_proxy * 3], LEAKY, Activation::Identity)?,
            feat_mlp: Mlp::chain(&format!("{prefix}.feats"), &[dim + 3, dim, dim], LEAKY, Activation::Identity)?,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.coord_mlp.init_head(store, rng, HEAD_INIT_SCALE)?;
        self.feat_mlp.init(store, rng)
    }

    pub fn global(&self, g: &mut Graph, latent: Var) -> Result<Var> {
        let pooled = g.max_over_axis(latent, 0)?;
        let d = g.value(pooled).len();
        g.reshape(pooled, &[1, d])
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, latent: Var) -> Result<(Var, ProxySet)> {
        let global = self.global(g, latent)?;
        let raw = self.coord_mlp.forward(g, store, global)?;
        let raw = g.reshape(raw, &[self.n_proxy, 3])?;
        let coords = g.radial_tanh(raw, 1.0);
        let feats = self.features_at(g, store, global, coords)?;
        Ok((global, ProxySet { coords, feats }))
    }

    /// Proxy features for arbitrary centres given the global vector.
    pub fn features_at(&self, g: &mut Graph, store: &ParamStore, global: Var, coords: Var) -> Result<Var> {
        let n = g.value(coords).rows();
        let rep = repeat_rows(g, global, n)?;
        let x = g.concat(&[rep, coords])?;
        self.feat_mlp.forward(g, store, x)
    }
}

/// Injects dense input geometry into proxy features through low-width
/// self-attention and two ST-LFE stages, then adds a zero-initialised
/// projection of the result back onto the proxies.
#[derive(Debug, Clone)]
pub struct Correction {
    pub cfg: CorrectionConfig,
    n_proxy: usize,
    lift: Mlp,
    proxy_proj: Linear,
    attn: SelfAttentionBlock,
    stages: [StLfe; 2],
    out: Linear,
}

impl Correction {
    pub fn new(prefix: &str, cfg: CorrectionConfig, dim: usize, n_proxy: usize, k: usize, m_subset: usize, weights: WeightMode, weight_hidden: usize) -> Result<Self> {
        let stage = |i: usize, in_dim: usize, out_dim: usize, count: usize| {
            let mut c = LgrpConfig::new(k, m_subset, in_dim, out_dim);
            c.weights = weights;
            c.weight_hidden = weight_hidden;
            StLfe::new(&format!("{prefix}.stlfe{i}"), c, count)
        };
        Ok(Self {
            n_proxy,
            lift: Mlp::new(&format!("{prefix}.lift"), &[(3, cfg.lift_dim, LEAKY)])?,
            proxy_proj: Linear::new(format!("{prefix}.proxy_proj"), dim, cfg.lift_dim),
            attn: SelfAttentionBlock::new(&format!("{prefix}.attn"), cfg.lift_dim, cfg.heads)?,
            stages: [
                stage(0, cfg.lift_dim, cfg.dims[0], cfg.mid_count)?,
                stage(1, cfg.dims[0], cfg.dims[1], n_proxy)?,
            ],
            out: Linear::new(format!("{prefix}.out"), cfg.dims[1], dim),
            cfg,
        })
    }

    pub fn out_projection(&self) -> &Linear {
        &self.out
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.lift.init(store, rng)?;
        self.proxy_proj.init(store, rng)?;
        self.attn.init(store, rng)?;
        for s in &self.stages {
            s.init(store, rng)?;
        }
        self.out.init_zero(store);
        Ok(())
    }

    /// Corrected proxy features; coordinates are unchanged. Proxies occupy
    /// the first `n_proxy` rows of the merged set and are always kept as
    /// centres, so the output stays row-aligned with the input proxies.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, proxies: ProxySet, dense: &PointCloud, seed: u64, maps: &mut AttnMaps) -> Result<Var> {
        if dense.count() != self.cfg.dense_points {
            return invalid_arg(format!("correction expects {} dense points, got {}", self.cfg.dense_points, dense.count()));
        }
        if g.value(proxies.coords).rows() != self.n_proxy {
            return invalid_arg("proxy count does not match the correction module");
        }
        let dense_coords = g.constant(Tensor::matrix(dense.count(), 3, dense.to_flat())?);
        let coords = g.concat_rows(&[proxies.coords, dense_coords])?;
        let lifted = self.lift.forward(g, store, coords)?;
        let proxy_lift = g.slice_rows(lifted, 0, self.n_proxy)?;
        let dense_lift = g.slice_rows(lifted, self.n_proxy, self.n_proxy + dense.count())?;
        let proj = self.proxy_proj.forward(g, store, proxies.feats)?;
        let proxy_lift = g.add(proxy_lift, proj)?;
        let feats = g.concat_rows(&[proxy_lift, dense_lift])?;
        let feats = self.attn.forward(g, store, feats, maps)?;

        let keep: Vec<usize> = (0..self.n_proxy).collect();
        let s0 = self.stages[0].forward(g, store, coords, feats, seed, &keep)?;
        let s1 = self.stages[1].forward(g, store, s0.coords, s0.feats, seed, &keep)?;
        debug_assert!(s1.centers.iter().copied().eq(0..self.n_proxy));
        let delta = self.out.forward(g, store, s1.feats)?;
        g.add(proxies.feats, delta)
    }
}

/// Per-proxy offsets: `u` points around each centre, each within
/// `offset_radius` of it.
#[derive(Debug, Clone)]
pub struct Rebuild {
    pub upsample: usize,
    pub radius: f64,
    mlp: Mlp,
}

impl Rebuild {
    pub fn new(prefix: &str, dim: usize, upsample: usize, radius: f64) -> Result<Self> {
        Ok(Self {
            upsample,
            radius,
            mlp: Mlp::chain(&format!("{prefix}.mlp"), &[dim + 3, dim, upsample * 3], LEAKY, Activation::Identity)?,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.mlp.init_head(store, rng, HEAD_INIT_SCALE)
    }

    /// Dense points `[n_proxy · u, 3]`, grouped by proxy.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: Var, centers: Var) -> Result<Var> {
        let n = g.value(centers).rows();
        let x = g.concat(&[feats, centers])?;
        let raw = self.mlp.forward(g, store, x)?;
        let raw = g.reshape(raw, &[n * self.upsample, 3])?;
        let offsets = g.radial_tanh(raw, self.radius);
        Self::place(g, centers, offsets, self.upsample)
    }

    /// `centers` repeated `u` times plus `offsets`.
    pub fn place(g: &mut Graph, centers: Var, offsets: Var, upsample: usize) -> Result<Var> {
        let rep = repeat_rows(g, centers, upsample)?;
        g.add(rep, offsets)
    }
}

/// Intermediate nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub extracted: Extracted,
    pub latent: Var,
    pub global: Var,
    /// Generator output before correction.
    pub proxies: ProxySet,
    /// Proxy features after correction (equal to `proxies.feats` without it).
    pub corrected_feats: Var,
    pub decoded: Var,
    /// Dense prediction `P`.
    pub dense: Var,
    pub maps: AttnMaps,
}

#[derive(Debug, Clone)]
pub struct CompletionModel {
    pub cfg: ModelConfig,
    pub extractor: Extractor,
    encoder: Vec<EncoderBlock>,
    encoder_norm: LayerNorm,
    pub generator: Generator,
    pub correction: Option<Correction>,
    decoder_pos: Mlp,
    decoder: Vec<DecoderBlock>,
    decoder_norm: LayerNorm,
    pub rebuild: Rebuild,
}

impl CompletionModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim();
        let extractor = Extractor::new("extractor", cfg.schedule.clone(), cfg.k, cfg.m_subset, cfg.weights, cfg.weight_hidden)?;
        let encoder = (0..cfg.encoder_depth)
            .map(|i| EncoderBlock::new(&format!("encoder.block{i}"), d, cfg.heads, cfg.ffn_hidden))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.decoder_depth)
            .map(|i| DecoderBlock::new(&format!("decoder.block{i}"), d, cfg.heads, cfg.ffn_hidden))
            .collect::<Result<_>>()?;
        let correction = cfg
            .correction
            .clone()
            .map(|c| Correction::new("correction", c, d, cfg.n_proxy, cfg.k, cfg.m_subset, cfg.weights, cfg.weight_hidden))
            .transpose()?;
        Ok(Self {
            extractor,
            encoder,
            encoder_norm: LayerNorm::new("encoder.norm", d),
            generator: Generator::new("generator", d, cfg.n_proxy)?,
            correction,
            decoder_pos: Mlp::chain("decoder.pos", &[3, d, d], LEAKY, Activation::Identity)?,
            decoder,
            decoder_norm: LayerNorm::new("decoder.norm", d),
            rebuild: Rebuild::new("rebuild", d, cfg.upsample, cfg.offset_radius)?,
            cfg,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.extractor.init(store, rng)?;
        for b in &self.encoder {
            b.init(store, rng)?;
        }
        self.encoder_norm.init(store);
        self.generator.init(store, rng)?;
        if let Some(c) = &self.correction {
            c.init(store, rng)?;
        }
        self.decoder_pos.init(store, rng)?;
        for b in &self.decoder {
            b.init(store, rng)?;
        }
        self.decoder_norm.init(store);
        self.rebuild.init(store, rng)
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.init(&mut store, rng)?;
        Ok(store)
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var, maps: &mut AttnMaps) -> Result<Var> {
        let h = self.encoder.iter().try_fold(x, |x, b| b.forward(g, store, x, maps))?;
        self.encoder_norm.forward(g, store, h)
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, coords: Var, feats: Var, latent: Var, maps: &mut AttnMaps) -> Result<Var> {
        let pos = self.decoder_pos.forward(g, store, coords)?;
        let x = g.add(feats, pos)?;
        let h = self.decoder.iter().try_fold(x, |x, b| b.forward(g, store, x, latent, maps))?;
        self.decoder_norm.forward(g, store, h)
    }

    /// Dense re-sample of the partial input fed to the correction module.
    pub fn correction_input(&self, partial: &PointCloud, seed: u64) -> Result<Option<PointCloud>> {
        match &self.cfg.correction {
            None => Ok(None),
            Some(c) => {
                if c.dense_points > partial.count() {
                    return invalid_arg(format!(
                        "correction needs {} dense points but the input has {}",
                        c.dense_points,
                        partial.count()
                    ));
                }
                let idx = geom::farthest_point_sample(partial, c.dense_points, seed ^ 0x5eed_c0de)?;
                Ok(Some(partial.select(&idx)?))
            }
        }
    }

    /// Partial cloud → dense prediction.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, partial: &PointCloud, seed: u64) -> Result<Forward> {
        let mut maps = AttnMaps::new();
        let extracted = self.extractor.forward(g, store, partial, seed, &mut maps)?;
        let x = g.add(extracted.feats, extracted.pos_embed)?;
        let latent = self.encode(g, store, x, &mut maps)?;
        let (global, proxies) = self.generator.forward(g, store, latent)?;
        let corrected_feats = match (&self.correction, self.correction_input(partial, seed)?) {
            (Some(c), Some(dense)) => c.forward(g, store, proxies, &dense, seed, &mut maps)?,
            _ => proxies.feats,
        };
        let decoded = self.decode(g, store, proxies.coords, corrected_feats, latent, &mut maps)?;
        let dense = self.rebuild.forward(g, store, decoded, proxies.coords)?;
        Ok(Forward { extracted, latent, global, proxies, corrected_feats, decoded, dense, maps })
    }

    /// Local patches predicted around externally supplied query centres
    /// (the denoising task). Returns `[n_query · u, 3]`, grouped by query.
    pub fn predict_local(&self, g: &mut Graph, store: &ParamStore, fwd: &Forward, centers: &[[f64; 3]]) -> Result<Var> {
        if centers.is_empty() {
            return invalid_arg("no denoising queries");
        }
        let flat: Vec<f64> = centers.iter().flatten().copied().collect();
        let c = g.constant(Tensor::matrix(centers.len(), 3, flat)?);
        let feats = self.generator.features_at(g, store, fwd.global, c)?;
        let mut maps = AttnMaps::new();
        let decoded = self.decode(g, store, c, feats, fwd.latent, &mut maps)?;
        self.rebuild.forward(g, store, decoded, c)
    }

    /// The evaluated output: the dense prediction, followed by the partial
    /// input when `include_input` is set.
    pub fn output_cloud(&self, g: &Graph, fwd: &Forward, partial: &PointCloud) -> Result<PointCloud> {
        let pred = PointCloud::from_flat(g.value(fwd.dense).data())?;
        Ok(if self.cfg.include_input { pred.concat(partial) } else { pred })
    }
}
