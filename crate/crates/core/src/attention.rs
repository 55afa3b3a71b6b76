//! Multi-head scaled dot-product attention and the pre-norm residual
//! blocks built from it.

use rand::Rng;

use crate::autodiff::nn::{Activation, LayerNorm, Linear, Mlp, LEAKY};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{invalid_arg, Result};

/// Collects every attention probability matrix produced during a forward
/// pass, one `[n_query, n_key]` node per head.
pub type AttnMaps = Vec<Var>;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
            return invalid_arg(format!("{prefix}: width {dim} is not divisible by {heads} heads"));
        }
        Ok(Self {
            dim,
            heads,
            q: Linear::new(format!("{prefix}.q"), dim, dim),
            k: Linear::new(format!("{prefix}.k"), dim, dim),
            v: Linear::new(format!("{prefix}.v"), dim, dim),
            out: Linear::new(format!("{prefix}.out"), dim, dim),
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(store, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, context: Var, maps: &mut AttnMaps) -> Result<Var> {
        let q = self.q.forward(g, store, queries)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, scale);
            let probs = g.softmax(logits)?;
            maps.push(probs);
            heads.push(g.matmul(probs, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat(&heads)? };
        self.out.forward(g, store, joined)
    }
}

/// `x + Attn(LN(x), LN(x))`.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

impl SelfAttentionBlock {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(format!("{prefix}.norm"), dim),
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), dim, heads)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.dim
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.norm.init(store);
        self.attn.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, maps: &mut AttnMaps) -> Result<Var> {
        if g.value(x).cols() != self.attn.dim {
            return invalid_arg(format!("attention block expects width {}, got {}", self.attn.dim, g.value(x).cols()));
        }
        let h = self.norm.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, maps)?;
        g.add(x, a)
    }
}

/// `x + FFN(LN(x))` with a two-layer point-wise MLP.
#[derive(Debug, Clone)]
pub struct FeedForward {
    norm: LayerNorm,
    mlp: Mlp,
}

impl FeedForward {
    pub fn new(prefix: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(format!("{prefix}.norm"), dim),
            mlp: Mlp::chain(&format!("{prefix}.mlp"), &[dim, hidden, dim], LEAKY, Activation::Identity)?,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.norm.init(store);
        self.mlp.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let y = self.mlp.forward(g, store, h)?;
        g.add(x, y)
    }
}

/// Transformer encoder layer: self-attention then feed-forward.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    attn: SelfAttentionBlock,
    ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(prefix: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            attn: SelfAttentionBlock::new(&format!("{prefix}.self"), dim, heads)?,
            ffn: FeedForward::new(&format!("{prefix}.ffn"), dim, hidden)?,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.attn.init(store, rng)?;
        self.ffn.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, maps: &mut AttnMaps) -> Result<Var> {
        let x = self.attn.forward(g, store, x, maps)?;
        self.ffn.forward(g, store, x)
    }
}

/// Transformer decoder layer: self-attention over queries, cross-attention
/// from queries to `memory`, then feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    self_attn: SelfAttentionBlock,
    cross_norm: LayerNorm,
    memory_norm: LayerNorm,
    cross: MultiHeadAttention,
    ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new(prefix: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            self_attn: SelfAttentionBlock::new(&format!("{prefix}.self"), dim, heads)?,
            cross_norm: LayerNorm::new(format!("{prefix}.cross.norm"), dim),
            memory_norm: LayerNorm::new(format!("{prefix}.cross.memory_norm"), dim),
            cross: MultiHeadAttention::new(&format!("{prefix}.cross.attn"), dim, heads)?,
            ffn: FeedForward::new(&format!("{prefix}.ffn"), dim, hidden)?,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.self_attn.init(store, rng)?;
        self.cross_norm.init(store);
        self.memory_norm.init(store);
        self.cross.init(store, rng)?;
        self.ffn.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, memory: Var, maps: &mut AttnMaps) -> Result<Var> {
        if g.value(memory).cols() != self.cross.dim {
            return invalid_arg("decoder memory width does not match query width");
        }
        let x = self.self_attn.forward(g, store, x, maps)?;
        let q = self.cross_norm.forward(g, store, x)?;
        let m = self.memory_norm.forward(g, store, memory)?;
        let c = self.cross.forward(g, store, q, m, maps)?;
        let x = g.add(x, c)?;
        self.ffn.forward(g, store, x)
    }
}
