//! Parameterised building blocks on top of [`Graph`]: linear layers,
//! MLPs and layer-norm parameters.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{invalid_arg, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Self::Identity => x,
            Self::Relu => g.relu(x),
            Self::LeakyRelu(s) => g.leaky_relu(x, s),
            Self::Sigmoid => g.sigmoid(x),
            Self::Tanh => g.tanh(x),
        }
    }
}

/// Default hidden activation for point-wise MLPs.
pub const LEAKY: Activation = Activation::LeakyRelu(0.2);

/// `x · W + b` with `W: [in, out]` under `{prefix}.weight` and
/// `b: [1, out]` under `{prefix}.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self { prefix: prefix.into(), in_dim, out_dim }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        store.init_weight(self.weight_name(), self.in_dim, self.out_dim, rng)?;
        store.init_const(self.bias_name(), &[1, self.out_dim], 0.0);
        Ok(())
    }

    /// Default initialisation with the weights multiplied by `scale`.
    pub fn init_scaled<R: Rng>(&self, store: &mut ParamStore, rng: &mut R, scale: f64) -> Result<()> {
        self.init(store, rng)?;
        let w = store.get_mut(&self.weight_name()).expect("weight was just initialised");
        w.data_mut().iter_mut().for_each(|v| *v *= scale);
        Ok(())
    }

    /// Zero weight and bias, so the layer outputs zeros.
    pub fn init_zero(&self, store: &mut ParamStore) {
        store.init_const(self.weight_name(), &[self.in_dim, self.out_dim], 0.0);
        store.init_const(self.bias_name(), &[1, self.out_dim], 0.0);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.in_dim {
            return invalid_arg(format!(
                "{}: expected input width {}, got {}",
                self.prefix,
                self.in_dim,
                g.value(x).cols()
            ));
        }
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// A chain of linear layers, each followed by its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    pub fn new(prefix: &str, layers: &[(usize, usize, Activation)]) -> Result<Self> {
        if layers.is_empty() {
            return invalid_arg(format!("{prefix}: MLP needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].1 != w[1].0 {
                return invalid_arg(format!("{prefix}: layer widths {} and {} do not chain", w[0].1, w[1].0));
            }
        }
        if layers.iter().any(|l| l.0 == 0 || l.1 == 0) {
            return invalid_arg(format!("{prefix}: layer widths must be positive"));
        }
        Ok(Self {
            layers: layers
                .iter()
                .enumerate()
                .map(|(i, &(a, b, act))| (Linear::new(format!("{prefix}.{i}"), a, b), act))
                .collect(),
        })
    }

    /// Hidden layers use `hidden`, the last layer uses `last`.
    pub fn chain(prefix: &str, dims: &[usize], hidden: Activation, last: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return invalid_arg(format!("{prefix}: need at least input and output widths"));
        }
        let n = dims.len() - 1;
        let layers: Vec<_> = (0..n)
            .map(|i| (dims[i], dims[i + 1], if i + 1 == n { last } else { hidden }))
            .collect();
        Self::new(prefix, &layers)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].0.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().0.out_dim
    }

    pub fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.layers.iter().map(|(l, _)| l)
    }

    pub fn last_layer(&self) -> &Linear {
        &self.layers.last().unwrap().0
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for (l, _) in &self.layers {
            l.init(store, rng)?;
        }
        Ok(())
    }

    /// Default initialisation except that the last layer's weights are
    /// multiplied by `scale`.
    pub fn init_head<R: Rng>(&self, store: &mut ParamStore, rng: &mut R, scale: f64) -> Result<()> {
        let (last, body) = self.layers.split_last().expect("MLP has at least one layer");
        for (l, _) in body {
            l.init(store, rng)?;
        }
        last.0.init_scaled(store, rng, scale)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        for (l, act) in &self.layers {
            x = l.forward(g, store, x)?;
            x = act.apply(g, x);
        }
        Ok(x)
    }
}

/// Learned gain/bias pair for [`Graph::layer_norm`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub prefix: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        Self { prefix: prefix.into(), dim }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.init_const(format!("{}.gain", self.prefix), &[1, self.dim], 1.0);
        store.init_const(format!("{}.bias", self.prefix), &[1, self.dim], 0.0);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, &format!("{}.gain", self.prefix))?;
        let bias = g.param(store, &format!("{}.bias", self.prefix))?;
        g.layer_norm(x, gain, bias)
    }
}
