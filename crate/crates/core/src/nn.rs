//! Small parameterised building blocks shared by the encoders and heads.
use alloc::format;
use alloc::string::String;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{glorot_scaled, ParamId, ParamStore};
use crate::rng::Prng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Prng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_gain(store, rng, name, in_dim, out_dim, 1.0)
    }

    /// Glorot-uniform weights scaled by `gain`, zero bias.
    pub fn with_gain(
        store: &mut ParamStore,
        rng: &mut Prng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot_scaled(rng, in_dim, out_dim, gain));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer perceptron with a tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    /// `out_gain` scales the output layer's initial weights; small values
    /// start the head near zero.
    pub fn new(store: &mut ParamStore, rng: &mut Prng, name: &str, dims: (usize, usize, usize), out_gain: f64) -> Self {
        let (i, h, o) = dims;
        Mlp {
            hidden: Linear::new(store, rng, &join(name, "hidden"), i, h),
            out: Linear::with_gain(store, rng, &join(name, "out"), h, o, out_gain),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.tanh(h)?;
        self.out.forward(g, store, h)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}
