//! Diagonal Gaussian action distribution.
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-std is kept inside this interval.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianAction {
    /// The drawn (or mean) action before clamping to the action box.
    pub action: Vec<f64>,
    /// What the environment executes.
    pub clamped: Vec<f64>,
    /// Density of `action` (pre-clamp) under the distribution.
    pub log_prob: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// State-value estimate from the critic head.
    pub value: f64,
}

pub fn log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) * libm::exp(-ls);
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

pub fn entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| 0.5 * (LN_2PI + 1.0) + ls).sum()
}

/// Per-row log-density of `actions` (`[M, A]`) under `N(mean, exp(log_std))`.
pub fn log_prob_graph(g: &mut Graph, mean: Var, log_std: Var, actions: Tensor) -> Result<Var> {
    let a = g.input(actions)?;
    let diff = g.sub(a, mean)?;
    let neg = g.scale(log_std, -1.0)?;
    let inv_std = g.exp(neg)?;
    let z = g.mul(diff, inv_std)?;
    let z2 = g.square(z)?;
    let quad = g.scale(z2, -0.5)?;
    let per_dim = g.sub(quad, log_std)?;
    let per_dim = g.offset(per_dim, -0.5 * LN_2PI)?;
    g.sum_cols(per_dim)
}

/// Per-row entropy of the diagonal Gaussian.
pub fn entropy_graph(g: &mut Graph, log_std: Var) -> Result<Var> {
    let per_dim = g.offset(log_std, 0.5 * (LN_2PI + 1.0))?;
    g.sum_cols(per_dim)
}
