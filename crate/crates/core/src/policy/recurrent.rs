//! Gated recurrent cell for the RL²-style baseline.
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{join, Linear};
use crate::params::ParamStore;
use crate::rng::Prng;

/// Standard GRU: `h' = (1 − z)·n + z·h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub input: Linear,
    pub hidden: Linear,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, rng: &mut Prng, name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        Gru {
            input: Linear::new(store, rng, &join(name, "input"), input_dim, 3 * hidden_dim),
            hidden: Linear::new(store, rng, &join(name, "hidden"), hidden_dim, 3 * hidden_dim),
            input_dim,
            hidden_dim,
        }
    }

    /// `x: [B, input_dim]`, `h: [B, hidden_dim]` → `[B, hidden_dim]`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let n = self.hidden_dim;
        let xi = self.input.forward(g, store, x)?;
        let hh = self.hidden.forward(g, store, h)?;
        let (xz, xr, xn) = (
            g.slice_cols(xi, 0, n)?,
            g.slice_cols(xi, n, 2 * n)?,
            g.slice_cols(xi, 2 * n, 3 * n)?,
        );
        let (hz, hr, hn) = (
            g.slice_cols(hh, 0, n)?,
            g.slice_cols(hh, n, 2 * n)?,
            g.slice_cols(hh, 2 * n, 3 * n)?,
        );
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, hn)?;
        let cand = g.add(xn, rh)?;
        let cand = g.tanh(cand)?;
        let diff = g.sub(h, cand)?;
        let gated = g.mul(z, diff)?;
        g.add(cand, gated)
    }
}

/// Per-task recurrent context: hidden state plus the previous action and
/// reward fed into the next step.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentMemory {
    pub hidden: Vec<f64>,
    pub prev_action: Vec<f64>,
    pub prev_reward: f64,
}

impl RecurrentMemory {
    pub fn new(hidden_dim: usize, action_dim: usize) -> Self {
        RecurrentMemory {
            hidden: vec![0.0; hidden_dim],
            prev_action: vec![0.0; action_dim],
            prev_reward: 0.0,
        }
    }

    /// Called at task boundaries only.
    pub fn reset(&mut self) {
        self.hidden.iter_mut().for_each(|v| *v = 0.0);
        self.prev_action.iter_mut().for_each(|v| *v = 0.0);
        self.prev_reward = 0.0;
    }

    /// Record what the environment executed and returned.
    pub fn observe(&mut self, action: &[f64], reward: f64) {
        self.prev_action.clear();
        self.prev_action.extend_from_slice(action);
        self.prev_reward = reward;
    }

    /// Cell input for `state`: `[state ∥ previous action ∥ previous reward]`.
    pub fn input(&self, state: &[f64]) -> Vec<f64> {
        recurrent_input(state, &self.prev_action, self.prev_reward)
    }
}

pub fn recurrent_input(state: &[f64], prev_action: &[f64], prev_reward: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(state.len() + prev_action.len() + 1);
    x.extend_from_slice(state);
    x.extend_from_slice(prev_action);
    x.push(prev_reward);
    x
}
