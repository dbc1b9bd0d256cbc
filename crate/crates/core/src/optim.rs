//! Adaptive-moment (Adam) optimizer with bias correction.
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimState {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Apply one bias-corrected Adam update to every parameter in `params`.
///
/// Fails without touching `params` when shapes disagree or a gradient is
/// not finite, and fails after the update if any parameter became
/// non-finite (the caller is expected to abort the run).
pub fn adam_step(params: &mut ParamStore, grads: &Grads, state: &mut OptimState) -> Result<()> {
    if grads.values().len() != params.len() || state.first.len() != params.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.values().len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.values().iter().zip(grads.values()).enumerate() {
        if p.shape() != g.shape() || state.first[i].shape() != p.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: "adam_step gradient".to_string(),
                detail: format!("parameter #{i} `{}`", params.names().nth(i).unwrap_or("?")),
            });
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as f64;
    let bc1 = 1.0 - libm::pow(beta1, t);
    let bc2 = 1.0 - libm::pow(beta2, t);
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        let g = grads.values()[i].data();
        let m = state.first[i].data_mut();
        for (mv, gv) in m.iter_mut().zip(g) {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
        }
        let v = state.second[i].data_mut();
        for (vv, gv) in v.iter_mut().zip(g) {
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
        }
        let (m, v) = (state.first[i].data(), state.second[i].data());
        for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mv / bc1;
            let v_hat = vv / bc2;
            *pv -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    if let Some((i, _)) = params.values().iter().enumerate().find(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite {
            context: "adam_step parameters".to_string(),
            detail: format!(
                "parameter `{}` non-finite after step {}",
                params.names().nth(i).unwrap_or("?"),
                state.step
            ),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;

    fn setup(values: &[f64]) -> (ParamStore, Grads, OptimState) {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(values.to_vec()));
        let g = Grads::zeros_like(&s);
        let st = OptimState::new(&s, AdamConfig::default());
        (s, g, st)
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, g, mut st) = setup(&[1.0, -2.0]);
        adam_step(&mut s, &g, &mut st).unwrap();
        assert_eq!(s.values()[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        let (mut s, mut g, mut st) = setup(&[0.0, 0.0, 0.0]);
        g.accumulate(ParamId(0), &[3.0, -0.5, 1e-2]);
        adam_step(&mut s, &g, &mut st).unwrap();
        let lr = st.config.lr;
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps).
        for (p, gv) in s.values()[0].data().iter().zip([3.0f64, -0.5, 1e-2]) {
            let want = -lr * gv / (gv.abs() + 1e-8);
            assert!((p - want).abs() < 1e-15, "{p} vs {want}");
            assert!((p.abs() - lr).abs() < lr * 1e-5);
        }
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let (mut s, mut g, mut st) = setup(&[0.5]);
        g.accumulate(ParamId(0), &[2.0]);
        let mut prev = 0.5;
        for _ in 0..2 {
            adam_step(&mut s, &g, &mut st).unwrap();
            let now = s.values()[0].data()[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut s, _, mut st) = setup(&[0.0, 0.0]);
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[3]));
        let g = Grads::zeros_like(&other);
        assert!(matches!(adam_step(&mut s, &g, &mut st), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut s, mut g, mut st) = setup(&[0.0]);
        g.accumulate(ParamId(0), &[f64::NAN]);
        assert!(matches!(adam_step(&mut s, &g, &mut st), Err(Error::NonFinite { .. })));
        assert_eq!(s.values()[0].data(), &[0.0]);
    }
}
