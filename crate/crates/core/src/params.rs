//! Named, ordered parameter storage and matching gradient accumulators.
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learnable tensors in registration order. Names are unique and the order
/// is the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Number of scalars among parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Order-sensitive FNV-1a digest over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Replace every value from `(name, tensor)` records, which must match
    /// this store's names and shapes in order.
    pub fn load_records<'a>(&mut self, records: impl IntoIterator<Item = (&'a str, Tensor)>) -> Result<()> {
        let records: Vec<_> = records.into_iter().collect();
        if records.len() != self.len() {
            return Err(Error::contract(alloc::format!(
                "checkpoint has {} parameters, model expects {}",
                records.len(),
                self.len()
            )));
        }
        for (i, (name, t)) in records.iter().enumerate() {
            if *name != self.names[i] {
                return Err(Error::contract(alloc::format!(
                    "parameter {i}: checkpoint name `{name}` but model expects `{}`",
                    self.names[i]
                )));
            }
            if t.shape() != self.values[i].shape() {
                return Err(Error::shape("load_records", self.values[i].shape(), t.shape()));
            }
        }
        for (i, (_, t)) in records.into_iter().enumerate() {
            self.values[i] = t;
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn describe(&self) -> Vec<(String, Vec<usize>)> {
        self.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
    }
}

/// Gradient accumulators aligned with a [`ParamStore`]. Accumulation is
/// additive; callers zero explicitly between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    values: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            values: store.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn zero(&mut self) {
        for t in &mut self.values {
            t.data_mut().fill(0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.values[id.0].data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(Tensor::norm_sq).sum())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.values {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Rescale so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Glorot-uniform `fan_in × fan_out` matrix.
pub fn glorot(rng: &mut Prng, fan_in: usize, fan_out: usize) -> Tensor {
    glorot_scaled(rng, fan_in, fan_out, 1.0)
}

pub fn glorot_scaled(rng: &mut Prng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let limit = gain * libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    Tensor::from_fn(&[fan_in, fan_out], |_| rng::uniform(rng, -limit, limit))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(alloc::vec![1.0, 2.0]));
        let c0 = s.checksum();
        assert_eq!(c0, s.clone().checksum());
        s.get_mut(id).data_mut()[0] = 1.5;
        assert_ne!(c0, s.checksum());
    }

    #[test]
    fn load_rejects_wrong_shape() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2, 2]));
        let err = s.load_records([("w", Tensor::zeros(&[4]))]);
        assert!(err.is_err());
        let err = s.load_records([("v", Tensor::zeros(&[2, 2]))]);
        assert!(err.is_err());
        s.load_records([("w", Tensor::full(&[2, 2], 3.0))]).unwrap();
        assert_eq!(s.values()[0].data(), &[3.0; 4]);
    }

    #[test]
    fn clip_global_norm_caps() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2]));
        let mut g = Grads::zeros_like(&s);
        g.accumulate(ParamId(0), &[3.0, 4.0]);
        let before = g.clip_global_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
    }
}
