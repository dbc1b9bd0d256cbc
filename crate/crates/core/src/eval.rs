//! Success rates, average ranks, attention-cost accounting and embedding
//! projection.
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::rng::{self, Prng};
use crate::tensor::Tensor;
use crate::transformer::{positional_table, EncoderConfig, EncoderStack, HierarchicalEncoder, Readout};

pub fn success_rate(flags: &[bool]) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::contract("success_rate of zero episodes"));
    }
    Ok(flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64)
}

/// Sample mean and standard error of the mean (`s / √n`, `n − 1` in `s`).
/// A single value has standard error zero.
pub fn mean_and_standard_error(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::contract("mean of zero values"));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, libm::sqrt(var / n)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_steps: u64,
    /// Success rate per task name.
    pub success: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: String,
    pub points: Vec<CurvePoint>,
}

impl MethodCurve {
    pub fn validate(&self) -> Result<()> {
        if self.points.windows(2).any(|w| w[0].env_steps >= w[1].env_steps) {
            return Err(Error::contract(format!(
                "{}: env_steps must strictly increase",
                self.method
            )));
        }
        Ok(())
    }
}

/// Ranks of `values` in descending order (1 = largest). Tied values share
/// the mean of the positions they occupy.
pub fn tied_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*b].total_cmp(&values[*a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for o in &order[i..=j] {
            ranks[*o] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Mean rank of each method across tasks at grid index `checkpoint`.
pub fn average_rank<'a>(curves: &'a [MethodCurve], checkpoint: usize) -> Result<Vec<(String, f64)>> {
    let first = curves
        .first()
        .ok_or_else(|| Error::contract("average_rank needs at least one method"))?;
    for c in curves {
        c.validate()?;
        if c.points.len() != first.points.len()
            || c.points
                .iter()
                .zip(&first.points)
                .any(|(a, b)| a.env_steps != b.env_steps)
        {
            return Err(Error::contract(format!(
                "{} does not share the checkpoint grid",
                c.method
            )));
        }
    }
    let point = |c: &'a MethodCurve| -> Result<&'a CurvePoint> {
        c.points
            .get(checkpoint)
            .ok_or_else(|| Error::contract(format!("checkpoint {checkpoint} out of range")))
    };
    let tasks: Vec<&String> = point(first)?.success.keys().collect();
    if tasks.is_empty() {
        return Err(Error::contract("average_rank needs at least one task"));
    }
    for c in curves {
        let keys: Vec<&String> = point(c)?.success.keys().collect();
        if keys != tasks {
            return Err(Error::contract(format!("{} has a different task set", c.method)));
        }
    }
    let mut totals = vec![0.0; curves.len()];
    for task in &tasks {
        let rates: Vec<f64> = curves
            .iter()
            .map(|c| point(c).map(|p| p.success[*task]))
            .collect::<Result<_>>()?;
        for (t, r) in totals.iter_mut().zip(tied_ranks(&rates)) {
            *t += r;
        }
    }
    Ok(curves
        .iter()
        .zip(totals)
        .map(|(c, t)| (c.method.clone(), t / tasks.len() as f64))
        .collect())
}

/// Attention-score entries computed per forward pass, and parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionCost {
    pub k: usize,
    pub s: usize,
    pub heads: usize,
    pub intra_blocks: usize,
    pub inter_blocks: usize,
    /// `L1·K·H·S²`
    pub intra_scores: u64,
    /// `L2·H·K²`
    pub inter_scores: u64,
    pub hierarchical_scores: u64,
    /// One stack of `L1 + L2` blocks over all `K·S` transitions.
    pub flat_scores: u64,
    /// Same, with `L1` blocks.
    pub flat_same_depth_scores: u64,
    /// `flat_scores / hierarchical_scores`
    pub ratio: f64,
    pub ratio_same_depth: f64,
    pub intra_params: usize,
    pub inter_params: usize,
    pub flat_params: usize,
}

/// Parameters of one encoder stack of width `d` with `d_ff = 2d`.
pub fn stack_parameters(d: usize, blocks: usize, input_dim: Option<usize>) -> usize {
    let ff = 2 * d;
    let block = 2 * (2 * d) + (3 * d * d + 3 * d) + (d * d + d) + (d * ff + ff) + (ff * d + d);
    input_dim.map_or(0, |f| f * d + d) + blocks * block + 2 * d
}

/// Closed-form attention cost. Parameter counts assume `d_ff = 2·d_model`
/// and the 10-wide transition features of the point-mass tasks.
pub fn count_attention(
    k: usize,
    s: usize,
    d_model: usize,
    heads: usize,
    l1: usize,
    l2: usize,
) -> Result<AttentionCost> {
    if [k, s, d_model, heads, l1, l2].contains(&0) {
        return Err(Error::contract("count_attention arguments must be positive"));
    }
    let (k64, s64, h, b1, b2) = (k as u64, s as u64, heads as u64, l1 as u64, l2 as u64);
    let intra = b1 * k64 * h * s64 * s64;
    let inter = b2 * h * k64 * k64;
    let ks = k64 * s64;
    let flat = (b1 + b2) * h * ks * ks;
    let flat_same = b1 * h * ks * ks;
    let hier = intra + inter;
    let features = 10;
    Ok(AttentionCost {
        k,
        s,
        heads,
        intra_blocks: l1,
        inter_blocks: l2,
        intra_scores: intra,
        inter_scores: inter,
        hierarchical_scores: hier,
        flat_scores: flat,
        flat_same_depth_scores: flat_same,
        ratio: flat as f64 / hier as f64,
        ratio_same_depth: flat_same as f64 / hier as f64,
        intra_params: stack_parameters(d_model, l1, Some(features)),
        inter_params: stack_parameters(d_model, l2, None),
        flat_params: stack_parameters(d_model, l1 + l2, Some(features)),
    })
}

/// Counted (not derived) attention scores from full forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasuredAttention {
    pub intra: u64,
    pub inter: u64,
    pub flat: u64,
    pub flat_same_depth: u64,
}

/// Run random-weight encoders over random inputs with every query row
/// computed, and read the graph's attention-score counters.
pub fn measure_attention(
    k: usize,
    s: usize,
    d_model: usize,
    heads: usize,
    l1: usize,
    l2: usize,
    rng: &mut Prng,
) -> Result<MeasuredAttention> {
    let features = 10;
    let cfg = |blocks| EncoderConfig {
        d_model,
        heads,
        d_ff: 2 * d_model,
        blocks,
    };
    let mut store = ParamStore::new();
    let enc = HierarchicalEncoder::new(&mut store, rng, features, cfg(l1), cfg(l2))?;
    let x = Tensor::from_fn(&[k * s, features], |_| rng::normal(rng));
    let mut g = Graph::inference();
    let xv = g.input(x.clone())?;
    let z_seq = enc.intra.forward(&mut g, &store, xv, k, s, None, Readout::All)?;
    let last: Vec<usize> = (0..k).map(|i| i * s + s - 1).collect();
    let z_seq = g.gather_rows(z_seq, &last)?;
    let intra = g.attention_scores();
    enc.inter.forward(&mut g, &store, z_seq, 1, k, None, Readout::All)?;
    let inter = g.attention_scores() - intra;

    let mut flat_count = |blocks| -> Result<u64> {
        let mut fs = ParamStore::new();
        let mut stack = EncoderStack::new(&mut fs, rng, "flat", cfg(blocks), Some(features), true)?;
        // Counting needs sequences past the policy's position cap.
        stack.positional = Some(positional_table(k * s, d_model)?);
        let mut g = Graph::inference();
        let xv = g.input(x.clone())?;
        stack.forward(&mut g, &fs, xv, 1, k * s, None, Readout::All)?;
        Ok(g.attention_scores())
    };
    let flat = flat_count(l1 + l2)?;
    let flat_same_depth = flat_count(l1)?;
    Ok(MeasuredAttention {
        intra,
        inter,
        flat,
        flat_same_depth,
    })
}

/// 2-D projection of labelled embeddings and their separation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Silhouette on the full vectors (Euclidean).
    pub silhouette: f64,
    /// Variance captured by each component.
    pub explained: [f64; 2],
    /// Set when the data has no variance to project.
    pub degenerate: bool,
}

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 100_000;

/// Top eigenvector of a symmetric PSD matrix by power iteration.
fn power_iteration(cov: &[f64], d: usize) -> (Vec<f64>, f64) {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * i as f64).collect();
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    v.iter_mut().for_each(|x| *x /= norm);
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let mut w = vec![0.0; d];
        for i in 0..d {
            w[i] = (0..d).map(|j| cov[i * d + j] * v[j]).sum();
        }
        let n = libm::sqrt(w.iter().map(|x| x * x).sum::<f64>());
        if n == 0.0 {
            return (v, 0.0);
        }
        w.iter_mut().for_each(|x| *x /= n);
        let delta = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        lambda = n;
        if delta < POWER_TOL {
            break;
        }
    }
    (v, lambda)
}

/// Centre, project onto the top two principal components, and score the
/// label separation with the silhouette coefficient.
pub fn project_embeddings(rows: &[(String, Vec<f64>)]) -> Result<Projection> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (l, _) in rows {
        *counts.entry(l.as_str()).or_default() += 1;
    }
    if counts.len() < 2 || counts.values().any(|c| *c < 2) {
        return Err(Error::contract(
            "projection needs at least two labels with two rows each",
        ));
    }
    let d = rows[0].1.len();
    if d == 0 || rows.iter().any(|(_, v)| v.len() != d) {
        return Err(Error::contract("embeddings must share a positive width"));
    }
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for (_, v) in rows {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let centred: Vec<Vec<f64>> = rows
        .iter()
        .map(|(_, v)| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for c in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j] / n as f64;
            }
        }
    }
    let total_var: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let labels: Vec<&str> = rows.iter().map(|(l, _)| l.as_str()).collect();
    if total_var <= 1e-24 {
        return Ok(Projection {
            coords: vec![[0.0, 0.0]; n],
            silhouette: 0.0,
            explained: [0.0, 0.0],
            degenerate: true,
        });
    }
    let (v1, l1) = power_iteration(&cov, d);
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (v2, l2) = if d > 1 {
        power_iteration(&cov, d)
    } else {
        (vec![0.0; d], 0.0)
    };
    // Deflation noise can leave a tiny residual direction; drop it.
    let (v2, l2) = if l2 <= 1e-12 * l1 {
        (vec![0.0; d], 0.0)
    } else {
        (v2, l2)
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let coords = centred.iter().map(|c| [dot(c, &v1), dot(c, &v2)]).collect();
    let vectors: Vec<&[f64]> = rows.iter().map(|(_, v)| v.as_slice()).collect();
    Ok(Projection {
        coords,
        silhouette: silhouette(&vectors, &labels)?,
        explained: [l1, l2],
        degenerate: false,
    })
}

/// Mean silhouette coefficient; points alone in their cluster score 0.
pub fn silhouette<L: Ord + Copy>(vectors: &[&[f64]], labels: &[L]) -> Result<f64> {
    if vectors.len() != labels.len() || vectors.is_empty() {
        return Err(Error::contract("silhouette needs one label per vector"));
    }
    let n = vectors.len();
    let dist = |a: &[f64], b: &[f64]| libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
    let mut total = 0.0;
    for i in 0..n {
        let mut per: BTreeMap<L, (f64, usize)> = BTreeMap::new();
        for j in 0..n {
            if i != j {
                let e = per.entry(labels[j]).or_insert((0.0, 0));
                e.0 += dist(vectors[i], vectors[j]);
                e.1 += 1;
            }
        }
        let Some(&(own_sum, own_n)) = per.get(&labels[i]) else {
            continue;
        };
        let a = own_sum / own_n as f64;
        let b = per
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, (s, c))| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}
