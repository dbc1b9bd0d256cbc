//! Pre-norm transformer encoder stacks and the two-level encoder.
//!
//! The intra-episode stack (T₁) embeds each transition linearly, adds a
//! sinusoidal positional code and reads out the last valid slot of each
//! window. The inter-episode stack (T₂) consumes those per-window features
//! without positional information and reads out the final (current-episode)
//! row, so it is invariant to the order of the other rows.
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttentionShape, Graph, Var};
use crate::memory::SequenceBatch;
use crate::nn::{join, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::rng::Prng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            heads: 4,
            d_ff: 128,
            blocks: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::contract("d_model must be even for the sinusoidal table"));
        }
        if self.d_ff == 0 {
            return Err(Error::contract("d_ff must be positive"));
        }
        Ok(())
    }
}

/// Fixed sinusoidal table, `len × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    table: Tensor,
}

impl PositionalEncoding {
    pub fn len(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        self.table.row(pos)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(…)`.
pub fn positional_table(len: usize, d_model: usize) -> Result<PositionalEncoding> {
    if len == 0 {
        return Err(Error::contract("positional table needs at least one row"));
    }
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::contract(format!(
            "positional table needs an even width, got {d_model}"
        )));
    }
    let mut data = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let freq = libm::pow(10000.0, (2 * i) as f64 / d_model as f64);
            let angle = pos as f64 / freq;
            data[pos * d_model + 2 * i] = libm::sin(angle);
            data[pos * d_model + 2 * i + 1] = libm::cos(angle);
        }
    }
    Ok(PositionalEncoding {
        table: Tensor::new(vec![len, d_model], data)?,
    })
}

/// Which positions a stack returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    /// Every position, `[groups·seq_len, d_model]`.
    All,
    /// The last valid position of each group, `[groups, d_model]`. The final
    /// block only computes queries for those rows.
    Last,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub heads: usize,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut Prng, name: &str, cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        EncoderBlock {
            norm_attn: LayerNorm::new(store, &join(name, "norm_attn"), d),
            query: Linear::new(store, rng, &join(name, "query"), d, d),
            key: Linear::new(store, rng, &join(name, "key"), d, d),
            value: Linear::new(store, rng, &join(name, "value"), d, d),
            out: Linear::new(store, rng, &join(name, "attn_out"), d, d),
            norm_ff: LayerNorm::new(store, &join(name, "norm_ff"), d),
            ff_in: Linear::new(store, rng, &join(name, "ff_in"), d, cfg.d_ff),
            ff_out: Linear::new(store, rng, &join(name, "ff_out"), cfg.d_ff, d),
            heads: cfg.heads,
        }
    }

    /// `x` is `[groups·seq_len, d]`. With `last_rows`, only those rows are
    /// used as queries and the result is `[groups, d]`.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        groups: usize,
        seq_len: usize,
        mask: Option<&[bool]>,
        last_rows: Option<&[usize]>,
    ) -> Result<Var> {
        let normed = self.norm_attn.forward(g, store, x)?;
        let (q_src, resid, q_len) = match last_rows {
            Some(rows) => (g.gather_rows(normed, rows)?, g.gather_rows(x, rows)?, 1),
            None => (normed, x, seq_len),
        };
        let q = self.query.forward(g, store, q_src)?;
        let k = self.key.forward(g, store, normed)?;
        let v = self.value.forward(g, store, normed)?;
        let shape = AttentionShape {
            groups,
            q_len,
            k_len: seq_len,
            heads: self.heads,
        };
        let attn = g.attention(q, k, v, shape, mask)?;
        let attn = self.out.forward(g, store, attn)?;
        let h = g.add(resid, attn)?;
        let normed = self.norm_ff.forward(g, store, h)?;
        let ff = self.ff_in.forward(g, store, normed)?;
        let ff = g.gelu(ff)?;
        let ff = self.ff_out.forward(g, store, ff)?;
        g.add(h, ff)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub config: EncoderConfig,
    /// Linear input map; `None` means the input is already `d_model` wide.
    pub input_embed: Option<Linear>,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
    pub positional: Option<PositionalEncoding>,
}

/// Longest sequence a positional stack accepts.
pub const MAX_POSITIONS: usize = 512;

impl EncoderStack {
    /// `input_dim = None` builds a stack without an input map.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Prng,
        name: &str,
        cfg: EncoderConfig,
        input_dim: Option<usize>,
        use_positional_encoding: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let input_embed = input_dim.map(|n| Linear::new(store, rng, &join(name, "embed"), n, cfg.d_model));
        let blocks = (0..cfg.blocks)
            .map(|i| EncoderBlock::new(store, rng, &format!("{name}.block{i}"), &cfg))
            .collect();
        let final_norm = LayerNorm::new(store, &join(name, "final_norm"), cfg.d_model);
        let positional = if use_positional_encoding {
            Some(positional_table(MAX_POSITIONS, cfg.d_model)?)
        } else {
            None
        };
        Ok(EncoderStack {
            config: cfg,
            input_embed,
            blocks,
            final_norm,
            positional,
        })
    }

    pub fn uses_positional_encoding(&self) -> bool {
        self.positional.is_some()
    }

    /// Run the stack over `groups` sequences of `seq_len` rows each.
    ///
    /// With a mask, masked rows are never attended to and positional codes
    /// count only valid rows, so left padding does not shift positions.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        groups: usize,
        seq_len: usize,
        mask: Option<&[bool]>,
        readout: Readout,
    ) -> Result<Var> {
        if groups == 0 || seq_len == 0 {
            return Err(Error::contract("encoder needs at least one group and one position"));
        }
        let rows = g.value(x).rows();
        if rows != groups * seq_len {
            return Err(Error::shape("encoder input rows", &[rows], &[groups * seq_len]));
        }
        if let Some(m) = mask {
            if m.len() != rows {
                return Err(Error::shape("encoder mask", &[m.len()], &[rows]));
            }
        }
        let mut h = match &self.input_embed {
            Some(embed) => embed.forward(g, store, x)?,
            None => x,
        };
        let d = self.config.d_model;
        if g.value(h).cols() != d {
            return Err(Error::shape("encoder width", g.value(h).shape(), &[d]));
        }
        if let Some(pe) = &self.positional {
            if seq_len > pe.len() {
                return Err(Error::contract(format!(
                    "sequence length {seq_len} exceeds {}",
                    pe.len()
                )));
            }
            let mut codes = vec![0.0; rows * d];
            for grp in 0..groups {
                let mut pos = 0;
                for i in 0..seq_len {
                    let r = grp * seq_len + i;
                    if mask.is_none_or(|m| m[r]) {
                        codes[r * d..(r + 1) * d].copy_from_slice(pe.row(pos));
                        pos += 1;
                    }
                }
            }
            let codes = g.input(Tensor::new(vec![rows, d], codes)?)?;
            h = g.add(h, codes)?;
        }
        let last_rows: Option<Vec<usize>> = match readout {
            Readout::All => None,
            Readout::Last => Some(last_valid_rows(groups, seq_len, mask)?),
        };
        let n = self.blocks.len();
        for (i, block) in self.blocks.iter().enumerate() {
            let last = if i + 1 == n { last_rows.as_deref() } else { None };
            h = block.forward(g, store, h, groups, seq_len, mask, last)?;
        }
        if n == 0 {
            if let Some(rows) = &last_rows {
                h = g.gather_rows(h, rows)?;
            }
        }
        self.final_norm.forward(g, store, h)
    }
}

/// Row index of the last valid position of each group.
pub fn last_valid_rows(groups: usize, seq_len: usize, mask: Option<&[bool]>) -> Result<Vec<usize>> {
    (0..groups)
        .map(|grp| {
            let base = grp * seq_len;
            match mask {
                None => Ok(base + seq_len - 1),
                Some(m) => m[base..base + seq_len]
                    .iter()
                    .rposition(|&v| v)
                    .map(|i| base + i)
                    .ok_or_else(|| Error::contract(format!("sequence {grp} is fully masked"))),
            }
        })
        .collect()
}

/// The two-level encoder: T₁ over each window, T₂ across windows.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalEncoder {
    pub intra: EncoderStack,
    pub inter: EncoderStack,
}

impl HierarchicalEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Prng,
        feature_dim: usize,
        intra: EncoderConfig,
        inter: EncoderConfig,
    ) -> Result<Self> {
        if intra.d_model != inter.d_model {
            return Err(Error::contract("intra and inter stacks must share d_model"));
        }
        Ok(HierarchicalEncoder {
            intra: EncoderStack::new(store, rng, "t1", intra, Some(feature_dim), true)?,
            inter: EncoderStack::new(store, rng, "t2", inter, None, false)?,
        })
    }

    pub fn d_model(&self) -> usize {
        self.intra.config.d_model
    }

    /// Encode `windows` flattened windows of `seq_len` slots each into one
    /// feature row per window, `[windows, d_model]`.
    pub fn encode_windows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Tensor,
        windows: usize,
        seq_len: usize,
        mask: &[bool],
    ) -> Result<Var> {
        let x = g.input(features)?;
        self.intra
            .forward(g, store, x, windows, seq_len, Some(mask), Readout::Last)
    }

    /// z_seq for each of the batch's `K` windows, `[K, d_model]`.
    pub fn encode_intra(&self, g: &mut Graph, store: &ParamStore, batch: &SequenceBatch) -> Result<Var> {
        if batch.k == 0 || batch.s == 0 {
            return Err(Error::contract("encode_intra needs K >= 1 and S >= 1"));
        }
        let features = Tensor::new(vec![batch.k * batch.s, batch.feature_dim], batch.features.clone())?;
        self.encode_windows(g, store, features, batch.k, batch.s, &batch.mask)
    }

    /// z_task for `groups` stacks of `k` window features, `[groups, d_model]`.
    /// Row `k−1` of each group is the current-episode window.
    pub fn encode_inter_grouped(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_seq: Var,
        groups: usize,
        k: usize,
    ) -> Result<Var> {
        if k == 0 {
            return Err(Error::contract("encode_inter needs K >= 1"));
        }
        self.inter.forward(g, store, z_seq, groups, k, None, Readout::Last)
    }

    /// z_task for a single `[K, d_model]` stack, `[1, d_model]`.
    pub fn encode_inter(&self, g: &mut Graph, store: &ParamStore, z_seq: Var) -> Result<Var> {
        let k = g.value(z_seq).rows();
        self.encode_inter_grouped(g, store, z_seq, 1, k)
    }
}
