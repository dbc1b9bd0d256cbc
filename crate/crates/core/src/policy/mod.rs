//! Meta-policies sharing one action-selection contract.
//!
//! * [`PolicyKind::Hierarchical`]: windows → T₁ → z_seq, K of them → T₂ →
//!   z_task, then a Gaussian head on `[φ₂(s) ∥ z_task]` (or on `z_task`
//!   alone when `state_concat` is off).
//! * [`PolicyKind::Flat`]: one positional encoder over the `N` most recent
//!   transitions; the head sees only the encoder output.
//! * [`PolicyKind::Recurrent`]: a GRU over `(state, previous action,
//!   previous reward)` whose hidden state persists across the episodes of a
//!   task; the head sees `[hidden ∥ φ₂(s)]`.
mod gaussian;
mod recurrent;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use gaussian::{
    entropy, entropy_graph, log_prob, log_prob_graph, GaussianAction, LN_2PI, LOG_STD_MAX, LOG_STD_MIN,
};
pub use recurrent::{recurrent_input, Gru, RecurrentMemory};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::memory::{EpisodeBuffer, SequenceBatch, Transition};
use crate::nn::{Linear, Mlp};
use crate::params::ParamStore;
use crate::rng::{self, Prng};
use crate::tensor::Tensor;
use crate::transformer::{EncoderConfig, EncoderStack, HierarchicalEncoder, Readout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Hierarchical,
    Flat,
    Recurrent,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Hierarchical => "hierarchical",
            PolicyKind::Flat => "flat",
            PolicyKind::Recurrent => "recurrent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// One window from each of the K most recent episodes.
    RecentEpisodes,
    /// Windows from uniformly random stored episodes (repeats allowed).
    RandomEpisodes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Blocks in T₁.
    pub intra_blocks: usize,
    /// Blocks in T₂.
    pub inter_blocks: usize,
    /// Blocks in the flat baseline's single stack.
    pub flat_blocks: usize,
    /// Transitions seen by the flat baseline, current state included.
    pub flat_window: usize,
    pub head_hidden: usize,
    /// Feed `φ₂(s)` to the head next to the task embedding.
    pub state_concat: bool,
    pub recurrent_hidden: usize,
    /// Offset added to the head's raw log-std output.
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::Hierarchical,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            intra_blocks: 2,
            inter_blocks: 2,
            flat_blocks: 2,
            flat_window: 5,
            head_hidden: 64,
            state_concat: true,
            recurrent_hidden: 64,
            init_log_std: -0.5,
        }
    }
}

impl PolicyConfig {
    pub fn encoder(&self, blocks: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder(1).validate()?;
        if self.head_hidden == 0 || self.recurrent_hidden == 0 || self.flat_window == 0 {
            return Err(Error::contract("policy widths and window must be positive"));
        }
        Ok(())
    }
}

/// How decision-point windows are drawn for window-based policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub k: usize,
    pub s: usize,
    pub sampling: Sampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Mean,
}

/// Distribution parameters and value estimate for `M` decision points.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[M, A]`
    pub mean: Var,
    /// `[M, A]`, clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub log_std: Var,
    /// `[M]`
    pub value: Var,
    /// `[M, d]` task embedding (z_task, or the flat/recurrent equivalent).
    pub embedding: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Heads {
    actor: Mlp,
    critic: Mlp,
}

impl Heads {
    fn new(store: &mut ParamStore, rng: &mut Prng, input: usize, cfg: &PolicyConfig, action_dim: usize) -> Self {
        Heads {
            actor: Mlp::new(store, rng, "actor", (input, cfg.head_hidden, 2 * action_dim), 0.01),
            critic: Mlp::new(store, rng, "critic", (input, cfg.head_hidden, 1), 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Net {
    Hierarchical {
        encoder: HierarchicalEncoder,
        /// `None` for the ablated head that sees only z_task.
        state_embed: Option<Linear>,
        heads: Heads,
    },
    Flat {
        encoder: EncoderStack,
        heads: Heads,
    },
    Recurrent {
        gru: Gru,
        state_embed: Linear,
        heads: Heads,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub params: ParamStore,
    state_dim: usize,
    action_dim: usize,
    net: Net,
}

impl Policy {
    pub fn new(config: PolicyConfig, state_dim: usize, action_dim: usize, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let feature_dim = Transition::feature_dim(state_dim, action_dim);
        let d = config.d_model;
        let net = match config.kind {
            PolicyKind::Hierarchical => {
                let encoder = HierarchicalEncoder::new(
                    &mut store,
                    rng,
                    feature_dim,
                    config.encoder(config.intra_blocks),
                    config.encoder(config.inter_blocks),
                )?;
                let state_embed = config
                    .state_concat
                    .then(|| Linear::new(&mut store, rng, "phi2", state_dim, d));
                let input = if config.state_concat { 2 * d } else { d };
                let heads = Heads::new(&mut store, rng, input, &config, action_dim);
                Net::Hierarchical {
                    encoder,
                    state_embed,
                    heads,
                }
            }
            PolicyKind::Flat => {
                let encoder = EncoderStack::new(
                    &mut store,
                    rng,
                    "flat",
                    config.encoder(config.flat_blocks),
                    Some(feature_dim),
                    true,
                )?;
                let heads = Heads::new(&mut store, rng, d, &config, action_dim);
                Net::Flat { encoder, heads }
            }
            PolicyKind::Recurrent => {
                let h = config.recurrent_hidden;
                let gru = Gru::new(&mut store, rng, "gru", state_dim + action_dim + 1, h);
                let state_embed = Linear::new(&mut store, rng, "phi2", state_dim, d);
                let heads = Heads::new(&mut store, rng, h + d, &config, action_dim);
                Net::Recurrent {
                    gru,
                    state_embed,
                    heads,
                }
            }
        };
        Ok(Policy {
            config,
            params: store,
            state_dim,
            action_dim,
            net,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.config.kind
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn uses_windows(&self) -> bool {
        !matches!(self.net, Net::Recurrent { .. })
    }

    /// Windows consumed per decision and their length, for window policies.
    pub fn window_shape(&self, ctx: &ContextConfig) -> (usize, usize) {
        match self.net {
            Net::Flat { .. } => (1, self.config.flat_window),
            _ => (ctx.k, ctx.s),
        }
    }

    /// Draw the decision-point windows this policy consumes.
    pub fn sample_context(
        &self,
        buffer: &EpisodeBuffer,
        ctx: &ContextConfig,
        rng: &mut Prng,
        state: &[f64],
    ) -> Result<SequenceBatch> {
        match (&self.net, ctx.sampling) {
            (Net::Hierarchical { .. }, Sampling::RecentEpisodes) => buffer.sample_batch(ctx.k, ctx.s, rng, state),
            (Net::Hierarchical { .. }, Sampling::RandomEpisodes) => {
                buffer.sample_batch_random_episodes(ctx.k, ctx.s, rng, state)
            }
            (Net::Flat { .. }, _) => buffer.recent_window(self.config.flat_window, state),
            (Net::Recurrent { .. }, _) => Err(Error::contract("the recurrent policy does not consume windows")),
        }
    }

    /// Encode `n` windows (`[n·S, F]` features) into one row each: z_seq for
    /// the hierarchical policy, the encoder readout for the flat one.
    pub fn encode_windows(
        &self,
        g: &mut Graph,
        features: Tensor,
        n: usize,
        seq_len: usize,
        mask: &[bool],
    ) -> Result<Var> {
        match &self.net {
            Net::Hierarchical { encoder, .. } => encoder.encode_windows(g, &self.params, features, n, seq_len, mask),
            Net::Flat { encoder, .. } => {
                let x = g.input(features)?;
                encoder.forward(g, &self.params, x, n, seq_len, Some(mask), Readout::Last)
            }
            Net::Recurrent { .. } => Err(Error::contract("the recurrent policy does not consume windows")),
        }
    }

    /// Heads for `M` decisions given their per-window rows (`[M·k, d]`,
    /// current window last in each group) and states (`[M, state_dim]`).
    pub fn heads_from_windows(&self, g: &mut Graph, window_rows: Var, k: usize, states: Tensor) -> Result<HeadOutput> {
        let m = states.rows();
        self.check_states(&states)?;
        if g.value(window_rows).rows() != m * k {
            return Err(Error::shape(
                "heads_from_windows",
                g.value(window_rows).shape(),
                &[m * k],
            ));
        }
        match &self.net {
            Net::Hierarchical {
                encoder,
                state_embed,
                heads,
            } => {
                let z_task = encoder.encode_inter_grouped(g, &self.params, window_rows, m, k)?;
                let input = match state_embed {
                    Some(embed) => {
                        let s = g.input(states)?;
                        let phi = embed.forward(g, &self.params, s)?;
                        g.concat_cols(&[phi, z_task])?
                    }
                    None => z_task,
                };
                self.apply_heads(g, heads, input, z_task)
            }
            Net::Flat { heads, .. } => {
                if k != 1 {
                    return Err(Error::contract("the flat policy reads exactly one window per decision"));
                }
                self.apply_heads(g, heads, window_rows, window_rows)
            }
            Net::Recurrent { .. } => Err(Error::contract("the recurrent policy does not consume windows")),
        }
    }

    pub fn recurrent_hidden_dim(&self) -> Option<usize> {
        match &self.net {
            Net::Recurrent { gru, .. } => Some(gru.hidden_dim),
            _ => None,
        }
    }

    /// One GRU step for a batch of rows.
    pub fn gru_step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        match &self.net {
            Net::Recurrent { gru, .. } => gru.step(g, &self.params, x, h),
            _ => Err(Error::contract("only the recurrent policy has a recurrent cell")),
        }
    }

    pub fn heads_from_hidden(&self, g: &mut Graph, hidden: Var, states: Tensor) -> Result<HeadOutput> {
        self.check_states(&states)?;
        match &self.net {
            Net::Recurrent { state_embed, heads, .. } => {
                let s = g.input(states)?;
                let phi = state_embed.forward(g, &self.params, s)?;
                let input = g.concat_cols(&[hidden, phi])?;
                self.apply_heads(g, heads, input, hidden)
            }
            _ => Err(Error::contract("only the recurrent policy has a hidden state")),
        }
    }

    fn check_states(&self, states: &Tensor) -> Result<()> {
        if states.shape().len() != 2 || states.cols() != self.state_dim {
            return Err(Error::shape("policy states", states.shape(), &[self.state_dim]));
        }
        Ok(())
    }

    fn apply_heads(&self, g: &mut Graph, heads: &Heads, input: Var, embedding: Var) -> Result<HeadOutput> {
        let a = self.action_dim;
        let out = heads.actor.forward(g, &self.params, input)?;
        let mean = g.slice_cols(out, 0, a)?;
        let raw = g.slice_cols(out, a, 2 * a)?;
        let shifted = g.offset(raw, self.config.init_log_std)?;
        let log_std = g.clamp(shifted, LOG_STD_MIN, LOG_STD_MAX)?;
        let v = heads.critic.forward(g, &self.params, input)?;
        let m = g.value(v).rows();
        let value = g.reshape(v, &[m])?;
        Ok(HeadOutput {
            mean,
            log_std,
            value,
            embedding,
        })
    }

    /// Turn row `row` of a head output into an action.
    pub fn draw(&self, g: &Graph, head: &HeadOutput, row: usize, mode: ActMode, rng: &mut Prng) -> GaussianAction {
        let mean = g.value(head.mean).row(row).to_vec();
        let log_std = g.value(head.log_std).row(row).to_vec();
        let std: Vec<f64> = log_std.iter().map(|v| libm::exp(*v)).collect();
        let action: Vec<f64> = match mode {
            ActMode::Mean => mean.clone(),
            ActMode::Sample => mean.iter().zip(&std).map(|(m, s)| m + s * rng::normal(rng)).collect(),
        };
        let log_prob = log_prob(&mean, &log_std, &action);
        GaussianAction {
            clamped: action.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            action,
            log_prob,
            mean,
            std,
            value: g.value(head.value).data()[row],
        }
    }

    fn batch_forward(&self, g: &mut Graph, state: &[f64], batch: &SequenceBatch) -> Result<HeadOutput> {
        if state.len() != self.state_dim {
            return Err(Error::shape("act state", &[state.len()], &[self.state_dim]));
        }
        let features = Tensor::new(vec![batch.k * batch.s, batch.feature_dim], batch.features.clone())?;
        let rows = self.encode_windows(g, features, batch.k, batch.s, &batch.mask)?;
        let states = Tensor::new(vec![1, self.state_dim], state.to_vec())?;
        self.heads_from_windows(g, rows, batch.k, states)
    }

    /// Select an action for the decision point described by `batch`, whose
    /// last window ends at `state`.
    pub fn act(&self, state: &[f64], batch: &SequenceBatch, mode: ActMode, rng: &mut Prng) -> Result<GaussianAction> {
        let mut g = Graph::inference();
        let head = self.batch_forward(&mut g, state, batch)?;
        Ok(self.draw(&g, &head, 0, mode, rng))
    }

    /// Recurrent counterpart of [`Policy::act`]; advances `memory`.
    pub fn act_recurrent(
        &self,
        state: &[f64],
        memory: &mut RecurrentMemory,
        mode: ActMode,
        rng: &mut Prng,
    ) -> Result<GaussianAction> {
        let h_dim = self
            .recurrent_hidden_dim()
            .ok_or_else(|| Error::contract("act_recurrent needs the recurrent policy"))?;
        if memory.hidden.len() != h_dim {
            return Err(Error::shape("recurrent hidden", &[memory.hidden.len()], &[h_dim]));
        }
        let mut g = Graph::inference();
        let x = memory.input(state);
        let x = g.input(Tensor::new(vec![1, x.len()], x)?)?;
        let h = g.input(Tensor::new(vec![1, h_dim], memory.hidden.clone())?)?;
        let h = self.gru_step(&mut g, x, h)?;
        let head = self.heads_from_hidden(&mut g, h, Tensor::new(vec![1, self.state_dim], state.to_vec())?)?;
        let out = self.draw(&g, &head, 0, mode, rng);
        memory.hidden = g.value(h).data().to_vec();
        Ok(out)
    }

    /// Recompute log-probs, entropies and values for recorded decisions
    /// under the current weights.
    pub fn evaluate_actions(
        &self,
        states: &[Vec<f64>],
        batches: &[SequenceBatch],
        actions: &[Vec<f64>],
    ) -> Result<Evaluation> {
        if states.len() != batches.len() || states.len() != actions.len() {
            return Err(Error::contract(format!(
                "evaluate_actions: {} states, {} batches, {} actions",
                states.len(),
                batches.len(),
                actions.len()
            )));
        }
        let mut out = Evaluation {
            log_probs: Vec::with_capacity(states.len()),
            entropies: Vec::with_capacity(states.len()),
            values: Vec::with_capacity(states.len()),
        };
        for ((s, b), a) in states.iter().zip(batches).zip(actions) {
            let mut g = Graph::inference();
            let head = self.batch_forward(&mut g, s, b)?;
            let ls = g.value(head.log_std).row(0).to_vec();
            out.log_probs.push(log_prob(g.value(head.mean).row(0), &ls, a));
            out.entropies.push(entropy(&ls));
            out.values.push(g.value(head.value).data()[0]);
        }
        Ok(out)
    }

    /// The task embedding the head is conditioned on (z_task for the
    /// hierarchical policy, the encoder output for the flat baseline).
    pub fn export_task_embedding(&self, state: &[f64], batch: &SequenceBatch) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let head = self.batch_forward(&mut g, state, batch)?;
        Ok(g.value(head.embedding).row(0).to_vec())
    }
}

#[cfg(test)]
mod tests;
