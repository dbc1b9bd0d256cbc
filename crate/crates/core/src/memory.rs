//! Episode storage and the window sampler feeding the hierarchical encoder.
//!
//! The buffer keeps the `K` most recent episodes of one task instance. At a
//! decision point, [`EpisodeBuffer::sample_batch`] draws one contiguous
//! window of `S` slots from each stored episode, with the current episode's
//! window placed last and ending at the agent's current state.
use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Prng};

/// One environment step `(s, a, r, d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl Transition {
    /// The decision-point slot: current state, zero action, zero reward,
    /// not done.
    pub fn placeholder(state: &[f64], action_dim: usize) -> Self {
        Transition {
            state: state.to_vec(),
            action: vec![0.0; action_dim],
            reward: 0.0,
            done: false,
        }
    }

    /// Width of the flattened `[state ∥ action ∥ reward ∥ done]` layout.
    pub fn feature_dim(state_dim: usize, action_dim: usize) -> usize {
        state_dim + action_dim + 2
    }

    pub fn write_features(&self, out: &mut [f64]) {
        let (s, a) = (self.state.len(), self.action.len());
        out[..s].copy_from_slice(&self.state);
        out[s..s + a].copy_from_slice(&self.action);
        out[s + a] = self.reward;
        out[s + a + 1] = if self.done { 1.0 } else { 0.0 };
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub transitions: Vec<Transition>,
    pub sealed: bool,
}

/// Where a sampled window came from: transitions `start..end` of episode
/// `episode`, plus the current-state slot when `current` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOrigin {
    pub episode: u64,
    pub start: usize,
    pub end: usize,
    pub current: bool,
}

/// `K` windows of exactly `S` slots each, left-padded with masked zero
/// transitions. Features are row-major `[K·S, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub k: usize,
    pub s: usize,
    pub feature_dim: usize,
    pub features: Vec<f64>,
    pub mask: Vec<bool>,
    pub origins: Vec<WindowOrigin>,
}

impl SequenceBatch {
    fn with_capacity(k: usize, s: usize, feature_dim: usize) -> Self {
        SequenceBatch {
            k,
            s,
            feature_dim,
            features: Vec::with_capacity(k * s * feature_dim),
            mask: Vec::with_capacity(k * s),
            origins: Vec::with_capacity(k),
        }
    }

    fn push_window(&mut self, slots: &[&Transition], origin: WindowOrigin) {
        debug_assert!(slots.len() <= self.s && !slots.is_empty());
        let pad = self.s - slots.len();
        self.features.extend(core::iter::repeat_n(0.0, pad * self.feature_dim));
        self.mask.extend(core::iter::repeat_n(false, pad));
        for t in slots {
            let at = self.features.len();
            self.features.resize(at + self.feature_dim, 0.0);
            t.write_features(&mut self.features[at..]);
            self.mask.push(true);
        }
        self.origins.push(origin);
    }

    /// Flattened features of window `i` (`S·F` values).
    pub fn window(&self, i: usize) -> &[f64] {
        let w = self.s * self.feature_dim;
        &self.features[i * w..(i + 1) * w]
    }

    pub fn window_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.s..(i + 1) * self.s]
    }

    /// State stored in the final slot of the last window.
    pub fn current_state(&self, state_dim: usize) -> &[f64] {
        let at = (self.k * self.s - 1) * self.feature_dim;
        &self.features[at..at + state_dim]
    }
}

/// Content-addressed store of windows. Identical windows (same features
/// and mask bits) share one slot, so encoder work over many decision points
/// is done once per distinct window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowPool {
    s: usize,
    feature_dim: usize,
    features: Vec<f64>,
    mask: Vec<bool>,
    index: BTreeMap<Vec<u64>, usize>,
}

impl WindowPool {
    pub fn new(s: usize, feature_dim: usize) -> Self {
        WindowPool {
            s,
            feature_dim,
            ..Self::default()
        }
    }

    pub fn seq_len(&self) -> usize {
        self.s
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.mask.len() / self.s.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Slot of the window, inserting it if unseen.
    pub fn insert(&mut self, features: &[f64], mask: &[bool]) -> Result<usize> {
        if features.len() != self.s * self.feature_dim || mask.len() != self.s {
            return Err(Error::shape(
                "WindowPool::insert",
                &[features.len(), mask.len()],
                &[self.s * self.feature_dim, self.s],
            ));
        }
        let mut key: Vec<u64> = features.iter().map(|v| v.to_bits()).collect();
        key.extend(mask.iter().map(|&m| u64::from(m)));
        if let Some(&i) = self.index.get(&key) {
            return Ok(i);
        }
        let i = self.len();
        self.features.extend_from_slice(features);
        self.mask.extend_from_slice(mask);
        self.index.insert(key, i);
        Ok(i)
    }

    /// Insert every window of `batch`, returning their slots in order.
    pub fn insert_batch(&mut self, batch: &SequenceBatch) -> Result<Vec<usize>> {
        (0..batch.k)
            .map(|i| self.insert(batch.window(i), batch.window_mask(i)))
            .collect()
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let w = self.s * self.feature_dim;
        &self.features[i * w..(i + 1) * w]
    }

    pub fn window_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.s..(i + 1) * self.s]
    }

    /// Stack the given slots into `([n·S, F] features, [n·S] mask)`.
    pub fn gather(&self, slots: &[usize]) -> (Vec<f64>, Vec<bool>) {
        let mut f = Vec::with_capacity(slots.len() * self.s * self.feature_dim);
        let mut m = Vec::with_capacity(slots.len() * self.s);
        for &i in slots {
            f.extend_from_slice(self.window(i));
            m.extend_from_slice(self.window_mask(i));
        }
        (f, m)
    }
}

/// Ring of the most recent episodes of one task instance, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBuffer {
    capacity: usize,
    action_dim: usize,
    episodes: VecDeque<Episode>,
    next_id: u64,
}

impl EpisodeBuffer {
    pub fn new(capacity: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::contract("episode buffer capacity must be >= 1"));
        }
        Ok(EpisodeBuffer {
            capacity,
            action_dim,
            episodes: VecDeque::with_capacity(capacity + 1),
            next_id: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn total_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.transitions.len()).sum()
    }

    /// Drop everything; used when a new task instance begins.
    pub fn clear(&mut self) {
        self.episodes.clear();
    }

    /// The open episode, if a transition has been pushed since the last seal.
    pub fn active(&self) -> Option<&Episode> {
        self.episodes.back().filter(|e| !e.sealed)
    }

    /// Id the current decision point belongs to (the open episode, or the
    /// one the next push will open).
    pub fn current_episode_id(&self) -> u64 {
        self.active().map_or(self.next_id, |e| e.id)
    }

    /// Append to the open episode, opening one if needed. `done` seals it;
    /// the oldest episodes are evicted beyond capacity.
    pub fn push(&mut self, t: Transition) {
        if self.active().is_none() {
            self.episodes.push_back(Episode {
                id: self.next_id,
                transitions: Vec::new(),
                sealed: false,
            });
            self.next_id += 1;
        }
        let done = t.done;
        let ep = self.episodes.back_mut().expect("an episode was just ensured");
        ep.transitions.push(t);
        if done {
            ep.sealed = true;
        }
        while self.episodes.len() > self.capacity {
            self.episodes.pop_front();
        }
    }

    /// Force-seal the open episode (e.g. when a rollout is cut short).
    pub fn seal(&mut self) {
        if let Some(ep) = self.episodes.back_mut() {
            ep.sealed = true;
        }
    }

    /// `(episode id, step index, transition)` for every stored transition.
    pub fn records(&self) -> impl Iterator<Item = (u64, usize, &Transition)> {
        self.episodes
            .iter()
            .flat_map(|e| e.transitions.iter().enumerate().map(move |(i, t)| (e.id, i, t)))
    }

    fn check_shape(&self, k: usize, s: usize, current_state: &[f64]) -> Result<usize> {
        if k < 1 || s < 1 {
            return Err(Error::contract(format!(
                "window batch needs K >= 1 and S >= 1, got K={k}, S={s}"
            )));
        }
        if let Some(t) = self.episodes.iter().flat_map(|e| e.transitions.first()).next() {
            if t.state.len() != current_state.len() {
                return Err(Error::shape(
                    "sample_batch state",
                    &[t.state.len()],
                    &[current_state.len()],
                ));
            }
        }
        Ok(Transition::feature_dim(current_state.len(), self.action_dim))
    }

    fn current_window<'a>(&'a self, s: usize, placeholder: &'a Transition) -> (Vec<&'a Transition>, WindowOrigin) {
        let id = self.current_episode_id();
        let ts: &[Transition] = self.active().map_or(&[], |e| &e.transitions);
        let start = ts.len().saturating_sub(s - 1);
        let mut slots: Vec<&Transition> = ts[start..].iter().collect();
        slots.push(placeholder);
        let origin = WindowOrigin {
            episode: id,
            start,
            end: ts.len(),
            current: true,
        };
        (slots, origin)
    }

    /// Sources for past windows: sealed episodes, then the open episode if
    /// it already holds transitions.
    fn pool(&self) -> Vec<&Episode> {
        self.episodes
            .iter()
            .filter(|e| e.sealed || !e.transitions.is_empty())
            .collect()
    }

    fn random_window<'a>(ep: &'a Episode, s: usize, rng: &mut Prng) -> (Vec<&'a Transition>, WindowOrigin) {
        let n = ep.transitions.len();
        let start = if n > s { rng::index(rng, n - s + 1) } else { 0 };
        let end = (start + s).min(n);
        let slots = ep.transitions[start..end].iter().collect();
        let origin = WindowOrigin {
            episode: ep.id,
            start,
            end,
            current: false,
        };
        (slots, origin)
    }

    /// One window per episode from the `K−1` most recent sealed episodes,
    /// plus the current window last. With fewer stored episodes, every
    /// available episode contributes once and the remaining slots are drawn
    /// with replacement from them (or repeat the current window when
    /// nothing is stored yet).
    pub fn sample_batch(&self, k: usize, s: usize, rng: &mut Prng, current_state: &[f64]) -> Result<SequenceBatch> {
        let f = self.check_shape(k, s, current_state)?;
        let placeholder = Transition::placeholder(current_state, self.action_dim);
        let (cur_slots, cur_origin) = self.current_window(s, &placeholder);
        let mut batch = SequenceBatch::with_capacity(k, s, f);
        let need = k - 1;
        let sealed: Vec<&Episode> = self.episodes.iter().filter(|e| e.sealed).collect();
        if sealed.len() >= need {
            for ep in &sealed[sealed.len() - need..] {
                let (slots, origin) = Self::random_window(ep, s, rng);
                batch.push_window(&slots, origin);
            }
        } else {
            let pool = self.pool();
            for ep in &pool {
                if batch.origins.len() == need {
                    break;
                }
                let (slots, origin) = Self::random_window(ep, s, rng);
                batch.push_window(&slots, origin);
            }
            while batch.origins.len() < need {
                if pool.is_empty() {
                    batch.push_window(&cur_slots, cur_origin);
                } else {
                    let ep = pool[rng::index(rng, pool.len())];
                    let (slots, origin) = Self::random_window(ep, s, rng);
                    batch.push_window(&slots, origin);
                }
            }
        }
        batch.push_window(&cur_slots, cur_origin);
        Ok(batch)
    }

    /// Ablation variant: the `K−1` past windows come from uniformly random
    /// stored episodes, repeats allowed even when enough episodes exist.
    pub fn sample_batch_random_episodes(
        &self,
        k: usize,
        s: usize,
        rng: &mut Prng,
        current_state: &[f64],
    ) -> Result<SequenceBatch> {
        let f = self.check_shape(k, s, current_state)?;
        let placeholder = Transition::placeholder(current_state, self.action_dim);
        let (cur_slots, cur_origin) = self.current_window(s, &placeholder);
        let mut batch = SequenceBatch::with_capacity(k, s, f);
        let pool = self.pool();
        for _ in 0..k - 1 {
            if pool.is_empty() {
                batch.push_window(&cur_slots, cur_origin);
            } else {
                let ep = pool[rng::index(rng, pool.len())];
                let (slots, origin) = Self::random_window(ep, s, rng);
                batch.push_window(&slots, origin);
            }
        }
        batch.push_window(&cur_slots, cur_origin);
        Ok(batch)
    }

    /// A single window holding the `s − 1` most recent transitions of the
    /// task (crossing episode boundaries) followed by the current state.
    pub fn recent_window(&self, s: usize, current_state: &[f64]) -> Result<SequenceBatch> {
        let f = self.check_shape(1, s, current_state)?;
        let placeholder = Transition::placeholder(current_state, self.action_dim);
        let mut slots: Vec<&Transition> = self
            .episodes
            .iter()
            .rev()
            .flat_map(|e| e.transitions.iter().rev())
            .take(s - 1)
            .collect();
        slots.reverse();
        slots.push(&placeholder);
        let mut batch = SequenceBatch::with_capacity(1, s, f);
        let origin = WindowOrigin {
            episode: self.current_episode_id(),
            start: 0,
            end: slots.len() - 1,
            current: true,
        };
        batch.push_window(&slots, origin);
        Ok(batch)
    }
}
