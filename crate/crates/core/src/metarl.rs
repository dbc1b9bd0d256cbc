//! Outer-loop meta-training with PPO and gradient-free adaptation.
//!
//! A training iteration samples `tasks_per_batch` tasks, runs
//! `episodes_per_task` episodes in each with a fresh episode buffer, and
//! updates the policy with clipped PPO. Window-based policies draw a new
//! context batch at every decision point; the windows are interned in a
//! per-task [`WindowPool`] so the exact context can be replayed during the
//! update. The recurrent baseline replays the per-step cell inputs instead.
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::envs::{
    discounted_return, EnvParams, Family, PointMassEnv, Split, TaskDistribution, TaskSpec, ACTION_DIM, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::memory::{EpisodeBuffer, Transition, WindowPool};
use crate::optim::{adam_step, AdamConfig, OptimState};
use crate::params::Grads;
use crate::policy::{
    entropy_graph, log_prob_graph, ActMode, ContextConfig, GaussianAction, HeadOutput, Policy, PolicyConfig,
    PolicyKind, RecurrentMemory, Sampling,
};
use crate::rng::{self, Prng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Environment-step budget.
    pub meta_steps: u64,
    pub tasks_per_batch: usize,
    pub episodes_per_task: usize,
    pub k: usize,
    pub s: usize,
    pub sampling: Sampling,
    pub clip_eps: f64,
    pub epochs: usize,
    /// Steps per PPO minibatch.
    pub minibatch: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub gae_lambda: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Multiplier on rewards before advantage and value-target estimation.
    pub reward_scale: f64,
    pub seed: u64,
    /// Env steps between evaluations; 0 evaluates only at the end.
    pub eval_interval: u64,
    pub eval_tasks: usize,
    /// Adaptation budget per evaluation task; the last episode is scored.
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            meta_steps: 2_000_000,
            tasks_per_batch: 8,
            episodes_per_task: 10,
            k: 25,
            s: 5,
            sampling: Sampling::RecentEpisodes,
            clip_eps: 0.2,
            epochs: 4,
            minibatch: 256,
            value_coef: 0.5,
            entropy_coef: 0.01,
            gae_lambda: 0.95,
            lr: 3e-4,
            max_grad_norm: 0.5,
            reward_scale: 0.1,
            seed: 0,
            eval_interval: 250_000,
            eval_tasks: 20,
            eval_episodes: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tasks_per_batch", self.tasks_per_batch),
            ("episodes_per_task", self.episodes_per_task),
            ("k", self.k),
            ("s", self.s),
            ("epochs", self.epochs),
            ("minibatch", self.minibatch),
            ("eval_tasks", self.eval_tasks),
            ("eval_episodes", self.eval_episodes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be positive")));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::contract("clip_eps must lie in (0, 1)"));
        }
        let reals = [
            ("value_coef", self.value_coef),
            ("entropy_coef", self.entropy_coef),
            ("lr", self.lr),
            ("max_grad_norm", self.max_grad_norm),
        ];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::contract(format!("{name} must be finite and non-negative")));
        }
        if !(self.lr > 0.0 && self.max_grad_norm > 0.0 && self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return Err(Error::contract("lr, max_grad_norm and reward_scale must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::contract("gae_lambda must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn context(&self) -> ContextConfig {
        ContextConfig {
            k: self.k,
            s: self.s,
            sampling: self.sampling,
        }
    }

    /// Most env steps one rollout batch can consume.
    pub fn max_batch_steps(&self, params: &EnvParams) -> u64 {
        (self.tasks_per_batch * self.episodes_per_task * params.horizon) as u64
    }
}

/// What the policy saw at a decision point, in replayable form.
#[derive(Debug, Clone, PartialEq)]
pub enum StepContext {
    /// Pool slots of the K windows, current window last.
    Windows(Vec<usize>),
    /// Cell input `[state ∥ previous action ∥ previous reward]`.
    Recurrent(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: Vec<f64>,
    pub context: StepContext,
    /// Sampled action before clamping.
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    pub done: bool,
    pub value: f64,
    pub episode: usize,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub success: bool,
    pub ret: f64,
    pub discounted: f64,
    pub steps: usize,
    /// Task embedding at the episode's first decision point, when captured.
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRollout {
    pub task: TaskSpec,
    /// Interned windows; empty for the recurrent policy.
    pub pool: WindowPool,
    pub steps: Vec<StepRecord>,
    pub episodes: Vec<EpisodeSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub tasks: Vec<TaskRollout>,
    pub advantages_ready: bool,
}

impl RolloutBatch {
    pub fn env_steps(&self) -> usize {
        self.tasks.iter().map(|t| t.steps.len()).sum()
    }

    /// `(task, step)` for every record, task-major.
    pub fn indices(&self) -> Vec<(usize, usize)> {
        self.tasks
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..t.steps.len()).map(move |si| (ti, si)))
            .collect()
    }

    pub fn step(&self, at: (usize, usize)) -> &StepRecord {
        &self.tasks[at.0].steps[at.1]
    }

    /// Mean success of each task's last episode.
    pub fn final_success_rate(&self) -> f64 {
        let flags: Vec<bool> = self
            .tasks
            .iter()
            .filter_map(|t| t.episodes.last().map(|e| e.success))
            .collect();
        mean_flags(&flags)
    }

    pub fn mean_episode_return(&self) -> f64 {
        let r: Vec<f64> = self
            .tasks
            .iter()
            .flat_map(|t| t.episodes.iter().map(|e| e.ret))
            .collect();
        if r.is_empty() {
            0.0
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }
}

fn mean_flags(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RunOptions {
    episodes: usize,
    /// Act on the mean in the last episode.
    final_mean: bool,
    capture_embeddings: bool,
}

/// Run `episodes` episodes of one task with a fresh buffer.
fn run_task(
    policy: &Policy,
    task: &TaskSpec,
    params: &EnvParams,
    ctx: &ContextConfig,
    opts: RunOptions,
    rng: &mut Prng,
) -> Result<TaskRollout> {
    let (k, s) = policy.window_shape(ctx);
    let feature_dim = Transition::feature_dim(STATE_DIM, ACTION_DIM);
    let mut out = TaskRollout {
        task: *task,
        pool: WindowPool::new(s, feature_dim),
        steps: Vec::new(),
        episodes: Vec::with_capacity(opts.episodes),
    };
    let mut buffer = EpisodeBuffer::new(k.max(policy.config.flat_window), ACTION_DIM)?;
    let mut cache: Vec<Vec<f64>> = Vec::new();
    let mut memory = policy
        .recurrent_hidden_dim()
        .map(|h| RecurrentMemory::new(h, ACTION_DIM));

    for episode in 0..opts.episodes {
        let mode = if opts.final_mean && episode + 1 == opts.episodes {
            ActMode::Mean
        } else {
            ActMode::Sample
        };
        let (mut env, mut obs) = PointMassEnv::reset(task, params, rng);
        let mut rewards = Vec::new();
        let mut embedding = None;
        let success = loop {
            let state = obs.to_vec();
            let (action, context, emb) = match memory.as_mut() {
                Some(mem) => {
                    let input = mem.input(&state);
                    let emb = mem.hidden.clone();
                    let a = policy.act_recurrent(&state, mem, mode, rng)?;
                    (a, StepContext::Recurrent(input), emb)
                }
                None => {
                    let batch = policy.sample_context(&buffer, ctx, rng, &state)?;
                    let slots = out.pool.insert_batch(&batch)?;
                    fill_cache(policy, &out.pool, &mut cache, &slots)?;
                    let (a, emb) = window_decision(policy, &cache, &slots, &state, mode, rng)?;
                    (a, StepContext::Windows(slots), emb)
                }
            };
            if opts.capture_embeddings && embedding.is_none() {
                embedding = Some(emb);
            }
            let outcome = env.step(&action.clamped);
            if let Some(mem) = memory.as_mut() {
                mem.observe(&action.clamped, outcome.reward);
            }
            buffer.push(Transition {
                state: state.clone(),
                action: action.clamped.clone(),
                reward: outcome.reward,
                done: outcome.done,
            });
            rewards.push(outcome.reward);
            out.steps.push(StepRecord {
                state,
                context,
                action: action.action,
                log_prob: action.log_prob,
                reward: outcome.reward,
                done: outcome.done,
                value: action.value,
                episode,
                advantage: 0.0,
                ret: 0.0,
            });
            obs = outcome.observation;
            if outcome.done {
                break outcome.success;
            }
        };
        buffer.seal();
        out.episodes.push(EpisodeSummary {
            success,
            ret: rewards.iter().sum(),
            discounted: discounted_return(&rewards, params.gamma),
            steps: rewards.len(),
            embedding,
        });
    }
    Ok(out)
}

/// Encode pool windows that have no cached row yet.
fn fill_cache(policy: &Policy, pool: &WindowPool, cache: &mut Vec<Vec<f64>>, slots: &[usize]) -> Result<()> {
    if cache.len() < pool.len() {
        cache.resize(pool.len(), Vec::new());
    }
    let mut missing: Vec<usize> = slots.iter().copied().filter(|s| cache[*s].is_empty()).collect();
    missing.sort_unstable();
    missing.dedup();
    if missing.is_empty() {
        return Ok(());
    }
    let (features, mask) = pool.gather(&missing);
    let s = pool.seq_len();
    let mut g = Graph::inference();
    let t = Tensor::new(vec![missing.len() * s, pool.feature_dim()], features)?;
    let rows = policy.encode_windows(&mut g, t, missing.len(), s, &mask)?;
    for (i, slot) in missing.iter().enumerate() {
        cache[*slot] = g.value(rows).row(i).to_vec();
    }
    Ok(())
}

fn window_decision(
    policy: &Policy,
    cache: &[Vec<f64>],
    slots: &[usize],
    state: &[f64],
    mode: ActMode,
    rng: &mut Prng,
) -> Result<(GaussianAction, Vec<f64>)> {
    let d = cache[slots[0]].len();
    let mut rows = Vec::with_capacity(slots.len() * d);
    for s in slots {
        rows.extend_from_slice(&cache[*s]);
    }
    let mut g = Graph::inference();
    let x = g.input(Tensor::new(vec![slots.len(), d], rows)?)?;
    let states = Tensor::new(vec![1, state.len()], state.to_vec())?;
    let head = policy.heads_from_windows(&mut g, x, slots.len(), states)?;
    let emb = g.value(head.embedding).row(0).to_vec();
    Ok((policy.draw(&g, &head, 0, mode, rng), emb))
}

/// Sample `tasks_per_batch` training tasks and roll out
/// `episodes_per_task` episodes in each, acting in sample mode.
pub fn collect_rollouts(
    policy: &Policy,
    dist: &TaskDistribution,
    config: &TrainConfig,
    rng: &mut Prng,
) -> Result<RolloutBatch> {
    config.validate()?;
    let opts = RunOptions {
        episodes: config.episodes_per_task,
        final_mean: false,
        capture_embeddings: false,
    };
    let mut tasks = Vec::with_capacity(config.tasks_per_batch);
    for _ in 0..config.tasks_per_batch {
        let task = dist.sample_task(Split::Train, rng)?;
        tasks.push(run_task(policy, &task, &dist.params, &config.context(), opts, rng)?);
    }
    Ok(RolloutBatch {
        tasks,
        advantages_ready: false,
    })
}

/// Generalized advantage estimates for one sequence; `done` is terminal.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::contract("gae inputs must have equal lengths"));
    }
    let mut adv = vec![0.0; n];
    let mut last = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v * live - values[t];
        last = delta + gamma * lambda * live * last;
        adv[t] = last;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// `(x − mean) / (std + 1e-8)` with the population standard deviation.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = libm::sqrt(var) + 1e-8;
    for x in xs {
        *x = (*x - mean) / sd;
    }
}

/// Fill advantages and returns for every task, then normalize advantages
/// across the whole batch.
pub fn compute_gae(batch: &mut RolloutBatch, gamma: f64, lambda: f64) -> Result<()> {
    compute_gae_scaled(batch, gamma, lambda, 1.0)
}

/// [`compute_gae`] on rewards multiplied by `reward_scale`; value targets
/// are in scaled units.
pub fn compute_gae_scaled(batch: &mut RolloutBatch, gamma: f64, lambda: f64, reward_scale: f64) -> Result<()> {
    if batch.env_steps() == 0 {
        return Err(Error::contract("compute_gae on an empty batch"));
    }
    let mut all = Vec::with_capacity(batch.env_steps());
    for task in &mut batch.tasks {
        let r: Vec<f64> = task.steps.iter().map(|s| s.reward * reward_scale).collect();
        let v: Vec<f64> = task.steps.iter().map(|s| s.value).collect();
        let d: Vec<bool> = task.steps.iter().map(|s| s.done).collect();
        let (adv, ret) = gae(&r, &v, &d, gamma, lambda)?;
        for ((step, a), rt) in task.steps.iter_mut().zip(&adv).zip(ret) {
            step.advantage = *a;
            step.ret = rt;
        }
        all.extend(adv);
    }
    normalize(&mut all);
    let mut it = all.into_iter();
    for task in &mut batch.tasks {
        for step in &mut task.steps {
            step.advantage = it.next().expect("one advantage per step");
        }
    }
    batch.advantages_ready = true;
    Ok(())
}

/// Heads for the records `items`, replaying their stored contexts.
pub fn replay_heads(
    policy: &Policy,
    batch: &RolloutBatch,
    items: &[(usize, usize)],
    g: &mut Graph,
) -> Result<HeadOutput> {
    if items.is_empty() {
        return Err(Error::contract("replay of zero steps"));
    }
    let sd = policy.state_dim();
    let mut states = Vec::with_capacity(items.len() * sd);
    for it in items {
        states.extend_from_slice(&batch.step(*it).state);
    }
    let states = Tensor::new(vec![items.len(), sd], states)?;
    if policy.uses_windows() {
        let mut unique: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut gather_idx = Vec::new();
        let mut k = 0;
        for it in items {
            let StepContext::Windows(slots) = &batch.step(*it).context else {
                return Err(Error::contract("window policy given a recurrent record"));
            };
            k = slots.len();
            for s in slots {
                let n = unique.len();
                gather_idx.push(*unique.entry((it.0, *s)).or_insert(n));
            }
        }
        let mut order: Vec<(usize, usize)> = vec![(0, 0); unique.len()];
        for (key, i) in &unique {
            order[*i] = *key;
        }
        let pool0 = &batch.tasks[items[0].0].pool;
        let (s, f) = (pool0.seq_len(), pool0.feature_dim());
        let mut features = Vec::with_capacity(order.len() * s * f);
        let mut mask = Vec::with_capacity(order.len() * s);
        for (task, slot) in &order {
            let pool = &batch.tasks[*task].pool;
            features.extend_from_slice(pool.window(*slot));
            mask.extend_from_slice(pool.window_mask(*slot));
        }
        let t = Tensor::new(vec![order.len() * s, f], features)?;
        let rows = policy.encode_windows(g, t, order.len(), s, &mask)?;
        let gathered = g.gather_rows(rows, &gather_idx)?;
        policy.heads_from_windows(g, gathered, k, states)
    } else {
        let h_dim = policy
            .recurrent_hidden_dim()
            .expect("non-window policies are recurrent");
        let mut tasks: Vec<usize> = items.iter().map(|it| it.0).collect();
        tasks.dedup();
        let mut sorted = tasks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != tasks.len() {
            return Err(Error::contract("recurrent replay needs each task's steps contiguous"));
        }
        let len = tasks.iter().map(|t| batch.tasks[*t].steps.len()).max().unwrap_or(0);
        let b = tasks.len();
        let in_dim = match batch.tasks[tasks[0]].steps.first().map(|s| &s.context) {
            Some(StepContext::Recurrent(x)) => x.len(),
            _ => return Err(Error::contract("recurrent policy given a window record")),
        };
        let mut h = g.input(Tensor::zeros(&[b, h_dim]))?;
        let mut hs = Vec::with_capacity(len);
        for t in 0..len {
            let mut x = vec![0.0; b * in_dim];
            for (bi, task) in tasks.iter().enumerate() {
                if let Some(step) = batch.tasks[*task].steps.get(t) {
                    let StepContext::Recurrent(input) = &step.context else {
                        return Err(Error::contract("recurrent policy given a window record"));
                    };
                    x[bi * in_dim..(bi + 1) * in_dim].copy_from_slice(input);
                }
            }
            let xv = g.input(Tensor::new(vec![b, in_dim], x)?)?;
            h = policy.gru_step(g, xv, h)?;
            hs.push(h);
        }
        let all = g.concat_rows(&hs)?;
        let pos: BTreeMap<usize, usize> = tasks.iter().enumerate().map(|(i, t)| (*t, i)).collect();
        let idx: Vec<usize> = items.iter().map(|(t, s)| s * b + pos[t]).collect();
        let gathered = g.gather_rows(all, &idx)?;
        policy.heads_from_hidden(g, gathered, states)
    }
}

/// Log-probs and values of stored actions under the current weights.
pub fn replay_log_probs(
    policy: &Policy,
    batch: &RolloutBatch,
    items: &[(usize, usize)],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::inference();
    let head = replay_heads(policy, batch, items, &mut g)?;
    let actions = action_tensor(policy, batch, items)?;
    let lp = log_prob_graph(&mut g, head.mean, head.log_std, actions)?;
    Ok((g.value(lp).data().to_vec(), g.value(head.value).data().to_vec()))
}

fn action_tensor(policy: &Policy, batch: &RolloutBatch, items: &[(usize, usize)]) -> Result<Tensor> {
    let a = policy.action_dim();
    let mut data = Vec::with_capacity(items.len() * a);
    for it in items {
        data.extend_from_slice(&batch.step(*it).action);
    }
    Tensor::new(vec![items.len(), a], data)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl LossStats {
    fn add(&mut self, o: &LossStats) {
        self.total += o.total;
        self.policy_loss += o.policy_loss;
        self.value_loss += o.value_loss;
        self.entropy += o.entropy;
        self.approx_kl += o.approx_kl;
        self.clip_fraction += o.clip_fraction;
        self.grad_norm += o.grad_norm;
    }

    fn scaled(mut self, f: f64) -> Self {
        for v in [
            &mut self.total,
            &mut self.policy_loss,
            &mut self.value_loss,
            &mut self.entropy,
            &mut self.approx_kl,
            &mut self.clip_fraction,
            &mut self.grad_norm,
        ] {
            *v *= f;
        }
        self
    }
}

/// The clipped PPO objective over `items`:
/// `−mean(min(ρA, clip(ρ)A)) + c_v·mean((V − R)²) − c_e·mean(H)`.
pub fn ppo_loss(
    policy: &Policy,
    batch: &RolloutBatch,
    items: &[(usize, usize)],
    config: &TrainConfig,
    g: &mut Graph,
) -> Result<(Var, LossStats)> {
    if !batch.advantages_ready {
        return Err(Error::contract("ppo_loss before compute_gae"));
    }
    let head = replay_heads(policy, batch, items, g)?;
    let m = items.len();
    let col = |f: &dyn Fn(&StepRecord) -> f64| Tensor::vector(items.iter().map(|it| f(batch.step(*it))).collect());
    let actions = action_tensor(policy, batch, items)?;
    let lp = log_prob_graph(g, head.mean, head.log_std, actions)?;
    let old = g.input(col(&|s| s.log_prob))?;
    let adv = g.input(col(&|s| s.advantage))?;
    let ret = g.input(col(&|s| s.ret))?;

    let diff = g.sub(lp, old)?;
    let ratio = g.exp(diff)?;
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps)?;
    let s2 = g.mul(clipped, adv)?;
    let surr = g.min(s1, s2)?;
    let surr = g.mean(surr)?;
    let policy_loss = g.scale(surr, -1.0)?;

    let vd = g.sub(head.value, ret)?;
    let vsq = g.square(vd)?;
    let value_loss = g.mean(vsq)?;

    let ent = entropy_graph(g, head.log_std)?;
    let ent = g.mean(ent)?;

    let vterm = g.scale(value_loss, config.value_coef)?;
    let eterm = g.scale(ent, -config.entropy_coef)?;
    let total = g.add(policy_loss, vterm)?;
    let total = g.add(total, eterm)?;

    let d = g.value(diff).data();
    let clip_count = d
        .iter()
        .filter(|x| (libm::exp(**x) - 1.0).abs() > config.clip_eps)
        .count();
    let stats = LossStats {
        total: g.value(total).item(),
        policy_loss: g.value(policy_loss).item(),
        value_loss: g.value(value_loss).item(),
        entropy: g.value(ent).item(),
        approx_kl: -d.iter().sum::<f64>() / m as f64,
        clip_fraction: clip_count as f64 / m as f64,
        grad_norm: 0.0,
    };
    Ok((total, stats))
}

/// Minibatches for one epoch. Window policies use contiguous chunks of
/// `minibatch` steps in shuffled order; the recurrent policy groups whole
/// tasks until each group holds at least `minibatch` steps.
pub fn minibatches(
    policy: &Policy,
    batch: &RolloutBatch,
    config: &TrainConfig,
    rng: &mut Prng,
) -> Vec<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    if policy.uses_windows() {
        let idx = batch.indices();
        for chunk in idx.chunks(config.minibatch) {
            out.push(chunk.to_vec());
        }
    } else {
        let mut order: Vec<usize> = (0..batch.tasks.len()).collect();
        shuffle(&mut order, rng);
        let mut cur = Vec::new();
        for t in order {
            cur.extend((0..batch.tasks[t].steps.len()).map(|s| (t, s)));
            if cur.len() >= config.minibatch {
                out.push(core::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        return out;
    }
    shuffle(&mut out, rng);
    out
}

fn shuffle<T>(xs: &mut [T], rng: &mut Prng) {
    for i in (1..xs.len()).rev() {
        let j = rng::index(rng, i + 1);
        xs.swap(i, j);
    }
}

/// `epochs` passes of minibatch Adam steps on the clipped objective.
/// Returns statistics averaged over minibatches.
pub fn ppo_update(
    policy: &mut Policy,
    optim: &mut OptimState,
    batch: &RolloutBatch,
    config: &TrainConfig,
    rng: &mut Prng,
) -> Result<LossStats> {
    let mut acc = LossStats::default();
    let mut n = 0usize;
    let mut grads = Grads::zeros_like(&policy.params);
    for _ in 0..config.epochs {
        for mb in minibatches(policy, batch, config, rng) {
            let mut g = Graph::new();
            let (loss, mut stats) = ppo_loss(policy, batch, &mb, config, &mut g)?;
            grads.zero();
            g.backward_into(loss, &mut grads)?;
            stats.grad_norm = grads.clip_global_norm(config.max_grad_norm);
            if !stats.grad_norm.is_finite() {
                return Err(Error::NonFinite {
                    context: "ppo_update".into(),
                    detail: format!("gradient norm {} at loss {}", stats.grad_norm, stats.total),
                });
            }
            adam_step(&mut policy.params, &grads, optim)?;
            acc.add(&stats);
            n += 1;
        }
    }
    Ok(if n == 0 { acc } else { acc.scaled(1.0 / n as f64) })
}

/// Result of running the adaptation protocol on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptResult {
    pub family: Family,
    pub successes: Vec<bool>,
    pub returns: Vec<f64>,
    pub discounted_returns: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
}

impl AdaptResult {
    pub fn from_rollout(r: TaskRollout) -> Self {
        AdaptResult {
            family: r.task.family,
            successes: r.episodes.iter().map(|e| e.success).collect(),
            returns: r.episodes.iter().map(|e| e.ret).collect(),
            discounted_returns: r.episodes.iter().map(|e| e.discounted).collect(),
            embeddings: r.episodes.into_iter().filter_map(|e| e.embedding).collect(),
        }
    }

    /// Success of the scored (last, mean-mode) episode.
    pub fn final_success(&self) -> bool {
        self.successes.last().copied().unwrap_or(false)
    }
}

/// Meta-test protocol: no parameter updates, an empty buffer, sample-mode
/// actions for the first `n_episodes − 1` episodes and the mean action in
/// the last.
pub fn adapt_and_eval(
    policy: &Policy,
    task: &TaskSpec,
    n_episodes: usize,
    ctx: &ContextConfig,
    params: &EnvParams,
    rng: &mut Prng,
) -> Result<AdaptResult> {
    adapt_inner(policy, task, n_episodes, ctx, params, false, rng)
}

fn adapt_inner(
    policy: &Policy,
    task: &TaskSpec,
    n_episodes: usize,
    ctx: &ContextConfig,
    params: &EnvParams,
    capture_embeddings: bool,
    rng: &mut Prng,
) -> Result<AdaptResult> {
    let r = adapt_rollout(policy, task, n_episodes, ctx, params, capture_embeddings, rng)?;
    Ok(AdaptResult::from_rollout(r))
}

/// The rollout behind [`adapt_and_eval`], with every step kept.
pub fn adapt_rollout(
    policy: &Policy,
    task: &TaskSpec,
    n_episodes: usize,
    ctx: &ContextConfig,
    params: &EnvParams,
    capture_embeddings: bool,
    rng: &mut Prng,
) -> Result<TaskRollout> {
    if n_episodes == 0 {
        return Err(Error::contract("adapt_and_eval needs at least one episode"));
    }
    let opts = RunOptions {
        episodes: n_episodes,
        final_mean: true,
        capture_embeddings,
    };
    run_task(policy, task, params, ctx, opts, rng)
}

/// Evaluation tasks cycle through the split's families so every family is
/// covered evenly.
pub fn evaluation_tasks(dist: &TaskDistribution, split: Split, n: usize, rng: &mut Prng) -> Result<Vec<TaskSpec>> {
    let fams = dist.families(split);
    if fams.is_empty() {
        return Err(Error::contract(format!("{} split has no families", split.name())));
    }
    (0..n)
        .map(|i| dist.sample_family_task(fams[i % fams.len()], split, rng))
        .collect()
}

/// Run the adaptation protocol on `n_tasks` tasks of `split`.
pub fn evaluate(
    policy: &Policy,
    dist: &TaskDistribution,
    split: Split,
    n_tasks: usize,
    n_episodes: usize,
    ctx: &ContextConfig,
    capture_embeddings: bool,
    rng: &mut Prng,
) -> Result<Vec<AdaptResult>> {
    let tasks = evaluation_tasks(dist, split, n_tasks, rng)?;
    tasks
        .iter()
        .map(|t| adapt_inner(policy, t, n_episodes, ctx, &dist.params, capture_embeddings, rng))
        .collect()
}

/// One row of evaluation output: a family, or all families when `family`
/// is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub env_steps: u64,
    pub split: Split,
    pub family: Option<Family>,
    pub tasks: usize,
    /// Mean final-episode success.
    pub success_rate: f64,
    /// Mean undiscounted return of the final episode.
    pub mean_return: f64,
    /// Mean success per adaptation episode.
    pub episode_success: Vec<f64>,
}

pub fn summarize(env_steps: u64, split: Split, results: &[AdaptResult]) -> Vec<EvalSummary> {
    let mut fams: Vec<Family> = results.iter().map(|r| r.family).collect();
    fams.sort();
    fams.dedup();
    let mut groups: Vec<Option<Family>> = vec![None];
    if fams.len() > 1 {
        groups.extend(fams.into_iter().map(Some));
    } else if let Some(f) = fams.first() {
        groups[0] = Some(*f);
    }
    groups
        .into_iter()
        .map(|fam| {
            let sel: Vec<&AdaptResult> = results.iter().filter(|r| fam.is_none_or(|f| r.family == f)).collect();
            let n = sel.len().max(1) as f64;
            let episodes = sel.iter().map(|r| r.successes.len()).max().unwrap_or(0);
            EvalSummary {
                env_steps,
                split,
                family: fam,
                tasks: sel.len(),
                success_rate: sel.iter().filter(|r| r.final_success()).count() as f64 / n,
                mean_return: sel
                    .iter()
                    .map(|r| r.returns.last().copied().unwrap_or(0.0))
                    .sum::<f64>()
                    / n,
                episode_success: (0..episodes)
                    .map(|e| {
                        sel.iter()
                            .filter(|r| r.successes.get(e).copied().unwrap_or(false))
                            .count() as f64
                            / n
                    })
                    .collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub update: usize,
    /// Env steps consumed once this update's rollouts were collected.
    pub env_steps: u64,
    pub train_success: f64,
    pub mean_return: f64,
    pub stats: LossStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub updates: Vec<UpdateSummary>,
    pub evals: Vec<EvalSummary>,
}

/// Events handed to the [`meta_train`] observer.
#[derive(Debug)]
pub enum Progress<'a> {
    Update(&'a UpdateSummary),
    Eval(&'a [EvalSummary]),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub log: MetricsLog,
    pub env_steps: u64,
}

fn seed_stream(seed: u64, stream: u64) -> Prng {
    rng::seeded(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Build a policy from `config.seed`.
pub fn init_policy(policy_cfg: &PolicyConfig, config: &TrainConfig) -> Result<Policy> {
    let mut r = seed_stream(config.seed, 1);
    Policy::new(policy_cfg.clone(), STATE_DIM, ACTION_DIM, &mut r)
}

/// Evaluate on both splits with a fixed task stream so every checkpoint
/// sees the same tasks.
pub fn checkpoint_eval(
    policy: &Policy,
    dist: &TaskDistribution,
    config: &TrainConfig,
    env_steps: u64,
) -> Result<Vec<EvalSummary>> {
    let mut rows = Vec::new();
    for (i, split) in [Split::Train, Split::Test].into_iter().enumerate() {
        let mut r = seed_stream(config.seed, 100 + i as u64);
        let res = evaluate(
            policy,
            dist,
            split,
            config.eval_tasks,
            config.eval_episodes,
            &config.context(),
            false,
            &mut r,
        )?;
        rows.extend(summarize(env_steps, split, &res));
    }
    Ok(rows)
}

/// Collect → GAE → PPO until the next batch could exceed `meta_steps`,
/// evaluating every `eval_interval` steps and once at the end.
pub fn meta_train(
    policy_cfg: &PolicyConfig,
    config: &TrainConfig,
    dist: &TaskDistribution,
    observer: &mut dyn FnMut(Progress<'_>, &Policy) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    policy_cfg.validate()?;
    let mut policy = init_policy(policy_cfg, config)?;
    let mut optim = OptimState::new(
        &policy.params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut rollout_rng = seed_stream(config.seed, 2);
    let mut update_rng = seed_stream(config.seed, 3);
    let mut log = MetricsLog::default();
    let mut consumed = 0u64;
    let mut next_eval = config.eval_interval;
    let max_batch = config.max_batch_steps(&dist.params);
    while consumed + max_batch <= config.meta_steps {
        let mut batch = collect_rollouts(&policy, dist, config, &mut rollout_rng)?;
        consumed += batch.env_steps() as u64;
        compute_gae_scaled(&mut batch, dist.params.gamma, config.gae_lambda, config.reward_scale)?;
        let stats = ppo_update(&mut policy, &mut optim, &batch, config, &mut update_rng)?;
        let row = UpdateSummary {
            update: log.updates.len(),
            env_steps: consumed,
            train_success: batch.final_success_rate(),
            mean_return: batch.mean_episode_return(),
            stats,
        };
        observer(Progress::Update(&row), &policy)?;
        log.updates.push(row);
        if config.eval_interval > 0 && consumed >= next_eval {
            while next_eval <= consumed {
                next_eval += config.eval_interval;
            }
            let rows = checkpoint_eval(&policy, dist, config, consumed)?;
            observer(Progress::Eval(&rows), &policy)?;
            log.evals.extend(rows);
        }
    }
    if log.evals.last().is_none_or(|e| e.env_steps != consumed) {
        let rows = checkpoint_eval(&policy, dist, config, consumed)?;
        observer(Progress::Eval(&rows), &policy)?;
        log.evals.extend(rows);
    }
    Ok(TrainOutcome {
        policy,
        log,
        env_steps: consumed,
    })
}

/// A labelled task embedding captured at an episode's first decision point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub family: Family,
    pub task: usize,
    pub episode: usize,
    pub values: Vec<f64>,
}

/// Run the adaptation protocol on `n_tasks` tasks of `split` and collect
/// one embedding per episode.
pub fn collect_embeddings(
    policy: &Policy,
    dist: &TaskDistribution,
    split: Split,
    n_tasks: usize,
    n_episodes: usize,
    ctx: &ContextConfig,
    rng: &mut Prng,
) -> Result<Vec<EmbeddingRecord>> {
    let results = evaluate(policy, dist, split, n_tasks, n_episodes, ctx, true, rng)?;
    Ok(results
        .into_iter()
        .enumerate()
        .flat_map(|(task, r)| {
            let family = r.family;
            r.embeddings
                .into_iter()
                .enumerate()
                .map(move |(episode, values)| EmbeddingRecord {
                    family,
                    task,
                    episode,
                    values,
                })
        })
        .collect())
}

/// Name used in output files for a policy kind and head variant.
pub fn method_name(cfg: &PolicyConfig) -> String {
    match (cfg.kind, cfg.state_concat) {
        (PolicyKind::Hierarchical, true) => "htrmrl".into(),
        (PolicyKind::Hierarchical, false) => "htrmrl-star".into(),
        (PolicyKind::Flat, _) => "flat".into(),
        (PolicyKind::Recurrent, _) => "recurrent".into(),
    }
}

#[cfg(test)]
mod tests;
