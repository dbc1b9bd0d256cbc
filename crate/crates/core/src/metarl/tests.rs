use super::*;
use crate::envs::Family;
use crate::rng::seeded;

fn tiny_policy(kind: PolicyKind) -> PolicyConfig {
    PolicyConfig {
        kind,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        intra_blocks: 1,
        inter_blocks: 1,
        flat_blocks: 1,
        flat_window: 3,
        head_hidden: 8,
        recurrent_hidden: 6,
        ..PolicyConfig::default()
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        meta_steps: 200,
        tasks_per_batch: 2,
        episodes_per_task: 2,
        k: 3,
        s: 3,
        minibatch: 16,
        epochs: 1,
        eval_interval: 0,
        eval_tasks: 2,
        eval_episodes: 2,
        ..TrainConfig::default()
    }
}

fn short_params() -> EnvParams {
    EnvParams {
        horizon: 12,
        ..EnvParams::default()
    }
}

fn reach(params: EnvParams) -> TaskDistribution {
    TaskDistribution::single_family(Family::Reach, 5, 3, params).unwrap()
}

const KINDS: [PolicyKind; 3] = [PolicyKind::Hierarchical, PolicyKind::Flat, PolicyKind::Recurrent];

#[test]
fn gae_one_step_identity() {
    let (a, r) = gae(&[1.0], &[0.0], &[true], 1.0, 1.0).unwrap();
    assert_eq!(a, vec![1.0]);
    assert_eq!(r, vec![1.0]);
}

#[test]
fn gae_zero_rewards_and_values() {
    let (a, _) = gae(&[0.0; 5], &[0.0; 5], &[false, false, true, false, true], 0.99, 0.95).unwrap();
    assert!(a.iter().all(|x| *x == 0.0));
}

#[test]
fn gae_lambda_zero_gives_td_residuals() {
    let (a, _) = gae(&[1.0; 3], &[0.0; 3], &[false, false, true], 0.5, 0.0).unwrap();
    assert_eq!(a, vec![1.0, 1.0, 1.0]);
}

#[test]
fn gae_matches_direct_sum() {
    // λ-return form: A_t = Σ_l (γλ)^l δ_{t+l} within the episode.
    let r = [0.5, -1.0, 2.0, 0.3, 0.1];
    let v = [0.2, 0.4, -0.3, 1.0, 0.7];
    let d = [false, false, true, false, true];
    let (g, l) = (0.9, 0.8);
    let (a, ret) = gae(&r, &v, &d, g, l).unwrap();
    let delta: Vec<f64> = (0..5)
        .map(|t| {
            let next = if d[t] { 0.0 } else { v[t + 1] };
            r[t] + g * next - v[t]
        })
        .collect();
    for t in 0..5 {
        let end = (t..5).find(|i| d[*i]).unwrap();
        let want: f64 = (t..=end).map(|i| libm::pow(g * l, (i - t) as f64) * delta[i]).sum();
        assert!((a[t] - want).abs() < 1e-12);
        assert!((ret[t] - (want + v[t])).abs() < 1e-12);
    }
    assert!(gae(&r, &v[..4], &d, g, l).is_err());
}

#[test]
fn normalization_moments() {
    let mut xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect();
    normalize(&mut xs);
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    assert!(m.abs() < 1e-8);
    assert!((sd - 1.0).abs() < 1e-6);
}

#[test]
fn single_episode_rollout_is_bounded() {
    let p = init_policy(&tiny_policy(PolicyKind::Hierarchical), &tiny_train()).unwrap();
    let dist = reach(EnvParams::default());
    let cfg = TrainConfig {
        tasks_per_batch: 1,
        episodes_per_task: 1,
        ..tiny_train()
    };
    let b = collect_rollouts(&p, &dist, &cfg, &mut seeded(0)).unwrap();
    assert!(b.env_steps() <= 100 && b.env_steps() > 0);
    assert!(b.tasks[0].steps.last().unwrap().done);
}

#[test]
fn rollouts_are_reproducible() {
    for kind in KINDS {
        let p = init_policy(&tiny_policy(kind), &tiny_train()).unwrap();
        let dist = reach(short_params());
        let a = collect_rollouts(&p, &dist, &tiny_train(), &mut seeded(11)).unwrap();
        let b = collect_rollouts(&p, &dist, &tiny_train(), &mut seeded(11)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn first_context_of_each_task_is_cold() {
    let p = init_policy(&tiny_policy(PolicyKind::Hierarchical), &tiny_train()).unwrap();
    let b = collect_rollouts(&p, &reach(short_params()), &tiny_train(), &mut seeded(1)).unwrap();
    for task in &b.tasks {
        let StepContext::Windows(slots) = &task.steps[0].context else {
            panic!()
        };
        assert!(slots.iter().all(|s| *s == slots[0]));
        // Only the current-state slot is valid.
        assert_eq!(task.pool.window_mask(slots[0]).iter().filter(|m| **m).count(), 1);
    }
}

#[test]
fn stored_log_probs_match_replay() {
    for kind in KINDS {
        let p = init_policy(&tiny_policy(kind), &tiny_train()).unwrap();
        let b = collect_rollouts(&p, &reach(short_params()), &tiny_train(), &mut seeded(5)).unwrap();
        let items = b.indices();
        let (lp, v) = replay_log_probs(&p, &b, &items).unwrap();
        for (i, it) in items.iter().enumerate() {
            let s = b.step(*it);
            assert!((lp[i] - s.log_prob).abs() < 1e-10, "{kind:?}");
            assert!((v[i] - s.value).abs() < 1e-10, "{kind:?}");
        }
    }
}

#[test]
fn logged_returns_match_independent_fold() {
    let p = init_policy(&tiny_policy(PolicyKind::Flat), &tiny_train()).unwrap();
    let params = short_params();
    let b = collect_rollouts(&p, &reach(params), &tiny_train(), &mut seeded(2)).unwrap();
    for task in &b.tasks {
        for (e, summary) in task.episodes.iter().enumerate() {
            let rewards: Vec<f64> = task.steps.iter().filter(|s| s.episode == e).map(|s| s.reward).collect();
            let mut acc = 0.0;
            let mut disc = 1.0;
            for r in &rewards {
                acc += disc * r;
                disc *= params.gamma;
            }
            assert!((summary.discounted - acc).abs() < 1e-10);
            assert_eq!(summary.steps, rewards.len());
        }
    }
}

fn prepared(kind: PolicyKind, seed: u64) -> (Policy, RolloutBatch, TrainConfig) {
    let cfg = TrainConfig { seed, ..tiny_train() };
    let p = init_policy(&tiny_policy(kind), &cfg).unwrap();
    let mut b = collect_rollouts(&p, &reach(short_params()), &cfg, &mut seeded(seed)).unwrap();
    compute_gae(&mut b, 0.99, 0.95).unwrap();
    (p, b, cfg)
}

#[test]
fn batch_advantages_are_normalized() {
    let (_, b, _) = prepared(PolicyKind::Hierarchical, 3);
    let adv: Vec<f64> = b.indices().iter().map(|i| b.step(*i).advantage).collect();
    let n = adv.len() as f64;
    let m = adv.iter().sum::<f64>() / n;
    let sd = (adv.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    assert!(m.abs() < 1e-8);
    assert!((sd - 1.0).abs() < 1e-6);
}

#[test]
fn unit_ratio_surrogate_is_mean_advantage() {
    for kind in KINDS {
        let (p, b, cfg) = prepared(kind, 4);
        let items = b.indices();
        let mut g = Graph::new();
        let (_, stats) = ppo_loss(&p, &b, &items, &cfg, &mut g).unwrap();
        let mean_adv = items.iter().map(|i| b.step(*i).advantage).sum::<f64>() / items.len() as f64;
        assert!((stats.policy_loss + mean_adv).abs() < 1e-10);
        assert!(stats.approx_kl.abs() < 1e-10);
        assert_eq!(stats.clip_fraction, 0.0);
    }
}

#[test]
fn ratio_two_is_clipped_to_one_point_two() {
    let (p, mut b, cfg) = prepared(PolicyKind::Hierarchical, 6);
    let it = (0, 0);
    let (lp, _) = replay_log_probs(&p, &b, &[it]).unwrap();
    let step = &mut b.tasks[0].steps[0];
    step.log_prob = lp[0] - core::f64::consts::LN_2;
    step.advantage = 0.7;
    let mut g = Graph::new();
    let (_, stats) = ppo_loss(&p, &b, &[it], &cfg, &mut g).unwrap();
    assert!((stats.policy_loss + 1.2 * 0.7).abs() < 1e-9);
    assert_eq!(stats.clip_fraction, 1.0);
}

#[test]
fn small_step_decreases_loss() {
    for kind in KINDS {
        for seed in 0..5 {
            let (mut p, b, cfg) = prepared(kind, seed);
            let cfg = TrainConfig { lr: 1e-4, ..cfg };
            let items = b.indices();
            let mut g = Graph::new();
            let (loss, before) = ppo_loss(&p, &b, &items, &cfg, &mut g).unwrap();
            let mut grads = Grads::zeros_like(&p.params);
            g.backward_into(loss, &mut grads).unwrap();
            grads.clip_global_norm(cfg.max_grad_norm);
            let mut opt = OptimState::new(
                &p.params,
                AdamConfig {
                    lr: 1e-4,
                    ..AdamConfig::default()
                },
            );
            adam_step(&mut p.params, &grads, &mut opt).unwrap();
            let mut g2 = Graph::new();
            let (_, after) = ppo_loss(&p, &b, &items, &cfg, &mut g2).unwrap();
            assert!(
                after.total < before.total,
                "{kind:?} seed {seed}: {} -> {}",
                before.total,
                after.total
            );
        }
    }
}

#[test]
fn minibatches_partition_the_batch() {
    for kind in KINDS {
        let (p, b, cfg) = prepared(kind, 7);
        let mut seen: Vec<(usize, usize)> = minibatches(&p, &b, &cfg, &mut seeded(0))
            .into_iter()
            .flatten()
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, b.indices());
    }
}

#[test]
fn ppo_update_runs_and_moves_parameters() {
    for kind in KINDS {
        let (mut p, b, cfg) = prepared(kind, 8);
        let before = p.params.checksum();
        let mut opt = OptimState::new(&p.params, AdamConfig::default());
        let stats = ppo_update(&mut p, &mut opt, &b, &cfg, &mut seeded(1)).unwrap();
        assert!(stats.total.is_finite() && stats.grad_norm > 0.0);
        assert_ne!(p.params.checksum(), before);
    }
}

#[test]
fn adaptation_is_gradient_free() {
    for kind in KINDS {
        let p = init_policy(&tiny_policy(kind), &tiny_train()).unwrap();
        let dist = reach(short_params());
        let task = dist.sample_task(Split::Test, &mut seeded(0)).unwrap();
        let before = p.params.clone();
        let r = adapt_and_eval(&p, &task, 3, &tiny_train().context(), &dist.params, &mut seeded(1)).unwrap();
        assert_eq!(r.successes.len(), 3);
        assert_eq!(p.params, before);
        let zero_shot = adapt_and_eval(&p, &task, 1, &tiny_train().context(), &dist.params, &mut seeded(1)).unwrap();
        assert_eq!(zero_shot.successes.len(), 1);
        assert!(adapt_and_eval(&p, &task, 0, &tiny_train().context(), &dist.params, &mut seeded(1)).is_err());
    }
}

#[test]
fn budget_below_one_batch_means_no_updates() {
    let pcfg = tiny_policy(PolicyKind::Hierarchical);
    let cfg = TrainConfig {
        meta_steps: 10,
        ..tiny_train()
    };
    let out = meta_train(&pcfg, &cfg, &reach(short_params()), &mut |_, _| Ok(())).unwrap();
    assert!(out.log.updates.is_empty());
    assert_eq!(out.env_steps, 0);
    assert_eq!(out.policy, init_policy(&pcfg, &cfg).unwrap());
    assert!(!out.log.evals.is_empty());
}

#[test]
fn meta_train_is_reproducible_and_monotone() {
    let pcfg = tiny_policy(PolicyKind::Hierarchical);
    let cfg = TrainConfig {
        meta_steps: 150,
        eval_interval: 40,
        ..tiny_train()
    };
    let dist = reach(short_params());
    let mut events = 0;
    let a = meta_train(&pcfg, &cfg, &dist, &mut |_, _| {
        events += 1;
        Ok(())
    })
    .unwrap();
    let b = meta_train(&pcfg, &cfg, &dist, &mut |_, _| Ok(())).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.policy, b.policy);
    assert!(a.log.updates.len() >= 2);
    assert!(a.log.updates.windows(2).all(|w| w[0].env_steps < w[1].env_steps));
    assert!(events > a.log.updates.len());
    assert!(a.env_steps + cfg.max_batch_steps(&dist.params) > cfg.meta_steps);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            clip_eps: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            k: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            gae_lambda: 1.5,
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn evaluation_covers_families_evenly() {
    let dist =
        TaskDistribution::multi_family(Family::MLN_TRAIN.to_vec(), Family::MLN_TEST.to_vec(), short_params()).unwrap();
    let tasks = evaluation_tasks(&dist, Split::Test, 6, &mut seeded(0)).unwrap();
    let pulls = tasks.iter().filter(|t| t.family == Family::Pull).count();
    assert_eq!(pulls, 3);
    let p = init_policy(&tiny_policy(PolicyKind::Flat), &tiny_train()).unwrap();
    let res = evaluate(
        &p,
        &dist,
        Split::Test,
        4,
        2,
        &tiny_train().context(),
        true,
        &mut seeded(0),
    )
    .unwrap();
    let rows = summarize(0, Split::Test, &res);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].family, None);
    assert_eq!(rows[0].tasks, 4);
    assert!(res
        .iter()
        .all(|r| r.embeddings.len() == 2 && r.embeddings[0].len() == 8));
}
