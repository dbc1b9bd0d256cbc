use super::*;
use crate::rng::seeded;

const SD: usize = 6;
const AD: usize = 2;

fn config(kind: PolicyKind) -> PolicyConfig {
    PolicyConfig {
        kind,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        head_hidden: 16,
        recurrent_hidden: 12,
        ..PolicyConfig::default()
    }
}

fn ctx() -> ContextConfig {
    ContextConfig {
        k: 4,
        s: 3,
        sampling: Sampling::RecentEpisodes,
    }
}

fn random_transition(rng: &mut Prng, done: bool) -> Transition {
    Transition {
        state: (0..SD).map(|_| rng::uniform(rng, -1.0, 1.0)).collect(),
        action: (0..AD).map(|_| rng::uniform(rng, -1.0, 1.0)).collect(),
        reward: rng::uniform(rng, -1.0, 0.0),
        done,
    }
}

fn filled_buffer(rng: &mut Prng, episodes: usize, len: usize, open: usize) -> EpisodeBuffer {
    let mut b = EpisodeBuffer::new(25, AD).unwrap();
    for _ in 0..episodes {
        for i in 0..len {
            b.push(random_transition(rng, i + 1 == len));
        }
    }
    for _ in 0..open {
        b.push(random_transition(rng, false));
    }
    b
}

fn state(rng: &mut Prng) -> Vec<f64> {
    (0..SD).map(|_| rng::uniform(rng, -1.0, 1.0)).collect()
}

#[test]
fn mean_mode_is_deterministic() {
    for kind in [PolicyKind::Hierarchical, PolicyKind::Flat] {
        let mut r = seeded(1);
        let p = Policy::new(config(kind), SD, AD, &mut r).unwrap();
        let buf = filled_buffer(&mut r, 5, 6, 2);
        let s = state(&mut r);
        let batch = p.sample_context(&buf, &ctx(), &mut r, &s).unwrap();
        let a = p.act(&s, &batch, ActMode::Mean, &mut r).unwrap();
        let b = p.act(&s, &batch, ActMode::Mean, &mut r).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.action, a.mean);
        assert_eq!(a.mean.len(), AD);
        assert!(a.std.iter().all(|s| *s > 0.0));
    }
}

#[test]
fn evaluate_reproduces_sampled_log_probs() {
    for kind in [PolicyKind::Hierarchical, PolicyKind::Flat] {
        let mut r = seeded(2);
        let p = Policy::new(config(kind), SD, AD, &mut r).unwrap();
        let buf = filled_buffer(&mut r, 3, 5, 1);
        let (mut states, mut batches, mut actions, mut lps, mut values) = (vec![], vec![], vec![], vec![], vec![]);
        for _ in 0..6 {
            let s = state(&mut r);
            let b = p.sample_context(&buf, &ctx(), &mut r, &s).unwrap();
            let a = p.act(&s, &b, ActMode::Sample, &mut r).unwrap();
            states.push(s);
            batches.push(b);
            lps.push(a.log_prob);
            values.push(a.value);
            actions.push(a.action);
        }
        let ev = p.evaluate_actions(&states, &batches, &actions).unwrap();
        for i in 0..6 {
            assert!((ev.log_probs[i] - lps[i]).abs() < 1e-10);
            assert!(ev.values[i].is_finite());
            assert_eq!(ev.values[i], values[i]);
            assert!(ev.entropies[i].is_finite());
        }
        assert!(p.evaluate_actions(&states[..2], &batches, &actions).is_err());
    }
}

#[test]
fn clamped_log_std_gives_tight_samples() {
    let mut r = seeded(3);
    let cfg = PolicyConfig {
        init_log_std: -40.0,
        ..config(PolicyKind::Hierarchical)
    };
    let p = Policy::new(cfg, SD, AD, &mut r).unwrap();
    let buf = filled_buffer(&mut r, 2, 4, 0);
    let s = state(&mut r);
    let batch = p.sample_context(&buf, &ctx(), &mut r, &s).unwrap();
    // σ = e⁻⁵ ≈ 0.0067, so 0.01 is only ~1.48σ: P(|a−μ| < 0.01) ≈ 0.862.
    // The 0.99 bound holds at 3σ ≈ 0.0202.
    let sigma = libm::exp(LOG_STD_MIN);
    let p_inner = libm::erf(0.01 / sigma / libm::sqrt(2.0));
    let n = 10_000;
    let mut within = [0usize; AD];
    let mut within_3sigma = [0usize; AD];
    for _ in 0..n {
        let a = p.act(&s, &batch, ActMode::Sample, &mut r).unwrap();
        for d in 0..AD {
            assert_eq!(a.std[d], libm::exp(LOG_STD_MIN));
            let dev = (a.action[d] - a.mean[d]).abs();
            within[d] += usize::from(dev < 0.01);
            within_3sigma[d] += usize::from(dev < 3.0 * sigma);
        }
    }
    let binomial_sd = libm::sqrt(p_inner * (1.0 - p_inner) / n as f64);
    for d in 0..AD {
        let frac = within[d] as f64 / n as f64;
        assert!((frac - p_inner).abs() < 4.0 * binomial_sd, "{frac} vs {p_inner}");
        assert!(within_3sigma[d] as f64 / n as f64 > 0.99);
    }
}

#[test]
fn actions_are_clamped_but_log_prob_is_not() {
    let mut r = seeded(4);
    let cfg = PolicyConfig {
        init_log_std: 1.5,
        ..config(PolicyKind::Flat)
    };
    let p = Policy::new(cfg, SD, AD, &mut r).unwrap();
    let buf = filled_buffer(&mut r, 1, 3, 0);
    let s = state(&mut r);
    let batch = p.sample_context(&buf, &ctx(), &mut r, &s).unwrap();
    let mut saw_clamp = false;
    for _ in 0..50 {
        let a = p.act(&s, &batch, ActMode::Sample, &mut r).unwrap();
        assert!(a.clamped.iter().all(|v| v.abs() <= 1.0));
        if a.action.iter().any(|v| v.abs() > 1.0) {
            saw_clamp = true;
            let ls: Vec<f64> = a.std.iter().map(|s| libm::log(*s)).collect();
            assert!((a.log_prob - log_prob(&a.mean, &ls, &a.action)).abs() < 1e-12);
        }
    }
    assert!(saw_clamp);
}

#[test]
fn state_dimension_mismatch_is_an_error() {
    let mut r = seeded(5);
    let p = Policy::new(config(PolicyKind::Hierarchical), SD, AD, &mut r).unwrap();
    let buf = filled_buffer(&mut r, 2, 4, 0);
    let s = state(&mut r);
    let batch = p.sample_context(&buf, &ctx(), &mut r, &s).unwrap();
    assert!(p.act(&s[..SD - 1], &batch, ActMode::Mean, &mut r).is_err());
}

#[test]
fn flat_policy_ignores_older_history() {
    let mut r = seeded(6);
    let p = Policy::new(config(PolicyKind::Flat), SD, AD, &mut r).unwrap();
    let mut short = EpisodeBuffer::new(25, AD).unwrap();
    let mut long = EpisodeBuffer::new(25, AD).unwrap();
    for i in 0..30 {
        long.push(random_transition(&mut r, i % 10 == 9));
    }
    let recent: Vec<Transition> = (0..7).map(|i| random_transition(&mut r, i == 2)).collect();
    for t in &recent {
        short.push(t.clone());
        long.push(t.clone());
    }
    let s = state(&mut r);
    let a = p
        .act(
            &s,
            &p.sample_context(&short, &ctx(), &mut r, &s).unwrap(),
            ActMode::Mean,
            &mut r,
        )
        .unwrap();
    let b = p
        .act(
            &s,
            &p.sample_context(&long, &ctx(), &mut r, &s).unwrap(),
            ActMode::Mean,
            &mut r,
        )
        .unwrap();
    assert_eq!(a.action, b.action);
}

#[test]
fn recurrent_memory_carries_across_episodes() {
    let mut r = seeded(7);
    let p = Policy::new(config(PolicyKind::Recurrent), SD, AD, &mut r).unwrap();
    let h = p.recurrent_hidden_dim().unwrap();
    let first_state = state(&mut r);
    let run = |episode_one: &[Transition]| {
        let mut mem = RecurrentMemory::new(h, AD);
        let mut rr = seeded(0);
        for t in episode_one {
            let a = p.act_recurrent(&t.state, &mut mem, ActMode::Mean, &mut rr).unwrap();
            mem.observe(&a.clamped, t.reward);
        }
        p.act_recurrent(&first_state, &mut mem, ActMode::Mean, &mut rr).unwrap()
    };
    let ep_a: Vec<Transition> = (0..5).map(|_| random_transition(&mut r, false)).collect();
    let ep_b: Vec<Transition> = (0..5).map(|_| random_transition(&mut r, false)).collect();
    let a = run(&ep_a);
    let b = run(&ep_b);
    let diff = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-9, "{diff}");

    let mut mem = RecurrentMemory::new(h, AD);
    mem.hidden[0] = 1.0;
    mem.observe(&[0.5, 0.5], -1.0);
    mem.reset();
    assert_eq!(mem, RecurrentMemory::new(h, AD));
}

#[test]
fn recurrent_policy_rejects_window_calls() {
    let mut r = seeded(8);
    let p = Policy::new(config(PolicyKind::Recurrent), SD, AD, &mut r).unwrap();
    let buf = filled_buffer(&mut r, 1, 3, 0);
    let s = state(&mut r);
    assert!(p.sample_context(&buf, &ctx(), &mut r, &s).is_err());
    let w = Policy::new(config(PolicyKind::Hierarchical), SD, AD, &mut r).unwrap();
    let mut mem = RecurrentMemory::new(4, AD);
    assert!(w.act_recurrent(&s, &mut mem, ActMode::Mean, &mut r).is_err());
}

#[test]
fn embeddings_have_model_width_and_are_deterministic() {
    for (kind, concat) in [
        (PolicyKind::Hierarchical, true),
        (PolicyKind::Hierarchical, false),
        (PolicyKind::Flat, true),
    ] {
        let mut r = seeded(9);
        let cfg = PolicyConfig {
            state_concat: concat,
            ..config(kind)
        };
        let p = Policy::new(cfg, SD, AD, &mut r).unwrap();
        let buf = filled_buffer(&mut r, 4, 5, 2);
        let s = state(&mut r);
        let b = p.sample_context(&buf, &ctx(), &mut r, &s).unwrap();
        let e1 = p.export_task_embedding(&s, &b).unwrap();
        let e2 = p.export_task_embedding(&s, &b).unwrap();
        assert_eq!(e1.len(), 16);
        assert_eq!(e1, e2);
    }
}

#[test]
fn ablated_head_ignores_state_features() {
    let mut r = seeded(10);
    let cfg = PolicyConfig {
        state_concat: false,
        ..config(PolicyKind::Hierarchical)
    };
    let p = Policy::new(cfg, SD, AD, &mut r).unwrap();
    assert!(p.params.id_of("phi2.weight").is_none());
    let full = Policy::new(config(PolicyKind::Hierarchical), SD, AD, &mut r).unwrap();
    assert!(full.params.id_of("phi2.weight").is_some());
}
