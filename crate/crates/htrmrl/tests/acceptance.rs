//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 4 to 6 need tens of CPU-hours at the stated budget. They run
//! only with `HTRMRL_ACCEPTANCE_LONG=1`; otherwise they print `NOT RUN`.
//! `HTRMRL_ACCEPTANCE_STEPS` and `HTRMRL_ACCEPTANCE_SEEDS` shrink those runs
//! for a scaled-down look; the line then says so and the result does not
//! count as the criterion.
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use htrmrl::commands::train_run;
use htrmrl::config::RunConfig;
use htrmrl_core::envs::{Family, Split};
use htrmrl_core::eval::{
    average_rank, count_attention, mean_and_standard_error, measure_attention, silhouette, success_rate, tied_ranks,
    CurvePoint, MethodCurve,
};
use htrmrl_core::metarl::{
    adapt_and_eval, checkpoint_eval, collect_embeddings, collect_rollouts, compute_gae, gae, init_policy, meta_train,
    ppo_loss, EvalSummary, TrainConfig,
};
use htrmrl_core::policy::{entropy, log_prob, Policy, PolicyConfig, PolicyKind};
use htrmrl_core::rng::{self, seeded, Prng};
use htrmrl_core::transformer::{EncoderConfig, HierarchicalEncoder};
use htrmrl_core::{Grads, Graph, ParamStore, Tensor};

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

// Criterion 1: instrumented attention counts against the closed forms.
fn attention_oracle() -> Check {
    let mut r = seeded(2024);
    let pick = |r: &mut Prng, xs: &[usize]| xs[rng::index(r, xs.len())];
    for _ in 0..20 {
        let k = 1 + rng::index(&mut r, 64);
        let s = 1 + rng::index(&mut r, 64);
        let h = pick(&mut r, &[1, 2, 4]);
        let l1 = pick(&mut r, &[1, 2, 4]);
        let l2 = pick(&mut r, &[1, 2, 4]);
        let m = measure_attention(k, s, 4, h, l1, l2, &mut r).map_err(|e| e.to_string())?;
        let (k64, s64, h64) = (k as u64, s as u64, h as u64);
        let hier = l1 as u64 * k64 * h64 * s64 * s64 + l2 as u64 * h64 * k64 * k64;
        let flat = (l1 + l2) as u64 * h64 * (k64 * s64) * (k64 * s64);
        ensure(
            m.intra + m.inter == hier,
            format!(
                "K={k} S={s} H={h} L1={l1} L2={l2}: counted {} vs {hier}",
                m.intra + m.inter
            ),
        )?;
        ensure(
            m.flat == flat,
            format!("K={k} S={s} H={h}: flat counted {} vs {flat}", m.flat),
        )?;
    }
    let c = count_attention(25, 5, 4, 1, 1, 1).map_err(|e| e.to_string())?;
    ensure(
        c.hierarchical_scores == 1250 && c.flat_same_depth_scores == 15625,
        "reference row counts",
    )?;
    ensure(
        c.ratio_same_depth == 12.5,
        format!("reference ratio {}", c.ratio_same_depth),
    )?;
    Ok("20 random tuples exact; K=25 S=5 H=1 ratio 12.5".into())
}

fn encoder(r: &mut Prng) -> (ParamStore, HierarchicalEncoder) {
    let cfg = EncoderConfig {
        d_model: 16,
        heads: 4,
        d_ff: 32,
        blocks: 2,
    };
    let mut store = ParamStore::new();
    let enc = HierarchicalEncoder::new(&mut store, r, 10, cfg, cfg).expect("valid encoder");
    (store, enc)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// Criterion 2: T2 ignores the order of past windows; T1 does not.
fn permutation_invariance() -> Check {
    let mut r = seeded(7);
    let mut worst: f64 = 0.0;
    let mut sensitive = 0;
    for _ in 0..100 {
        let (store, enc) = encoder(&mut r);
        let k = 3 + rng::index(&mut r, 30);
        let s = 3 + rng::index(&mut r, 8);
        let x = Tensor::from_fn(&[k * s, 10], |_| rng::normal(&mut r));
        let mask = vec![true; k * s];
        let mut g = Graph::inference();
        let zs = enc
            .encode_windows(&mut g, &store, x.clone(), k, s, &mask)
            .map_err(|e| e.to_string())?;
        let z_seq = g.value(zs).clone();
        let task = |z: Tensor| -> Result<Vec<f64>, String> {
            let mut g = Graph::inference();
            let v = g.input(z).map_err(|e| e.to_string())?;
            let out = enc.encode_inter(&mut g, &store, v).map_err(|e| e.to_string())?;
            Ok(g.value(out).data().to_vec())
        };
        let base = task(z_seq.clone())?;
        let mut order: Vec<usize> = (0..k - 1).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng::index(&mut r, i + 1));
        }
        order.push(k - 1);
        let permuted = Tensor::new(vec![k, 16], order.iter().flat_map(|i| z_seq.row(*i).to_vec()).collect())
            .map_err(|e| e.to_string())?;
        worst = worst.max(max_diff(&base, &task(permuted)?));

        // Swap two transitions of the first window ahead of its read-out row.
        let mut rows: Vec<Vec<f64>> = (0..s).map(|i| x.row(i).to_vec()).collect();
        let a = rng::index(&mut r, s - 1);
        let b = (a + 1 + rng::index(&mut r, s - 2)) % (s - 1);
        rows.swap(a, b);
        let w0 = Tensor::new(vec![s, 10], x.data()[..s * 10].to_vec()).map_err(|e| e.to_string())?;
        let w1 = Tensor::new(vec![s, 10], rows.concat()).map_err(|e| e.to_string())?;
        let enc_one = |w: Tensor| -> Result<Vec<f64>, String> {
            let mut g = Graph::inference();
            let out = enc
                .encode_windows(&mut g, &store, w, 1, s, &vec![true; s])
                .map_err(|e| e.to_string())?;
            Ok(g.value(out).data().to_vec())
        };
        if max_diff(&enc_one(w0)?, &enc_one(w1)?) > 1e-6 {
            sensitive += 1;
        }
    }
    ensure(worst < 1e-6, format!("T2 change {worst:.3e} under permutation"))?;
    ensure(sensitive >= 90, format!("T1 order-sensitive in {sensitive}/100 trials"))?;
    Ok(format!(
        "T2 max change {worst:.1e}; T1 order-sensitive in {sensitive}/100"
    ))
}

// Criterion 3: central differences of the full PPO loss at d_model = 16.
fn gradient_fidelity() -> Check {
    let mut run = RunConfig {
        policy: PolicyConfig {
            d_model: 16,
            heads: 2,
            d_ff: 32,
            intra_blocks: 1,
            inter_blocks: 1,
            head_hidden: 16,
            ..PolicyConfig::default()
        },
        train: TrainConfig {
            tasks_per_batch: 2,
            episodes_per_task: 2,
            k: 3,
            s: 3,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    run.env.params.horizon = 4;
    let dist = run.env.distribution().map_err(|e| e.to_string())?;
    let cfg = &run.train;
    let mut policy = init_policy(&run.policy, cfg).map_err(|e| e.to_string())?;
    let mut batch = collect_rollouts(&policy, &dist, cfg, &mut seeded(1)).map_err(|e| e.to_string())?;
    compute_gae(&mut batch, dist.params.gamma, cfg.gae_lambda).map_err(|e| e.to_string())?;
    let mut r = seeded(2);
    for t in policy.params.values_mut() {
        for v in t.data_mut() {
            *v += 0.02 * rng::normal(&mut r);
        }
    }
    let items = batch.indices();
    let loss_at = |p: &Policy| -> f64 {
        let mut g = Graph::new();
        let (l, _) = ppo_loss(p, &batch, &items, cfg, &mut g).expect("loss evaluates");
        g.value(l).item()
    };
    let mut g = Graph::new();
    let (loss, _) = ppo_loss(&policy, &batch, &items, cfg, &mut g).map_err(|e| e.to_string())?;
    let mut grads = Grads::zeros_like(&policy.params);
    g.backward_into(loss, &mut grads).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let (mut worst, mut checked): (f64, usize) = (0.0, 0);
    for pi in 0..policy.params.len() {
        for j in 0..policy.params.values()[pi].len() {
            let orig = policy.params.values()[pi].data()[j];
            policy.params.values_mut()[pi].data_mut()[j] = orig + h;
            let up = loss_at(&policy);
            policy.params.values_mut()[pi].data_mut()[j] = orig - h;
            let down = loss_at(&policy);
            policy.params.values_mut()[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.values()[pi].data()[j];
            if analytic.abs() > 1e-8 {
                checked += 1;
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
            }
        }
    }
    ensure(worst < 1e-4, format!("max relative error {worst:.3e}"))?;
    Ok(format!(
        "{checked} of {} parameters checked, max relative error {worst:.2e}",
        policy.params.num_scalars()
    ))
}

fn micro() -> Result<RunConfig, String> {
    RunConfig::load(&configs().join("micro.toml"), &[]).map_err(|e| e.to_string())
}

// Criterion 7: byte-identical metrics and frozen parameters during adaptation.
fn determinism() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = micro()?.for_seed(11);
    let a = train_run(&cfg, root.path().join("a"), true).map_err(|e| e.to_string())?;
    let b = train_run(&cfg, root.path().join("b"), true).map_err(|e| e.to_string())?;
    let read = |p: &Path| std::fs::read(p.join("metrics.csv")).map_err(|e| e.to_string());
    let (ma, mb) = (read(&a.dir)?, read(&b.dir)?);
    ensure(ma == mb, "metrics.csv differs between identical runs")?;

    let policy = init_policy(&cfg.policy, &cfg.train).map_err(|e| e.to_string())?;
    let dist = cfg.env.distribution().map_err(|e| e.to_string())?;
    let before = policy.params.checksum();
    let mut r = seeded(3);
    for split in [Split::Train, Split::Test] {
        let task = dist.sample_task(split, &mut r).map_err(|e| e.to_string())?;
        adapt_and_eval(&policy, &task, 3, &cfg.train.context(), &dist.params, &mut r).map_err(|e| e.to_string())?;
    }
    ensure(
        policy.params.checksum() == before,
        "adapt_and_eval changed the parameters",
    )?;
    Ok(format!(
        "{} identical metrics bytes; checksum {before:016x} unchanged",
        ma.len()
    ))
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= tol, format!("{what}: {a} vs {b}"))
}

// Criterion 8: metric unit cases against hand-computed values.
fn metric_units() -> Check {
    let e = |x: htrmrl_core::Error| x.to_string();
    close(
        success_rate(&[true, false, true, true]).map_err(e)?,
        0.75,
        0.0,
        "success_rate",
    )?;
    ensure(success_rate(&[]).is_err(), "success_rate of nothing must fail")?;

    ensure(tied_ranks(&[0.9, 0.5, 0.9, 0.1]) == [1.5, 3.0, 1.5, 4.0], "tie rule")?;
    let curve = |m: &str, a: f64, b: f64| MethodCurve {
        method: m.into(),
        points: vec![CurvePoint {
            env_steps: 1,
            success: [("a".to_string(), a), ("b".to_string(), b)].into_iter().collect(),
        }],
    };
    let ranks = average_rank(&[curve("x", 1.0, 0.5), curve("y", 1.0, 0.2), curve("z", 0.0, 0.9)], 0).map_err(e)?;
    // Task a: x,y tie at 1.5, z 3. Task b: z 1, x 2, y 3.
    let want = [1.75, 2.25, 2.0];
    for ((_, got), w) in ranks.iter().zip(want) {
        close(*got, w, 0.0, "average_rank")?;
    }

    let (adv, ret) = gae(&[1.0, 1.0], &[0.0, 0.0], &[false, true], 0.5, 1.0).map_err(e)?;
    close(adv[0], 1.5, 1e-12, "gae t0")?;
    close(adv[1], 1.0, 1e-12, "gae t1")?;
    close(ret[0], 1.5, 1e-12, "return t0")?;
    let (adv, _) = gae(&[0.0, 2.0], &[1.0, 0.5], &[false, true], 0.9, 0.5).map_err(e)?;
    // δ1 = 2 − 0.5 = 1.5; δ0 = 0 + 0.9·0.5 − 1 = −0.55; A0 = δ0 + 0.45·δ1.
    close(adv[1], 1.5, 1e-12, "gae δ1")?;
    close(adv[0], -0.55 + 0.45 * 1.5, 1e-12, "gae A0")?;

    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    close(log_prob(&[0.0], &[0.0], &[0.0]), -0.5 * ln2pi, 1e-12, "log N(0;0,1)")?;
    let lp = log_prob(&[1.0, -1.0], &[0.5_f64.ln(), 0.0], &[2.0, 0.0]);
    let want = -0.5 * 4.0 - 0.5_f64.ln() - 0.5 * ln2pi + (-0.5 - 0.5 * ln2pi);
    close(lp, want, 1e-12, "diagonal log-prob")?;
    close(entropy(&[0.0, 0.0]), 1.0 + ln2pi, 1e-12, "entropy of N(0, I₂)")?;
    close(entropy(&[1.0]), 0.5 * (1.0 + ln2pi) + 1.0, 1e-12, "entropy σ = e")?;
    Ok("success_rate, tie rule, average_rank, GAE, log-prob, entropy exact".into())
}

struct LongBudget {
    steps: Option<u64>,
    seeds: Option<usize>,
}

impl LongBudget {
    fn from_env() -> Option<Self> {
        if std::env::var("HTRMRL_ACCEPTANCE_LONG").as_deref() != Ok("1") {
            return None;
        }
        let num = |k: &str| std::env::var(k).ok().and_then(|v| v.parse().ok());
        Some(LongBudget {
            steps: num("HTRMRL_ACCEPTANCE_STEPS"),
            seeds: num("HTRMRL_ACCEPTANCE_SEEDS").map(|n: u64| n as usize),
        })
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.steps {
            cfg.train.meta_steps = s;
            cfg.train.eval_interval = 0;
        }
        if let Some(n) = self.seeds {
            cfg.seeds.truncate(n.max(1));
        }
    }

    fn scaled(&self) -> bool {
        self.steps.is_some() || self.seeds.is_some()
    }
}

fn overall(rows: &[EvalSummary], split: Split) -> f64 {
    let multi = rows.iter().any(|e| e.split == split && e.family.is_none());
    rows.iter()
        .find(|e| e.split == split && (e.family.is_none() || !multi))
        .map_or(0.0, |e| e.success_rate)
}

fn train_final(cfg: &RunConfig, seed: u64, label: &str) -> Result<(Policy, Vec<EvalSummary>), String> {
    let c = cfg.for_seed(seed);
    let dist = c.env.distribution().map_err(|e| e.to_string())?;
    let t = Instant::now();
    let out = meta_train(&c.policy, &c.train, &dist, &mut |_, _| Ok(())).map_err(|e| e.to_string())?;
    let rows = checkpoint_eval(&out.policy, &dist, &c.train, out.env_steps).map_err(|e| e.to_string())?;
    eprintln!(
        "  {label} seed {seed}: {} steps in {:.0}s, train {:.3}, test {:.3}",
        out.env_steps,
        t.elapsed().as_secs_f64(),
        overall(&rows, Split::Train),
        overall(&rows, Split::Test)
    );
    Ok((out.policy, rows))
}

// Criterion 4: REACH parametric variations.
fn reach_learning(b: &LongBudget) -> Check {
    let mut cfg = RunConfig::load(&configs().join("reach.toml"), &[]).map_err(|e| e.to_string())?;
    b.apply(&mut cfg);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &seed in &cfg.seeds {
        let (_, rows) = train_final(&cfg, seed, "reach")?;
        train.push(overall(&rows, Split::Train));
        test.push(overall(&rows, Split::Test));
    }
    let (tm, ts) = mean_and_standard_error(&train).map_err(|e| e.to_string())?;
    let (vm, vs) = mean_and_standard_error(&test).map_err(|e| e.to_string())?;
    let msg = format!(
        "{} seeds x {} steps: train {tm:.3} ± {ts:.3}, test {vm:.3} ± {vs:.3}",
        cfg.seeds.len(),
        cfg.train.meta_steps
    );
    ensure(tm >= 0.9 && vm >= 0.8, msg.clone())?;
    Ok(msg)
}

struct FamilyRuns {
    method: String,
    test_mean: f64,
    test_se: f64,
    /// Seed-mean final success per test family.
    per_family: std::collections::BTreeMap<String, f64>,
    silhouettes: Vec<f64>,
}

fn family_runs(cfg: &RunConfig, kind: PolicyKind) -> Result<FamilyRuns, String> {
    let mut c = cfg.clone();
    c.policy.kind = kind;
    let dist = c.env.distribution().map_err(|e| e.to_string())?;
    let mut test = Vec::new();
    let mut fam: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    let mut silhouettes = Vec::new();
    for &seed in &c.seeds {
        let (policy, rows) = train_final(&c, seed, kind.name())?;
        test.push(overall(&rows, Split::Test));
        for r in rows.iter().filter(|r| r.split == Split::Test) {
            if let Some(f) = r.family {
                fam.entry(f.name().into()).or_default().push(r.success_rate);
            }
        }
        if kind != PolicyKind::Recurrent {
            // Same task stream for every method and seed.
            let emb = collect_embeddings(
                &policy,
                &dist,
                Split::Train,
                40,
                5,
                &c.train.context(),
                &mut seeded(seed ^ 0xE3B),
            )
            .map_err(|e| e.to_string())?;
            let vecs: Vec<&[f64]> = emb.iter().map(|e| e.values.as_slice()).collect();
            let labels: Vec<Family> = emb.iter().map(|e| e.family).collect();
            silhouettes.push(silhouette(&vecs, &labels).map_err(|e| e.to_string())?);
        }
    }
    let (test_mean, test_se) = mean_and_standard_error(&test).map_err(|e| e.to_string())?;
    Ok(FamilyRuns {
        method: kind.name().into(),
        test_mean,
        test_se,
        per_family: fam
            .into_iter()
            .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
            .collect(),
        silhouettes,
    })
}

// Criteria 5 and 6 share their training runs.
fn held_out_families(b: &LongBudget) -> (Outcome, Outcome) {
    let run = || -> Result<Vec<FamilyRuns>, String> {
        let mut cfg = RunConfig::load(&configs().join("mln.toml"), &[]).map_err(|e| e.to_string())?;
        b.apply(&mut cfg);
        [PolicyKind::Hierarchical, PolicyKind::Flat, PolicyKind::Recurrent]
            .into_iter()
            .map(|k| family_runs(&cfg, k))
            .collect()
    };
    let runs = match run() {
        Ok(r) => r,
        Err(e) => return (Outcome::Fail(e.clone()), Outcome::Fail(e)),
    };
    let curves: Vec<MethodCurve> = runs
        .iter()
        .map(|r| MethodCurve {
            method: r.method.clone(),
            points: vec![CurvePoint {
                env_steps: 0,
                success: r.per_family.clone(),
            }],
        })
        .collect();
    let c5 = match average_rank(&curves, 0) {
        Ok(ranks) => {
            let desc: Vec<String> = runs
                .iter()
                .zip(&ranks)
                .map(|(r, (_, rank))| format!("{} test {:.3} ± {:.3} rank {rank:.2}", r.method, r.test_mean, r.test_se))
                .collect();
            let msg = desc.join("; ");
            let ordered =
                runs[0].test_mean >= runs[1].test_mean && ranks[0].1 <= ranks[1].1 && ranks[1].1 <= ranks[2].1;
            if ordered {
                Outcome::Pass(msg)
            } else {
                Outcome::Fail(msg)
            }
        }
        Err(e) => Outcome::Fail(e.to_string()),
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (sh, sf) = (mean(&runs[0].silhouettes), mean(&runs[1].silhouettes));
    let msg = format!("silhouette htrmrl {sh:.3} vs flat {sf:.3}");
    let c6 = if sh > sf {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    };
    (c5, c6)
}

fn report(n: usize, o: &Outcome, secs: f64) -> bool {
    let (tag, msg, good) = match o {
        Outcome::Pass(m) => ("PASS", m, true),
        Outcome::Fail(m) => ("FAIL", m, false),
        Outcome::NotRun(m) => ("NOT RUN", m, true),
    };
    println!("criterion {n}: {tag} [{secs:.1}s] {msg}");
    good
}

fn timed(f: impl FnOnce() -> Check) -> (Outcome, f64) {
    let t = Instant::now();
    let o = match f() {
        Ok(m) => Outcome::Pass(m),
        Err(m) => Outcome::Fail(m),
    };
    (o, t.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    // Accept and ignore libtest flags such as `--nocapture` or filters.
    let mut all_good = true;
    let quick: [(usize, fn() -> Check); 3] = [
        (1, attention_oracle),
        (2, permutation_invariance),
        (3, gradient_fidelity),
    ];
    for (n, f) in quick {
        let (o, s) = timed(f);
        all_good &= report(n, &o, s);
    }
    let long = LongBudget::from_env();
    let skipped = "needs ~2e6 env steps per seed (about 9 CPU-hours per run on one core); set HTRMRL_ACCEPTANCE_LONG=1";
    match &long {
        None => {
            for n in 4..=6 {
                all_good &= report(n, &Outcome::NotRun(skipped.into()), 0.0);
            }
        }
        Some(b) => {
            let scaled = if b.scaled() {
                " (scaled-down budget; not the criterion)"
            } else {
                ""
            };
            let (o, s) = timed(|| reach_learning(b));
            let o = match o {
                Outcome::Pass(m) => Outcome::Pass(m + scaled),
                Outcome::Fail(m) => Outcome::Fail(m + scaled),
                other => other,
            };
            all_good &= report(4, &o, s);
            let t = Instant::now();
            let (c5, c6) = held_out_families(b);
            let s = t.elapsed().as_secs_f64();
            let tag = |o: Outcome| match o {
                Outcome::Pass(m) => Outcome::Pass(m + scaled),
                Outcome::Fail(m) => Outcome::Fail(m + scaled),
                other => other,
            };
            // Directional criteria: a failure is reported, not hidden.
            all_good &= report(5, &tag(c5), s);
            all_good &= report(6, &tag(c6), 0.0);
        }
    }
    for (n, f) in [(7, determinism as fn() -> Check), (8, metric_units)] {
        let (o, s) = timed(f);
        all_good &= report(n, &o, s);
    }
    if all_good {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
