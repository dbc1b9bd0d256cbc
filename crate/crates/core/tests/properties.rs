use htrmrl_core::eval::{average_rank, success_rate, CurvePoint, MethodCurve};
use htrmrl_core::memory::{EpisodeBuffer, Transition};
use htrmrl_core::rng::seeded;
use htrmrl_core::{Graph, Tensor};
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..24)
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(x in logits(), c in -100.0f64..100.0) {
        let n = x.len();
        let t = Tensor::new(vec![1, n], x.clone()).unwrap().softmax();
        prop_assert!((t.sum() - 1.0).abs() < 1e-12);
        let shifted = Tensor::new(vec![1, n], x.iter().map(|v| v + c).collect()).unwrap().softmax();
        prop_assert!(t.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..5, x in prop::collection::vec(-20.0f64..20.0, 8)) {
        let d = 8;
        let data: Vec<f64> = (0..rows).flat_map(|r| x.iter().map(move |v| v * (r as f64 + 1.0))).collect();
        let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - x.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-2);
        let mut g = Graph::new();
        let xv = g.input(Tensor::new(vec![rows, d], data).unwrap()).unwrap();
        let gain = g.input(Tensor::full(&[d], 1.0)).unwrap();
        let bias = g.input(Tensor::zeros(&[d])).unwrap();
        let y = g.layer_norm(xv, gain, bias).unwrap();
        for r in 0..rows {
            let row = g.value(y).row(r);
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / d as f64;
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn success_rate_is_permutation_invariant(mut flags in prop::collection::vec(any::<bool>(), 1..50), seed in any::<u64>()) {
        let before = success_rate(&flags).unwrap();
        let mut r = seeded(seed);
        for i in (1..flags.len()).rev() {
            let j = htrmrl_core::rng::index(&mut r, i + 1);
            flags.swap(i, j);
        }
        prop_assert_eq!(before, success_rate(&flags).unwrap());
    }

    #[test]
    fn average_rank_depends_only_on_order(
        rates in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 3),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let build = |f: &dyn Fn(f64) -> f64| -> Vec<MethodCurve> {
            rates.iter().enumerate().map(|(m, per_task)| MethodCurve {
                method: format!("m{m}"),
                points: vec![CurvePoint {
                    env_steps: 1,
                    success: per_task.iter().enumerate().map(|(t, r)| (format!("t{t}"), f(*r))).collect(),
                }],
            }).collect()
        };
        let base = average_rank(&build(&|x| x), 0).unwrap();
        let affine = average_rank(&build(&|x| scale * x + shift), 0).unwrap();
        let cubic = average_rank(&build(&|x| x * x * x + x), 0).unwrap();
        prop_assert_eq!(&base, &affine);
        prop_assert_eq!(&base, &cubic);
        let total: f64 = base.iter().map(|(_, r)| r).sum();
        prop_assert!((total - 6.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_windows_respect_memory_invariants(
        lens in prop::collection::vec(1usize..12, 0..10),
        open in 0usize..6,
        k in 1usize..8,
        s in 1usize..7,
        seed in any::<u64>(),
    ) {
        let mut buf = EpisodeBuffer::new(k, 1).unwrap();
        let mut x = 0.0;
        for &n in &lens {
            for i in 0..n {
                x += 1.0;
                buf.push(Transition { state: vec![x, -x], action: vec![x / 2.0], reward: x, done: i + 1 == n });
            }
        }
        for _ in 0..open {
            x += 1.0;
            buf.push(Transition { state: vec![x, -x], action: vec![x / 2.0], reward: x, done: false });
        }
        prop_assert!(buf.len() <= k);
        prop_assert!(buf.total_transitions() <= k * 12);
        let current = [0.25, -0.75];
        let a = buf.sample_batch(k, s, &mut seeded(seed), &current).unwrap();
        let b = buf.sample_batch(k, s, &mut seeded(seed), &current).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.current_state(2), &current[..]);
        prop_assert!(a.window_mask(k - 1)[s - 1]);
        let f = a.feature_dim;
        for w in 0..k {
            let o = a.origins[w];
            let ep = buf.episodes().find(|e| e.id == o.episode);
            let mask = a.window_mask(w);
            let valid: Vec<usize> = (0..s).filter(|i| mask[*i]).collect();
            // Left padding: valid slots form a suffix.
            prop_assert!(valid.iter().enumerate().all(|(j, i)| *i == s - valid.len() + j));
            let stored = o.end - o.start;
            prop_assert_eq!(valid.len(), stored + usize::from(o.current));
            if stored > 0 {
                let ep = ep.expect("origin episode is stored");
                for (j, t) in ep.transitions[o.start..o.end].iter().enumerate() {
                    let slot = valid[j];
                    let mut want = vec![0.0; f];
                    t.write_features(&mut want);
                    prop_assert_eq!(&a.window(w)[slot * f..(slot + 1) * f], &want[..]);
                }
            }
        }
    }
}
