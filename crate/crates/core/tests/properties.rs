use proptest::prelude::*;

use riskmeta::autodiff::{backward, Tape, TapeMode, Tensor};
use riskmeta::data::{gen_blobs, inject_label_noise, BatchSampler, Replacement};
use riskmeta::learned::{apply, PhiParams};
use riskmeta::model::{cross_entropy_values, MlpSpec};
use riskmeta::risk::{tail_count, RiskFunctional};

fn losses(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..10.0f64, 1..=max_len)
}

fn alpha() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.1), Just(0.25), Just(0.5), 0.05..0.95f64]
}

fn translation_equivariant(a: f64) -> Vec<RiskFunctional> {
    vec![
        RiskFunctional::ExpectedValue,
        RiskFunctional::Cvar { alpha: a },
        RiskFunctional::Icvar { alpha: a },
        RiskFunctional::Trimmed { alpha: a.min(0.45) },
    ]
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn shifting_losses_shifts_the_risk(l in losses(12), a in alpha(), c in 0.0..5.0f64) {
        let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
        let mut fs = translation_equivariant(a);
        fs.push(RiskFunctional::MeanVariance { c: 0.7 });
        for f in fs {
            let (Ok(x), Ok(y)) = (f.evaluate(&l), f.evaluate(&shifted)) else { continue };
            prop_assert!(close(y, x + c, 1e-10), "{f}: {x} + {c} vs {y}");
        }
    }

    #[test]
    fn tail_estimators_are_bounded_and_ordered(l in losses(12), a in alpha()) {
        let lo = l.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for f in translation_equivariant(a) {
            if let Ok(v) = f.evaluate(&l) {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{f} = {v} outside [{lo}, {hi}]");
            }
        }
        let ev = RiskFunctional::ExpectedValue.evaluate(&l).unwrap();
        let cvar = RiskFunctional::Cvar { alpha: a }.evaluate(&l).unwrap();
        let icvar = RiskFunctional::Icvar { alpha: a }.evaluate(&l).unwrap();
        prop_assert!(cvar >= ev - 1e-12 && ev >= icvar - 1e-12);
    }

    #[test]
    fn estimators_ignore_input_order(l in losses(12), a in alpha(), seed in any::<u64>()) {
        let mut p = l.clone();
        let n = p.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            p.swap(i, (s >> 33) as usize % (i + 1));
        }
        let mut fs = translation_equivariant(a);
        fs.push(RiskFunctional::MeanVariance { c: 1.0 });
        fs.push(RiskFunctional::human(2.0));
        for f in fs {
            let (Ok(x), Ok(y)) = (f.evaluate(&l), f.evaluate(&p)) else { continue };
            prop_assert!(close(x, y, 1e-12), "{f}: {x} vs {y}");
        }
    }

    #[test]
    fn positive_scaling(l in losses(12), a in alpha(), k in 0.1..10.0f64) {
        let scaled: Vec<f64> = l.iter().map(|v| v * k).collect();
        let mut fs = translation_equivariant(a);
        fs.push(RiskFunctional::human(2.0));
        for f in fs {
            let (Ok(x), Ok(y)) = (f.evaluate(&l), f.evaluate(&scaled)) else { continue };
            prop_assert!(close(y, k * x, 1e-10), "{f}: {k}·{x} vs {y}");
        }
        let mean = RiskFunctional::ExpectedValue.evaluate(&l).unwrap();
        let var = RiskFunctional::MeanVariance { c: 1.0 }.evaluate(&l).unwrap() - mean;
        let mv = RiskFunctional::MeanVariance { c: 0.5 }.evaluate(&scaled).unwrap();
        prop_assert!(close(mv, k * mean + 0.5 * k * k * var, 1e-9));
    }

    #[test]
    fn head_is_a_convex_combination(
        pairs in prop::collection::vec((-10.0..10.0f64, 0.0..10.0f64), 1..=16)
    ) {
        let (logits, l): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let phi = PhiParams::from_logits(logits).unwrap();
        let v = phi.apply_values(&l).unwrap();
        let lo = l.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        prop_assert!((phi.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let mut rev = l.clone();
        rev.reverse();
        prop_assert_eq!(v.to_bits(), phi.apply_values(&rev).unwrap().to_bits());
    }

    #[test]
    fn head_gradient_matches_finite_differences(
        pairs in prop::collection::vec((-2.0..2.0f64, 0.0..5.0f64), 2..=8)
    ) {
        let (logits, l): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let tape = Tape::new(TapeMode::FirstOrder);
        let phi = tape.var(Tensor::vector(logits.clone()));
        let out = apply(&phi, &tape.constant(Tensor::vector(l.clone()))).unwrap();
        let g = backward(&out, std::slice::from_ref(&phi), false).unwrap();
        let g = g[0].value();
        let h = 1e-5;
        for i in 0..logits.len() {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (PhiParams::from_logits(p).unwrap().apply_values(&l).unwrap()
                - PhiParams::from_logits(m).unwrap().apply_values(&l).unwrap())
                / (2.0 * h);
            prop_assert!((g.data()[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "{} vs {fd}", g.data()[i]);
        }
    }

    #[test]
    fn head_expresses_tail_functionals(l in losses(16), a in alpha()) {
        let b = l.len();
        let k = tail_count(a, b);
        let ones = |top: usize, count: usize| -> Vec<f64> {
            (0..b).map(|i| if i >= top && i < top + count { 30.0 } else { -30.0 }).collect()
        };
        let t = tail_count(a.min(0.45), b);
        let mut cases = vec![
            (RiskFunctional::Cvar { alpha: a }, ones(0, k)),
            (RiskFunctional::Icvar { alpha: a }, ones(b - k, k)),
        ];
        if 2 * t < b {
            cases.push((RiskFunctional::Trimmed { alpha: a.min(0.45) }, ones(t, b - 2 * t)));
        }
        for (f, logits) in cases {
            let want = f.evaluate(&l).unwrap();
            let got = PhiParams::from_logits(logits).unwrap().apply_values(&l).unwrap();
            prop_assert!((got - want).abs() <= 1e-3, "{f}: {got} vs {want}");
        }
    }

    #[test]
    fn sort_then_inverse_gather_is_identity(x in prop::collection::vec(-5.0..5.0f64, 1..=10)) {
        let tape = Tape::new(TapeMode::FirstOrder);
        let v = tape.var(Tensor::vector(x.clone()));
        let (sorted, perm) = v.sort_desc().unwrap();
        let mut inv = vec![0; perm.len()];
        for (pos, &i) in perm.iter().enumerate() {
            inv[i] = pos;
        }
        let back = sorted.gather(&inv).unwrap();
        prop_assert_eq!(back.value().data().to_vec(), x.clone());
        let w: Vec<f64> = (0..x.len()).map(|i| i as f64 + 1.0).collect();
        let y = back.mul(&tape.constant(Tensor::vector(w.clone()))).unwrap().sum().unwrap();
        let g = backward(&y, std::slice::from_ref(&v), false).unwrap();
        prop_assert_eq!(g[0].value().data().to_vec(), w);
    }

    #[test]
    fn tape_replay_is_bitwise(x in prop::collection::vec(-3.0..3.0f64, 1..=8)) {
        let tape = Tape::new(TapeMode::HigherOrder);
        let v = tape.var(Tensor::vector(x));
        let y = v.exp().unwrap().mul(&v.relu().unwrap()).unwrap().softmax().unwrap().square().unwrap().sum().unwrap();
        let before = tape.values();
        let replayed = tape.replay().unwrap();
        prop_assert_eq!(before.len(), replayed.len());
        for (a, b) in before.iter().zip(&replayed) {
            let (a, b): (Vec<u64>, Vec<u64>) =
                (a.data().iter().map(|v| v.to_bits()).collect(), b.data().iter().map(|v| v.to_bits()).collect());
            prop_assert_eq!(a, b);
        }
        prop_assert!(y.item().is_finite());
    }

    #[test]
    fn cross_entropy_is_stable_and_shift_invariant(
        row in prop::collection::vec(-20.0..20.0f64, 2..=6),
        shift in -100.0..100.0f64,
        pick in any::<prop::sample::Index>(),
    ) {
        let c = row.len();
        let label = pick.index(c);
        let loss = cross_entropy_values(&Tensor::matrix(1, c, row.clone()), &[label]).unwrap()[0];
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let loss2 = cross_entropy_values(&Tensor::matrix(1, c, shifted), &[label]).unwrap()[0];
        prop_assert!(loss >= 0.0);
        prop_assert!((loss - loss2).abs() <= 1e-12 * loss.max(1.0) * (1.0 + shift.abs() / 10.0));
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let naive = -(row[label].exp() / z).ln();
        prop_assert!((loss - naive).abs() <= 1e-12 * naive.abs().max(1.0));
    }

    #[test]
    fn label_noise_touches_only_masked_labels(seed in any::<u64>(), frac in 0.0..=1.0f64) {
        let ds = gen_blobs(seed, 60, 4, 3, 1.0).unwrap();
        let noisy = inject_label_noise(&ds, frac, seed ^ 1).unwrap();
        prop_assert_eq!(noisy.features(), ds.features());
        let mask = noisy.noise_mask().unwrap();
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), (frac * 60.0).round() as usize);
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                prop_assert_eq!(noisy.labels()[i], ds.labels()[i]);
            }
        }
    }

    #[test]
    fn sampler_covers_each_index_once_per_epoch(n in 1usize..80, b in 1usize..16, seed in any::<u64>()) {
        prop_assume!(b <= n);
        let mut s = BatchSampler::new(n, b, seed, Replacement::WithoutReplacement).unwrap();
        let mut t = BatchSampler::new(n, b, seed, Replacement::WithoutReplacement).unwrap();
        let per_epoch = n / b;
        let mut seen = vec![0usize; n];
        for _ in 0..per_epoch {
            let batch = s.next_batch();
            prop_assert_eq!(&batch, &t.next_batch());
            for i in batch {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c <= 1));
        prop_assert_eq!(seen.iter().sum::<usize>(), per_epoch * b);
    }

    #[test]
    fn mlp_loss_gradient_matches_finite_differences(seed in 0u64..500) {
        let spec = MlpSpec::new(vec![3, 4, 3], seed).unwrap();
        let params = spec.init_params();
        let x = Tensor::matrix(2, 3, vec![0.3, -0.8, 0.5, 1.1, 0.2, -0.4]);
        let labels = [0, 2];
        let f = |p: &riskmeta::model::ModelParams| {
            cross_entropy_values(&spec.predict(p, &x).unwrap(), &labels).unwrap().iter().sum::<f64>()
        };
        let tape = Tape::new(TapeMode::FirstOrder);
        let vars = params.to_vars(&tape);
        let logits = spec.forward(&vars, &tape.constant(x.clone())).unwrap();
        let loss = riskmeta::model::cross_entropy_per_sample(&logits, &labels).unwrap().sum().unwrap();
        let grads = backward(&loss, &vars, false).unwrap();
        let h = 1e-5;
        for (t, g) in grads.iter().enumerate() {
            for j in 0..g.value().len() {
                let bump = |d: f64| {
                    let mut vals: Vec<Tensor> = params.values().cloned().collect();
                    vals[t].data_mut()[j] += d;
                    f(&params.with_values(vals))
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let a = g.value().data()[j];
                prop_assert!((a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-4), "tensor {t}[{j}]: {a} vs {fd}");
            }
        }
    }
}
