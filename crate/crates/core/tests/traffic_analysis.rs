mod support;

use fractalqos::analysis::{
    coefficient_of_variation, delta_h, estimate_generalized_hurst, estimate_hurst, profile_flow, DEFAULT_Q_GRID,
};
use fractalqos::traffic::{
    fractional_gaussian_noise, generate_cascade_trace, generate_fgn_trace, generate_trace, inject_attacks, SlotLabel,
};
use fractalqos::{AttackSpec, Error, TraceSpec, TrafficTrace};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::rs_hurst;

const N: usize = 1 << 16;

#[test]
fn aggregated_variance_agrees_with_rs_oracle() {
    for &h in &[0.6, 0.7, 0.8, 0.9] {
        for seed in 0..4 {
            let trace = generate_fgn_trace(&TraceSpec::fgn(N, h, 100.0, 30.0, seed)).unwrap();
            let est = estimate_hurst(&trace).unwrap();
            let oracle = rs_hurst(&trace.as_f64());
            assert!((est - oracle).abs() <= 0.07, "H={h} seed={seed}: {est} vs R/S {oracle}");
        }
    }
}

#[test]
fn h08_example_lands_in_band() {
    let trace = generate_fgn_trace(&TraceSpec::fgn(N, 0.8, 100.0, 30.0, 1)).unwrap();
    let est = estimate_hurst(&trace).unwrap();
    assert!((0.75..=0.85).contains(&est), "{est}");
}

#[test]
fn white_noise_and_shuffled_traces_are_near_half() {
    let white = generate_fgn_trace(&TraceSpec::fgn(N, 0.5, 100.0, 30.0, 3)).unwrap();
    let h = estimate_hurst(&white).unwrap();
    assert!((h - 0.5).abs() <= 0.05, "{h}");

    let mut counts = generate_fgn_trace(&TraceSpec::fgn(N, 0.8, 100.0, 30.0, 4)).unwrap().counts;
    counts.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let h = estimate_hurst(&TrafficTrace::from_counts(counts)).unwrap();
    assert!((0.45..=0.55).contains(&h), "{h}");
}

#[test]
fn clipping_stays_rare_at_a_third_of_the_mean() {
    // a count clips when λ + (λ/3)·x < 0, i.e. x < -3
    for seed in 0..5 {
        let x = fractional_gaussian_noise(N, 0.9, seed).unwrap();
        let below = x.iter().filter(|&&v| v < -3.0).count();
        assert!((below as f64) < 0.01 * N as f64, "seed {seed}: {below}");
    }
}

#[test]
fn h2_matches_hurst_on_generated_traces() {
    for (i, &h) in [0.6, 0.7, 0.8, 0.9].iter().enumerate() {
        let trace = generate_fgn_trace(&TraceSpec::fgn(N, h, 100.0, 30.0, 10 + i as u64)).unwrap();
        let est = estimate_hurst(&trace).unwrap();
        let h2 = estimate_generalized_hurst(&trace, &[2.0]).unwrap().h_of_q[0];
        assert!((est - h2).abs() <= 0.1, "H={h}: {est} vs h(2)={h2}");
    }
}

#[test]
fn monofractal_and_cascade_shapes() {
    let fgn = generate_fgn_trace(&TraceSpec::fgn(N, 0.8, 100.0, 30.0, 5)).unwrap();
    let ms = estimate_generalized_hurst(&fgn, &DEFAULT_Q_GRID).unwrap();
    let spread = ms.h_of_q.iter().cloned().fold(f64::MIN, f64::max) - ms.h_of_q.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.15, "{spread}");

    let cascade = generate_cascade_trace(&TraceSpec::fgn(N, 0.8, 100.0, 30.0, 5).with_cascade(0.7)).unwrap();
    let ms = estimate_generalized_hurst(&cascade, &DEFAULT_Q_GRID).unwrap();
    assert!(ms.h_of_q[0] > ms.h_of_q[ms.h_of_q.len() - 1]);
    assert!(ms.fit_r2.iter().all(|r| (0.0..=1.0).contains(r)));
}

#[test]
fn equal_weight_cascade_is_monofractal() {
    let spec = TraceSpec::fgn(N, 0.8, 100.0, 30.0, 6).with_cascade(0.5);
    let trace = generate_cascade_trace(&spec).unwrap();
    let dh = delta_h(&estimate_generalized_hurst(&trace, &DEFAULT_Q_GRID).unwrap()).unwrap();
    assert!(dh.value < 0.15, "{}", dh.value);
}

#[test]
fn delta_h_grows_with_cascade_weight_on_matched_seeds() {
    for seed in 0..3 {
        let dh: Vec<f64> = [0.6, 0.7, 0.8, 0.9]
            .iter()
            .map(|&p| {
                let t = generate_cascade_trace(&TraceSpec::fgn(N, 0.8, 100.0, 30.0, seed).with_cascade(p)).unwrap();
                delta_h(&estimate_generalized_hurst(&t, &DEFAULT_Q_GRID).unwrap()).unwrap().value
            })
            .collect();
        assert!(dh.windows(2).all(|w| w[1] > w[0]), "seed {seed}: {dh:?}");
    }
}

#[test]
fn heavy_cascade_reaches_sigma_three() {
    let t = generate_cascade_trace(&TraceSpec::fgn(N, 0.8, 100.0, 30.0, 2).with_cascade(0.9)).unwrap();
    let best = [1usize, 10, 100, 1000]
        .iter()
        .map(|&w| coefficient_of_variation(&t, w).unwrap())
        .fold(0.0, f64::max);
    assert!(best >= 3.0, "{best}");
    let p = profile_flow(&t).unwrap();
    assert!(p.delta_h.unwrap() > 0.3);
}

#[test]
fn profile_of_fgn() {
    let t = generate_fgn_trace(&TraceSpec::fgn(N, 0.8, 100.0, 30.0, 8)).unwrap();
    let p = profile_flow(&t).unwrap();
    assert!((p.hurst - 0.8).abs() < 0.05);
    assert!(p.delta_h.unwrap() < 0.15);
    assert!((p.lambda - 100.0).abs() < 5.0);
    assert!(matches!(profile_flow(&TrafficTrace::from_counts(vec![4; N])), Err(Error::DegenerateTrace)));
}

#[test]
fn attack_example_scales_window_mean() {
    let base = generate_fgn_trace(&TraceSpec::fgn(1 << 12, 0.8, 100.0, 30.0, 1)).unwrap();
    let hit = inject_attacks(&base, &AttackSpec::new(vec![(100, 200)])).unwrap();
    let mean = hit.counts[100..200].iter().sum::<u64>() as f64 / 100.0;
    assert!((mean - 1000.0).abs() < 100.0, "{mean}");
    assert!(hit.labels[100..200].iter().all(|l| *l == SlotLabel::Attack));
    let err = inject_attacks(&base, &AttackSpec::new(vec![(10, 30), (20, 40)]));
    assert!(matches!(err, Err(Error::OverlappingWindows(..))));
}

proptest! {
    #![proptest_config(support::cases(32))]

    #[test]
    fn generation_is_deterministic(h in 0.55f64..0.95, seed in any::<u64>(), p in prop::option::of(0.5f64..0.95)) {
        let mut spec = TraceSpec::fgn(1 << 10, h, 20.0, 5.0, seed);
        spec.cascade_weight = p;
        let a = generate_trace(&spec).unwrap();
        let b = generate_trace(&spec).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn injection_only_touches_windows(
        seed in any::<u64>(),
        cuts in prop::collection::btree_set(0usize..1024, 0..8),
        alpha in 1.5f64..20.0,
    ) {
        let base = generate_fgn_trace(&TraceSpec::fgn(1 << 10, 0.7, 50.0, 10.0, seed)).unwrap();
        let cuts: Vec<usize> = cuts.into_iter().collect();
        let windows: Vec<(usize, usize)> = cuts.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let atk = AttackSpec { windows: windows.clone(), intensity_multiplier: alpha };
        let hit = inject_attacks(&base, &atk).unwrap();
        for t in 0..base.len() {
            let inside = windows.iter().any(|&(s, e)| (s..e).contains(&t));
            if inside {
                prop_assert_eq!(hit.labels[t], SlotLabel::Attack);
                prop_assert_eq!(hit.counts[t], (base.counts[t] as f64 * alpha).round() as u64);
            } else {
                prop_assert_eq!(hit.labels[t], base.labels[t]);
                prop_assert_eq!(hit.counts[t], base.counts[t]);
            }
        }
    }

    #[test]
    fn scaling_counts_scales_lambda_only(seed in 0u64..1000, k in 2u64..6) {
        let t = generate_fgn_trace(&TraceSpec::fgn(1 << 14, 0.75, 100.0, 30.0, seed)).unwrap();
        let scaled = TrafficTrace::from_counts(t.counts.iter().map(|c| c * k).collect());
        let (a, b) = (profile_flow(&t).unwrap(), profile_flow(&scaled).unwrap());
        prop_assert!((b.lambda - k as f64 * a.lambda).abs() < 1e-9 * b.lambda);
        prop_assert!((a.hurst - b.hurst).abs() < 0.02);
        prop_assert!((a.sigma_var - b.sigma_var).abs() < 0.02);
    }
}
