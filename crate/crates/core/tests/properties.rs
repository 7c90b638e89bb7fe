// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use rscope_core::attn::span_distribution;
use rscope_core::behavior::{segment_attractors, SweepPoint};
use rscope_core::fixture::{generate, AttentionProfile, FixtureConfig};
use rscope_core::lens::apply_final_norm;
use rscope_core::probes::{loo_ridge_predictions, score};
use rscope_core::rng::SplitMix64;
use rscope_core::trace::NormKind;

fn dataset(seed: u64, m: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = SplitMix64::new(seed);
    let x = (0..m).map(|_| rng.gaussian_vec(d)).collect();
    let y = (0..m).map(|_| 20.0 * rng.next_f64()).collect();
    (x, y)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn probe_is_permutation_invariant(
        seed in any::<u64>(), m in 3usize..16, d in 1usize..24,
        lambda in 0.01f64..10.0, rot in 1usize..15,
    ) {
        let (x, y) = dataset(seed, m, d);
        let base = loo_ridge_predictions(&x, &y, lambda).unwrap();
        let r = rot % m;
        let mut xs = x.clone();
        let mut ys = y.clone();
        xs.rotate_left(r);
        ys.rotate_left(r);
        let mut shuffled = loo_ridge_predictions(&xs, &ys, lambda).unwrap();
        shuffled.rotate_right(r);
        prop_assert!(close(&shuffled, &base, 1e-9));
        let (_, r2a) = score(&base, &y).unwrap();
        let (_, r2b) = score(&loo_ridge_predictions(&xs, &ys, lambda).unwrap(), &ys).unwrap();
        prop_assert!((r2a - r2b).abs() <= 1e-9);
    }

    #[test]
    fn probe_ignores_constant_feature_shift(
        seed in any::<u64>(), m in 3usize..16, d in 1usize..24,
        lambda in 0.01f64..10.0, shift in -50.0f64..50.0,
    ) {
        let (x, y) = dataset(seed, m, d);
        let base = loo_ridge_predictions(&x, &y, lambda).unwrap();
        let moved: Vec<Vec<f64>> = x
            .iter()
            .map(|row| row.iter().enumerate().map(|(k, v)| v + shift * (k as f64 + 1.0)).collect())
            .collect();
        let got = loo_ridge_predictions(&moved, &y, lambda).unwrap();
        prop_assert!(close(&got, &base, 1e-7));
    }

    #[test]
    fn rms_norm_is_scale_invariant(
        seed in any::<u64>(), d in 2usize..64, k in 0.25f32..8.0,
    ) {
        let mut rng = SplitMix64::new(seed);
        let x: Vec<f32> = rng.gaussian_vec(d).iter().map(|&v| v as f32).collect();
        let w: Vec<f32> = rng.gaussian_vec(d).iter().map(|&v| v as f32).collect();
        let scaled: Vec<f32> = x.iter().map(|v| v * k).collect();
        let a = apply_final_norm(&x, &w, None, NormKind::Rms, 0.0);
        let b = apply_final_norm(&scaled, &w, None, NormKind::Rms, 0.0);
        prop_assert!(close(&a, &b, 1e-5));
    }

    #[test]
    fn span_distribution_sums_to_one(
        seed in any::<u64>(), n in 1usize..16, heads in 1usize..5,
        bos in 0.0f64..0.9, one_hot in any::<bool>(),
    ) {
        let mut cfg = FixtureConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: heads,
            count_direction_seed: seed,
            bos_mass: bos,
            ..FixtureConfig::default()
        };
        if one_hot {
            cfg.attention_profile = AttentionProfile::OneHot { pos: seed as usize % n };
        }
        let t = generate(&cfg, n).unwrap();
        for layer in 1..=3 {
            let p = span_distribution(&t, layer).unwrap();
            prop_assert_eq!(p.len(), n);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn segments_partition_the_sweep(
        outs in prop::collection::vec(prop::option::of(0i64..6), 1..30),
    ) {
        let sweep: Vec<SweepPoint> = outs
            .iter()
            .enumerate()
            .map(|(i, &o)| SweepPoint::new(i as i64 + 1, o))
            .collect();
        let a = segment_attractors(&sweep).unwrap();
        prop_assert_eq!(a.segments.iter().map(|s| s.points).sum::<usize>(), sweep.len());
        prop_assert_eq!(a.segments[0].n_start, 1);
        prop_assert_eq!(a.segments.last().unwrap().n_end, sweep.len() as i64);
        for w in a.segments.windows(2) {
            prop_assert_eq!(w[1].n_start, w[0].n_end + 1);
            prop_assert_ne!(w[0].value, w[1].value);
        }
        for s in &a.segments {
            prop_assert!(s.wrong_points <= s.points);
            prop_assert_eq!(s.attractor, s.value.is_some() && 2 * s.wrong_points > s.points);
        }
    }
}
