use proptest::prelude::*;

use ratio_subsampler::evaluation::{ks_two_sample, quality_report};
use ratio_subsampler::losses::{loss_and_ratio_grads, sp_loss, LossKind, PenaltyConfig, SP_LOWER_BOUND};
use ratio_subsampler::samplers::sir_weights;
use ratio_subsampler::world::MixtureSpec;
use ratio_subsampler::DenseMatrix;

/// Right-continuous empirical CDFs compared at every pooled point.
fn brute_force_ks(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&x| (cdf(a, x) - cdf(b, x)).abs())
        .fold(0.0, f64::max)
}

fn ratio_batch() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![0.0..1e-3, 0.0..5.0, 0.0..1e4], 1..64)
}

fn small_sample() -> impl Strategy<Value = Vec<f64>> {
    // few distinct values so ties are common
    prop::collection::vec((-8i32..8).prop_map(|v| f64::from(v) / 4.0), 1..=50)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn sp_loss_is_bounded_below(fake in ratio_batch(), real in ratio_batch()) {
        let l = sp_loss(&fake, &real).unwrap();
        prop_assert!(l > SP_LOWER_BOUND, "loss {l}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn ks_matches_brute_force(a in small_sample(), b in small_sample()) {
        let fast = ks_two_sample(&a, &b).unwrap().statistic;
        prop_assert_eq!(fast, brute_force_ks(&a, &b));
        prop_assert_eq!(fast, ks_two_sample(&b, &a).unwrap().statistic);
        prop_assert!((0.0..=1.0).contains(&fast));
    }

    #[test]
    fn ks_is_invariant_under_increasing_maps(a in small_sample(), b in small_sample()) {
        let f = |v: &Vec<f64>| v.iter().map(|x| (x * 0.7).exp() + 3.0).collect::<Vec<_>>();
        prop_assert_eq!(ks_two_sample(&a, &b).unwrap().statistic, ks_two_sample(&f(&a), &f(&b)).unwrap().statistic);
    }

    #[test]
    fn losses_ignore_sample_order(fake in ratio_batch(), real in ratio_batch(), lambda in 0.0..1.0f64) {
        for kind in LossKind::ALL {
            let cfg = PenaltyConfig::with_lambda(lambda);
            let a = loss_and_ratio_grads(kind, cfg, &fake, &real).unwrap();
            let mut f2 = fake.clone();
            f2.reverse();
            let mut r2 = real.clone();
            r2.rotate_left(real.len() / 2);
            let b = loss_and_ratio_grads(kind, cfg, &f2, &r2).unwrap();
            prop_assert!((a.loss - b.loss).abs() <= 1e-9 * a.loss.abs().max(1.0), "{kind}: {} vs {}", a.loss, b.loss);
        }
    }

    #[test]
    fn sir_weights_sum_to_one(r in ratio_batch()) {
        prop_assume!(r.iter().any(|&v| v > 0.0));
        let w = sir_weights(&r).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quality_report_ignores_order_and_common_shifts(
        pts in prop::collection::vec((-2.5..2.5f64, -2.5..2.5f64), 1..200),
        shift in (-3.0..3.0f64, -3.0..3.0f64),
    ) {
        let spec = MixtureSpec::default();
        let grid = |v: f64| (v * 1024.0).round() / 1024.0;
        let rows: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [grid(x), grid(y)]).collect();
        let base = quality_report(&DenseMatrix::from_rows(&rows).unwrap(), &spec).unwrap();

        let mut reversed = rows.clone();
        reversed.reverse();
        prop_assert_eq!(&base, &quality_report(&DenseMatrix::from_rows(&reversed).unwrap(), &spec).unwrap());

        // dyadic points and shifts keep every difference exact
        let (sx, sy) = ((shift.0 * 64.0).round() / 64.0, (shift.1 * 64.0).round() / 64.0);
        let moved: Vec<[f64; 2]> = rows.iter().map(|p| [p[0] + sx, p[1] + sy]).collect();
        let mut moved_spec = spec.clone();
        moved_spec.means.iter_mut().for_each(|m| { m[0] += sx; m[1] += sy; });
        let shifted = quality_report(&DenseMatrix::from_rows(&moved).unwrap(), &moved_spec).unwrap();
        prop_assert_eq!(base.per_mode_hq_counts, shifted.per_mode_hq_counts);
        prop_assert_eq!(base.modes_recovered, shifted.modes_recovered);
    }
}
