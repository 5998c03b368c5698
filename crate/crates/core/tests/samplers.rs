use proptest::prelude::*;

use ratio_subsampler::samplers::{mh_subsample, rs_subsample, sir_subsample, MhConfig, RsConfig, SirConfig};
use ratio_subsampler::source::RatioFn;
use ratio_subsampler::{DenseMatrix, Generator, RandomStream, Result};

struct Square;

impl Generator for Square {
    fn dim(&self) -> usize {
        2
    }

    fn generate(&self, n: usize, rng: &mut RandomStream) -> Result<DenseMatrix> {
        DenseMatrix::from_vec(n, 2, (0..2 * n).map(|_| 2.0 * rng.uniform() - 1.0).collect())
    }
}

fn base_ratio(x: &[f64]) -> f64 {
    (-(x[0] * x[0] + 3.0 * x[1] * x[1])).exp()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Powers of two keep the rescaling exact, so the accepted ids must match.
    #[test]
    fn accepted_ids_ignore_a_constant_ratio_scale(seed in 0u64..1000, exponent in -6i32..7) {
        let c = 2f64.powi(exponent);
        let plain = RatioFn(base_ratio);
        let scaled = RatioFn(move |x: &[f64]| c * base_ratio(x));
        let real = DenseMatrix::from_rows(&[[0.1, 0.0], [-0.2, 0.1], [0.0, -0.3]]).unwrap();
        let stream = RandomStream::new(seed, 0);

        let cfg = RsConfig { burn_in: 500, ..RsConfig::new(200) };
        let a = rs_subsample(&Square, &plain, &cfg, &mut stream.derive_named("rs")).unwrap().ids;
        let b = rs_subsample(&Square, &scaled, &cfg, &mut stream.derive_named("rs")).unwrap().ids;
        prop_assert_eq!(a, b);

        let cfg = MhConfig::new(50);
        let a = mh_subsample(&Square, &plain, &real, &cfg, &mut stream.derive_named("mh")).unwrap().ids;
        let b = mh_subsample(&Square, &scaled, &real, &cfg, &mut stream.derive_named("mh")).unwrap().ids;
        prop_assert_eq!(a, b);

        let cfg = SirConfig { pool_size: 2000, target_count: 300 };
        let a = sir_subsample(&Square, &plain, &cfg, &mut stream.derive_named("sir")).unwrap().ids;
        let b = sir_subsample(&Square, &scaled, &cfg, &mut stream.derive_named("sir")).unwrap().ids;
        prop_assert_eq!(a, b);
    }
}

#[test]
fn rs_keeps_only_draws_the_ratio_allows() {
    let half = RatioFn(|x: &[f64]| if x[0] > 0.0 { 1.0 } else { 0.0 });
    let out = rs_subsample(&Square, &half, &RsConfig { burn_in: 200, ..RsConfig::new(1000) }, &mut RandomStream::new(4, 0)).unwrap();
    assert_eq!(out.samples.rows(), 1000);
    assert!(out.samples.row_iter().all(|r| r[0] > 0.0));
}

#[test]
fn rs_refuses_an_all_zero_ratio() {
    let zero = RatioFn(|_: &[f64]| 0.0);
    assert!(rs_subsample(&Square, &zero, &RsConfig { burn_in: 100, ..RsConfig::new(10) }, &mut RandomStream::new(1, 0)).is_err());
}
