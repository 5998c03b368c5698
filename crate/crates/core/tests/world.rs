use std::f64::consts::PI;

use ratio_subsampler::evaluation::quality_report;
use ratio_subsampler::world::{gmm_fit_em_bic, perturbed_generator, true_ratio, EmConfig, GanConfig, MixtureSpec, ToyGan};
use ratio_subsampler::{Generator, RandomStream};

/// Mass of `spec` inside the union of disks of radius `r` around `centers`,
/// by midpoint quadrature in polar coordinates around each center.
fn disk_mass(spec: &MixtureSpec, centers: &[[f64; 2]], r: f64) -> f64 {
    let (nr, nt) = (400, 256);
    let mut total = 0.0;
    for c in centers {
        for i in 0..nr {
            let rho = (i as f64 + 0.5) * r / nr as f64;
            for j in 0..nt {
                let th = (j as f64 + 0.5) * 2.0 * PI / nt as f64;
                let p = [c[0] + rho * th.cos(), c[1] + rho * th.sin()];
                total += spec.pdf(p) * rho * (r / nr as f64) * (2.0 * PI / nt as f64);
            }
        }
    }
    total
}

#[test]
fn perturbed_generator_hq_fraction_matches_quadrature() {
    let spec = MixtureSpec::default();
    let pg = perturbed_generator(&spec, 1.6, 0.2).unwrap();
    let expected = disk_mass(&pg, &spec.means, 0.2);
    let x = pg.sample(100_000, &mut RandomStream::new(17, 0));
    let hq = quality_report(&x, &spec).unwrap().hq_fraction;
    assert!((hq - expected).abs() < 0.01, "empirical {hq}, quadrature {expected}");
}

#[test]
fn true_ratio_averages_to_one_under_the_generator() {
    let spec = MixtureSpec::default();
    let pg = perturbed_generator(&spec, 1.5, 0.1).unwrap();
    let x = pg.sample(100_000, &mut RandomStream::new(4, 0));
    let mean = x.row_iter().map(|r| true_ratio(&spec, &pg, [r[0], r[1]]).unwrap()).sum::<f64>() / x.rows() as f64;
    assert!((mean - 1.0).abs() < 0.05, "mean ratio {mean}");
}

/// Each true mean has exactly one fitted mean within `tol` and vice versa,
/// which for `tol` below half the grid spacing is a perfect matching.
fn matched_within(truth: &[[f64; 2]], fitted: &[[f64; 2]], tol: f64) -> bool {
    let close = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]) < tol;
    truth.len() == fitted.len()
        && truth.iter().all(|t| fitted.iter().filter(|f| close(t, f)).count() == 1)
        && fitted.iter().all(|f| truth.iter().filter(|t| close(t, f)).count() == 1)
}

#[test]
fn em_recovers_the_grid() {
    let spec = MixtureSpec::default();
    let x = spec.sample(50_000, &mut RandomStream::new(8, 0));
    let fit = gmm_fit_em_bic(&x, 24..=26, &EmConfig::default(), &mut RandomStream::new(8, 1)).unwrap();
    assert_eq!(fit.components, 25);
    assert!(matched_within(&spec.means, &fit.means, 0.02));
    assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn untrained_gan_covers_few_modes_and_discriminator_is_a_probability() {
    let spec = MixtureSpec::default();
    let gan = ToyGan::new(&GanConfig::default(), 2, &mut RandomStream::new(1, 0)).unwrap();
    let x = gan.generate(10_000, &mut RandomStream::new(1, 1)).unwrap();
    let q = quality_report(&x, &spec).unwrap();
    // Small random weights squeeze every draw towards one spot.
    assert!(q.modes_recovered <= 3, "{q:?}");
    let probes = RandomStream::new(1, 2).normal_matrix(100_000, 2, 0.0, 3.0);
    assert!(gan.probabilities(&probes).unwrap().iter().all(|&p| p > 0.0 && p < 1.0));
}
