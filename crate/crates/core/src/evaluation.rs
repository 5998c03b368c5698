//! Sample-quality metrics for the mixture benchmark, the two-sample KS
//! statistic, and estimated-vs-true ratio summaries.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{mean, DenseMatrix};
use crate::source::RatioSource;
use crate::world::{true_ratio, Density, MixtureSpec};

/// Multiple of the component standard deviation within which a sample counts as high quality.
pub const HQ_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityReport {
    pub n_samples: usize,
    pub hq_fraction: f64,
    pub modes_recovered: usize,
    pub n_modes: usize,
    pub per_mode_hq_counts: Vec<usize>,
    pub threshold: f64,
}

/// Index of the nearest mean and the Euclidean distance to it. Ties go to the lower index.
pub fn nearest_mode(means: &[[f64; 2]], x: [f64; 2]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, m) in means.iter().enumerate() {
        let d = (x[0] - m[0]).hypot(x[1] - m[1]);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Assigns each sample to its nearest mean; a sample is high quality when
/// strictly closer than `4·std`, and a mode is recovered when it owns at
/// least one high-quality sample.
pub fn quality_report(samples: &DenseMatrix, spec: &MixtureSpec) -> Result<QualityReport> {
    if samples.rows() == 0 {
        return Err(Error::Usage("quality report needs at least one sample".into()));
    }
    if samples.cols() != 2 {
        return Err(Error::Shape(format!("quality report expects 2 columns, got {}", samples.cols())));
    }
    if spec.means.is_empty() {
        return Err(Error::Usage("mixture has no means".into()));
    }
    let threshold = HQ_SIGMAS * spec.std;
    let mut counts = vec![0usize; spec.means.len()];
    for row in samples.row_iter() {
        let (k, d) = nearest_mode(&spec.means, [row[0], row[1]]);
        if d < threshold {
            counts[k] += 1;
        }
    }
    let hq: usize = counts.iter().sum();
    Ok(QualityReport {
        n_samples: samples.rows(),
        hq_fraction: hq as f64 / samples.rows() as f64,
        modes_recovered: counts.iter().filter(|&&c| c > 0).count(),
        n_modes: spec.means.len(),
        per_mode_hq_counts: counts,
        threshold,
    })
}

/// High-quality flag per sample, using the same rule as [`quality_report`].
pub fn hq_mask(samples: &DenseMatrix, spec: &MixtureSpec) -> Vec<bool> {
    let threshold = HQ_SIGMAS * spec.std;
    samples
        .row_iter()
        .map(|row| nearest_mode(&spec.means, [row[0], row[1]]).1 < threshold)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub n1: usize,
    pub n2: usize,
}

/// Exact two-sample Kolmogorov-Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Usage("KS statistic needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("KS input"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n1, n2) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut stat = 0.0f64;
    while i < n1 || j < n2 {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        while i < n1 && a[i] <= x {
            i += 1;
        }
        while j < n2 && b[j] <= x {
            j += 1;
        }
        stat = stat.max((i as f64 / n1 as f64 - j as f64 / n2 as f64).abs());
    }
    Ok(KsResult { statistic: stat, n1, n2 })
}

/// Mean ratio on the high-quality, low-quality and full sample sets. A subset
/// with no members is reported as `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetMeans {
    pub hq: Option<f64>,
    pub lq: Option<f64>,
    pub all: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioDiagnostics {
    pub estimated: SubsetMeans,
    pub truth: SubsetMeans,
    pub hq_fraction: f64,
}

fn subset_means(values: &[f64], hq: &[bool]) -> SubsetMeans {
    let pick = |flag: bool| -> Option<f64> {
        let v: Vec<f64> = values.iter().zip(hq).filter(|(_, &h)| h == flag).map(|(&v, _)| v).collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    SubsetMeans {
        hq: pick(true),
        lq: pick(false),
        all: mean(values),
    }
}

/// Compares an estimator's ratios on generator samples with `p_r / p_g`.
pub fn ratio_diagnostics(
    estimator: &dyn RatioSource,
    gen_samples: &DenseMatrix,
    spec: &MixtureSpec,
    p_g: &dyn Density,
) -> Result<RatioDiagnostics> {
    if gen_samples.rows() == 0 {
        return Err(Error::Usage("ratio diagnostics need samples".into()));
    }
    if gen_samples.cols() != 2 {
        return Err(Error::Shape(format!("expected 2 columns, got {}", gen_samples.cols())));
    }
    let est = estimator.ratios(gen_samples)?;
    let truth = gen_samples
        .row_iter()
        .map(|r| true_ratio(spec, p_g, [r[0], r[1]]))
        .collect::<Result<Vec<_>>>()?;
    let hq = hq_mask(gen_samples, spec);
    let n_hq = hq.iter().filter(|&&h| h).count();
    Ok(RatioDiagnostics {
        estimated: subset_means(&est, &hq),
        truth: subset_means(&truth, &hq),
        hq_fraction: n_hq as f64 / hq.len() as f64,
    })
}
