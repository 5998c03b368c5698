//! The 25-Gaussian ground truth, the toy GAN trained on it, analytic imperfect
//! generators, and a Gaussian-mixture oracle fitted by EM with BIC selection.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu_stack, AdamState, LayerSpec, MlpModel, Mode};
use crate::numeric::{sigmoid, softplus, DenseMatrix, RandomStream};
use crate::source::{Generator, CHUNK_ROWS};

/// Isotropic Gaussian mixture in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<[f64; 2]>,
    /// Per-component standard deviation (covariance `std²·I`).
    pub std: f64,
    pub weights: Vec<f64>,
}

impl Default for MixtureSpec {
    /// Means on the grid `{-2,-1,0,1,2}²`, standard deviation 0.05, equal weights.
    fn default() -> Self {
        let mut means = Vec::with_capacity(25);
        for i in -2..=2 {
            for j in -2..=2 {
                means.push([f64::from(i), f64::from(j)]);
            }
        }
        Self {
            means,
            std: 0.05,
            weights: vec![1.0 / 25.0; 25],
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() || self.means.len() != self.weights.len() {
            return Err(Error::Usage(format!(
                "mixture has {} means and {} weights",
                self.means.len(),
                self.weights.len()
            )));
        }
        if !(self.std > 0.0) || !self.std.is_finite() {
            return Err(Error::Domain(format!("mixture std {} must be positive", self.std)));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Domain("mixture weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("mixture weights sum to {total}")));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture means"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: MixtureSpec = serde_json::from_str(text).map_err(|e| Error::from_json(e, text))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Draws `n` points together with the index of the component each came from.
    pub fn sample_with_labels(&self, n: usize, rng: &mut RandomStream) -> (DenseMatrix, Vec<usize>) {
        let cumulative = cumulative(&self.weights);
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = pick(&cumulative, rng.uniform());
            let [mx, my] = self.means[k];
            data.push(mx + self.std * rng.standard_normal());
            data.push(my + self.std * rng.standard_normal());
            labels.push(k);
        }
        (DenseMatrix::from_raw(n, 2, data), labels)
    }

    pub fn sample(&self, n: usize, rng: &mut RandomStream) -> DenseMatrix {
        self.sample_with_labels(n, rng).0
    }

    /// Log density at `x`, via log-sum-exp over components.
    pub fn log_pdf(&self, x: [f64; 2]) -> f64 {
        let var = self.std * self.std;
        let log_norm = -(2.0 * PI * var).ln();
        let terms = self.means.iter().zip(&self.weights).filter(|(_, w)| **w > 0.0).map(|(m, w)| {
            let dx = x[0] - m[0];
            let dy = x[1] - m[1];
            w.ln() + log_norm - 0.5 * (dx * dx + dy * dy) / var
        });
        log_sum_exp(terms)
    }

    pub fn pdf(&self, x: [f64; 2]) -> f64 {
        self.log_pdf(x).exp()
    }
}

impl Generator for MixtureSpec {
    fn dim(&self) -> usize {
        2
    }

    fn generate(&self, n: usize, rng: &mut RandomStream) -> Result<DenseMatrix> {
        Ok(self.sample(n, rng))
    }
}

/// Draws `n` points from `spec`; `n` must be positive.
pub fn mixture_sample(spec: &MixtureSpec, n: usize, rng: &mut RandomStream) -> Result<DenseMatrix> {
    if n == 0 {
        return Err(Error::Usage("requested zero samples".into()));
    }
    spec.validate()?;
    Ok(spec.sample(n, rng))
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn pick(cumulative: &[f64], u: f64) -> usize {
    let total = cumulative[cumulative.len() - 1];
    let target = u * total;
    cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1)
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Analytic imperfect generator: every component's standard deviation is
/// multiplied by `inflate`, and extra components are placed at the midpoints
/// of horizontally adjacent modes, together carrying `bridge_prob` of the mass.
pub fn perturbed_generator(spec: &MixtureSpec, inflate: f64, bridge_prob: f64) -> Result<MixtureSpec> {
    spec.validate()?;
    if !(inflate >= 1.0) || !inflate.is_finite() {
        return Err(Error::Domain(format!("inflate factor {inflate} must be at least 1")));
    }
    if !(0.0..1.0).contains(&bridge_prob) {
        return Err(Error::Domain(format!("bridge probability {bridge_prob} outside [0, 1)")));
    }
    let mut means = spec.means.clone();
    let mut weights: Vec<f64> = spec.weights.iter().map(|w| w * (1.0 - bridge_prob)).collect();
    if bridge_prob > 0.0 {
        let bridges = horizontal_midpoints(&spec.means);
        if bridges.is_empty() {
            return Err(Error::Usage("mixture has no horizontally adjacent modes to bridge".into()));
        }
        let w = bridge_prob / bridges.len() as f64;
        for b in bridges {
            means.push(b);
            weights.push(w);
        }
    }
    Ok(MixtureSpec {
        means,
        std: spec.std * inflate,
        weights,
    })
}

/// Midpoints between each mode and its nearest right-hand neighbour on the same row.
fn horizontal_midpoints(means: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    for a in means {
        let right = means
            .iter()
            .filter(|b| (b[1] - a[1]).abs() < 1e-12 && b[0] > a[0])
            .min_by(|p, q| p[0].total_cmp(&q[0]));
        if let Some(b) = right {
            out.push([(a[0] + b[0]) / 2.0, a[1]]);
        }
    }
    out
}

/// Density of an estimated or analytic generator distribution.
pub trait Density {
    fn density(&self, x: [f64; 2]) -> f64;
}

impl Density for MixtureSpec {
    fn density(&self, x: [f64; 2]) -> f64 {
        self.pdf(x)
    }
}

impl Density for GmmFit {
    fn density(&self, x: [f64; 2]) -> f64 {
        self.pdf(x)
    }
}

/// Pointwise quotient `p_r(x) / p_g(x)`.
pub fn true_ratio(p_r: &MixtureSpec, p_g: &dyn Density, x: [f64; 2]) -> Result<f64> {
    let num = p_r.pdf(x);
    let den = p_g.density(x);
    if !(den > 0.0) {
        return Err(Error::Domain(format!("generator density vanishes at ({}, {})", x[0], x[1])));
    }
    Ok(num / den)
}

/// Full-covariance Gaussian mixture in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub components: usize,
    pub means: Vec<[f64; 2]>,
    pub covariances: Vec<[[f64; 2]; 2]>,
    pub weights: Vec<f64>,
    /// Total log-likelihood of the fitting data.
    pub log_likelihood: f64,
    pub bic: f64,
}

/// EM stopping and regularization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Stop when the log-likelihood gain drops below `rel_tol·|logL|`.
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Lower bound on covariance eigenvalues.
    pub eig_floor: f64,
    /// Independent k-means++ initializations per component count.
    pub restarts: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-7,
            max_iter: 500,
            eig_floor: 1e-9,
            restarts: 2,
        }
    }
}

/// Result of one EM run at a fixed component count.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub fit: GmmFit,
    /// Log-likelihood after every E-step.
    pub trace: Vec<f64>,
}

impl GmmFit {
    fn component_log_pdf(&self, k: usize, x: [f64; 2]) -> f64 {
        gaussian_log_pdf(x, self.means[k], &self.covariances[k])
    }

    pub fn log_pdf(&self, x: [f64; 2]) -> f64 {
        log_sum_exp((0..self.components).map(|k| self.weights[k].ln() + self.component_log_pdf(k, x)))
    }

    pub fn pdf(&self, x: [f64; 2]) -> f64 {
        self.log_pdf(x).exp()
    }

    /// Posterior component probabilities for every row of `samples`.
    pub fn responsibilities(&self, samples: &DenseMatrix) -> DenseMatrix {
        let k = self.components;
        let mut out = DenseMatrix::zeros(samples.rows(), k);
        let mut logs = vec![0.0; k];
        for (i, row) in samples.row_iter().enumerate() {
            let x = [row[0], row[1]];
            for (c, l) in logs.iter_mut().enumerate() {
                *l = self.weights[c].ln() + self.component_log_pdf(c, x);
            }
            let norm = log_sum_exp(logs.iter().copied());
            for c in 0..k {
                out.as_mut_slice()[i * k + c] = (logs[c] - norm).exp();
            }
        }
        out
    }

    /// Sum of `log_pdf` over rows, evaluated directly.
    pub fn total_log_likelihood(&self, samples: &DenseMatrix) -> f64 {
        samples.row_iter().map(|r| self.log_pdf([r[0], r[1]])).sum()
    }
}

fn gaussian_log_pdf(x: [f64; 2], mu: [f64; 2], cov: &[[f64; 2]; 2]) -> f64 {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let dx = x[0] - mu[0];
    let dy = x[1] - mu[1];
    let quad = (cov[1][1] * dx * dx - 2.0 * cov[0][1] * dx * dy + cov[0][0] * dy * dy) / det;
    -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * quad
}

/// Clamps the eigenvalues of a symmetric 2×2 matrix from below.
fn floor_covariance(c: [[f64; 2]; 2], floor: f64) -> [[f64; 2]; 2] {
    let a = c[0][0];
    let d = c[1][1];
    let b = 0.5 * (c[0][1] + c[1][0]);
    let half_tr = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let l1 = half_tr + disc;
    let l2 = half_tr - disc;
    if l2 >= floor {
        return [[a, b], [b, d]];
    }
    // eigenvector for l1
    let (vx, vy) = if b.abs() > 1e-300 {
        let n = ((l1 - d) * (l1 - d) + b * b).sqrt();
        ((l1 - d) / n, b / n)
    } else if a >= d {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let l1 = l1.max(floor);
    let l2 = l2.max(floor);
    // V diag(l1, l2) Vᵀ with second eigenvector (-vy, vx)
    [
        [l1 * vx * vx + l2 * vy * vy, (l1 - l2) * vx * vy],
        [(l1 - l2) * vx * vy, l1 * vy * vy + l2 * vx * vx],
    ]
}

fn bic(log_likelihood: f64, k: usize, n: usize) -> f64 {
    let params = (6 * k - 1) as f64;
    -2.0 * log_likelihood + params * (n as f64).ln()
}

/// k-means++ seeding followed by a few Lloyd iterations; returns hard labels.
fn kmeans_init(samples: &DenseMatrix, k: usize, rng: &mut RandomStream) -> Vec<usize> {
    let n = samples.rows();
    let pt = |i: usize| [samples.get(i, 0), samples.get(i, 1)];
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut centers = vec![pt(rng.index(n))];
    let mut dist: Vec<f64> = (0..n).map(|i| d2(pt(i), centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.index(n)
        };
        let c = pt(next);
        centers.push(c);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(d2(pt(i), c));
        }
    }
    let mut labels = vec![0; n];
    for _ in 0..10 {
        for (i, l) in labels.iter_mut().enumerate() {
            let p = pt(i);
            *l = (0..k)
                .min_by(|&a, &b| d2(p, centers[a]).total_cmp(&d2(p, centers[b])))
                .unwrap_or(0);
        }
        let mut sums = vec![[0.0; 3]; k];
        for (i, &l) in labels.iter().enumerate() {
            let p = pt(i);
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            sums[l][2] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
    }
    labels
}

/// Runs EM at a fixed component count from a k-means++ start.
pub fn fit_gmm(samples: &DenseMatrix, k: usize, cfg: &EmConfig, rng: &mut RandomStream) -> Result<EmRun> {
    let n = samples.rows();
    if samples.cols() != 2 {
        return Err(Error::Shape(format!("GMM expects 2 columns, got {}", samples.cols())));
    }
    if k == 0 || n < k {
        return Err(Error::Usage(format!("cannot fit {k} components to {n} samples")));
    }
    let labels = kmeans_init(samples, k, rng);
    let mut resp = DenseMatrix::zeros(n, k);
    for (i, &l) in labels.iter().enumerate() {
        resp.as_mut_slice()[i * k + l] = 1.0;
    }
    let mut fit = GmmFit {
        components: k,
        means: vec![[0.0; 2]; k],
        covariances: vec![[[1.0, 0.0], [0.0, 1.0]]; k],
        weights: vec![1.0 / k as f64; k],
        log_likelihood: f64::NEG_INFINITY,
        bic: f64::INFINITY,
    };
    let global = global_covariance(samples, cfg.eig_floor);
    m_step(samples, &resp, &mut fit, cfg.eig_floor, global);
    let mut trace = Vec::new();
    let mut logs = vec![0.0; k];
    for _ in 0..cfg.max_iter {
        let mut ll = 0.0;
        let data = resp.as_mut_slice();
        for (i, row) in samples.row_iter().enumerate() {
            let x = [row[0], row[1]];
            for (c, l) in logs.iter_mut().enumerate() {
                *l = fit.weights[c].ln() + fit.component_log_pdf(c, x);
            }
            let norm = log_sum_exp(logs.iter().copied());
            ll += norm;
            for c in 0..k {
                data[i * k + c] = (logs[c] - norm).exp();
            }
        }
        let prev = trace.last().copied();
        trace.push(ll);
        fit.log_likelihood = ll;
        if let Some(p) = prev {
            if ll - p < cfg.rel_tol * ll.abs() {
                break;
            }
        }
        m_step(samples, &resp, &mut fit, cfg.eig_floor, global);
    }
    // the final E-step matches the parameters held in `fit`
    fit.bic = bic(fit.log_likelihood, k, n);
    Ok(EmRun { fit, trace })
}

fn global_covariance(samples: &DenseMatrix, floor: f64) -> [[f64; 2]; 2] {
    let n = samples.rows() as f64;
    let mx = samples.column(0).iter().sum::<f64>() / n;
    let my = samples.column(1).iter().sum::<f64>() / n;
    let mut c = [[0.0; 2]; 2];
    for r in samples.row_iter() {
        let dx = r[0] - mx;
        let dy = r[1] - my;
        c[0][0] += dx * dx / n;
        c[0][1] += dx * dy / n;
        c[1][1] += dy * dy / n;
    }
    c[1][0] = c[0][1];
    floor_covariance(c, floor)
}

fn m_step(samples: &DenseMatrix, resp: &DenseMatrix, fit: &mut GmmFit, floor: f64, fallback: [[f64; 2]; 2]) {
    let k = fit.components;
    let n = samples.rows() as f64;
    let mut nk = vec![0.0; k];
    let mut mu = vec![[0.0; 2]; k];
    for (i, row) in samples.row_iter().enumerate() {
        let r = resp.row(i);
        for c in 0..k {
            nk[c] += r[c];
            mu[c][0] += r[c] * row[0];
            mu[c][1] += r[c] * row[1];
        }
    }
    for c in 0..k {
        if nk[c] > 1e-12 {
            mu[c][0] /= nk[c];
            mu[c][1] /= nk[c];
        } else {
            mu[c] = fit.means[c];
        }
    }
    let mut cov = vec![[[0.0; 2]; 2]; k];
    for (i, row) in samples.row_iter().enumerate() {
        let r = resp.row(i);
        for c in 0..k {
            let dx = row[0] - mu[c][0];
            let dy = row[1] - mu[c][1];
            cov[c][0][0] += r[c] * dx * dx;
            cov[c][0][1] += r[c] * dx * dy;
            cov[c][1][1] += r[c] * dy * dy;
        }
    }
    for c in 0..k {
        if nk[c] > 1e-12 {
            let s = 1.0 / nk[c];
            let m = [[cov[c][0][0] * s, cov[c][0][1] * s], [cov[c][0][1] * s, cov[c][1][1] * s]];
            fit.covariances[c] = floor_covariance(m, floor);
        } else {
            fit.covariances[c] = fallback;
        }
        fit.weights[c] = (nk[c] / n).max(f64::MIN_POSITIVE);
    }
    let total: f64 = fit.weights.iter().sum();
    fit.weights.iter_mut().for_each(|w| *w /= total);
    fit.means = mu;
}

/// Fits a GMM for every component count in `k_range` and returns the fit with
/// the smallest BIC.
pub fn gmm_fit_em_bic(samples: &DenseMatrix, k_range: RangeInclusive<usize>, cfg: &EmConfig, rng: &mut RandomStream) -> Result<GmmFit> {
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo == 0 || lo > hi {
        return Err(Error::Usage(format!("invalid component range {lo}..={hi}")));
    }
    if samples.rows() < 10 * hi {
        return Err(Error::Usage(format!(
            "{} samples are too few for up to {hi} components",
            samples.rows()
        )));
    }
    let first = samples.row(0);
    if samples.row_iter().all(|r| r == first) {
        let fit = GmmFit {
            components: 1,
            means: vec![[first[0], first[1]]],
            covariances: vec![[[cfg.eig_floor, 0.0], [0.0, cfg.eig_floor]]],
            weights: vec![1.0],
            log_likelihood: 0.0,
            bic: 0.0,
        };
        let ll = fit.total_log_likelihood(samples);
        return Ok(GmmFit {
            log_likelihood: ll,
            bic: bic(ll, 1, samples.rows()),
            ..fit
        });
    }
    let mut best: Option<GmmFit> = None;
    for k in k_range {
        for restart in 0..cfg.restarts.max(1) {
            let mut sub = rng.derive((k as u64) << 16 | restart as u64);
            let run = fit_gmm(samples, k, cfg, &mut sub)?;
            if best.as_ref().is_none_or(|b| run.fit.bic < b.bic) {
                best = Some(run.fit);
            }
        }
    }
    Ok(best.expect("nonempty range"))
}

/// Hyperparameters for the toy GAN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    pub noise_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 512,
            lr: 1e-3,
            beta1: 0.5,
            noise_dim: 2,
            hidden: vec![100, 100, 100],
        }
    }
}

/// Generator and discriminator trained with the standard GAN losses.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGan {
    pub generator: MlpModel,
    /// Ends in a sigmoid head; [`ToyGan::logits`] exposes the pre-sigmoid value.
    pub discriminator: MlpModel,
    pub noise_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct GanFile {
    format_version: u32,
    noise_dim: usize,
    generator: serde_json::Value,
    discriminator: serde_json::Value,
}

impl ToyGan {
    pub fn new(cfg: &GanConfig, dim: usize, rng: &mut RandomStream) -> Result<Self> {
        if cfg.noise_dim == 0 {
            return Err(Error::Usage("noise dimension must be positive".into()));
        }
        let mut gdims = vec![cfg.noise_dim];
        gdims.extend(&cfg.hidden);
        gdims.push(dim);
        let mut ddims = vec![dim];
        ddims.extend(&cfg.hidden);
        ddims.push(1);
        let mut dlayers = relu_stack(&ddims);
        dlayers.push(LayerSpec::SigmoidHead { dim: 1 });
        Ok(Self {
            generator: MlpModel::new(relu_stack(&gdims), false, rng)?,
            discriminator: MlpModel::new(dlayers, false, rng)?,
            noise_dim: cfg.noise_dim,
        })
    }

    /// Pre-sigmoid discriminator output `D̃(x)`.
    pub fn logits(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        chunked(x, |c| self.discriminator.predict_logits(c))
    }

    /// Discriminator probability `D(x) = σ(D̃(x))`.
    pub fn probabilities(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&GanFile {
            format_version: 1,
            noise_dim: self.noise_dim,
            generator: self.generator.checkpoint_value(),
            discriminator: self.discriminator.checkpoint_value(),
        })
        .expect("gan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GanFile = serde_json::from_str(text).map_err(|e| Error::from_json(e, text))?;
        if file.format_version != 1 {
            return Err(Error::Usage(format!("unsupported GAN format_version {}", file.format_version)));
        }
        let generator = MlpModel::from_checkpoint_value(file.generator)?;
        let discriminator = MlpModel::from_checkpoint_value(file.discriminator)?;
        if generator.input_dim() != file.noise_dim || generator.output_dim() != discriminator.input_dim() {
            return Err(Error::Shape("generator and discriminator dimensions disagree".into()));
        }
        Ok(Self {
            generator,
            discriminator,
            noise_dim: file.noise_dim,
        })
    }
}

/// Applies `f` to row chunks of `x` and concatenates the single-column outputs.
pub(crate) fn chunked(x: &DenseMatrix, f: impl Fn(&DenseMatrix) -> Result<DenseMatrix>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.rows());
    let mut start = 0;
    while start < x.rows() {
        let end = (start + CHUNK_ROWS).min(x.rows());
        let y = f(&x.slice_rows(start, end))?;
        out.extend_from_slice(y.as_slice());
        start = end;
    }
    Ok(out)
}

impl Generator for ToyGan {
    fn dim(&self) -> usize {
        self.generator.output_dim()
    }

    fn generate(&self, n: usize, rng: &mut RandomStream) -> Result<DenseMatrix> {
        let mut data = Vec::with_capacity(n * self.dim());
        let mut done = 0;
        while done < n {
            let m = CHUNK_ROWS.min(n - done);
            let z = rng.normal_matrix(m, self.noise_dim, 0.0, 1.0);
            data.extend_from_slice(self.generator.predict(&z)?.as_slice());
            done += m;
        }
        Ok(DenseMatrix::from_raw(n, self.dim(), data))
    }
}

/// One discriminator update on a real and a fake batch; returns `L_D`.
fn discriminator_step(
    disc: &mut MlpModel,
    adam: &mut AdamState,
    real: &DenseMatrix,
    fake: &DenseMatrix,
    rng: &mut RandomStream,
) -> Result<f64> {
    let both = real.vstack(fake)?;
    let (logits, cache) = disc.forward_logits(&both, Mode::Train, rng)?;
    let nr = real.rows() as f64;
    let nf = fake.rows() as f64;
    let mut loss = 0.0;
    let grads: Vec<f64> = logits
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if i < real.rows() {
                loss += softplus(-l) / nr;
                (sigmoid(l) - 1.0) / nr
            } else {
                loss += softplus(l) / nf;
                sigmoid(l) / nf
            }
        })
        .collect();
    let g = disc.backward(&cache, &DenseMatrix::from_raw(both.rows(), 1, grads))?;
    disc.adam_step(adam, &g.params)?;
    Ok(loss)
}

/// Trains a toy GAN on `data` with alternating Adam updates of the
/// discriminator loss `−E log D(x_r) − E log(1 − D(G(z)))` and the generator
/// loss `−E log D(G(z))`.
pub fn train_toy_gan(data: &DenseMatrix, cfg: &GanConfig, rng: &mut RandomStream) -> Result<ToyGan> {
    if data.rows() == 0 {
        return Err(Error::Usage("GAN training data is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let mut init_rng = rng.derive_named("init");
    let mut gan = ToyGan::new(cfg, data.cols(), &mut init_rng)?;
    let mut g_adam = AdamState::new(gan.generator.params().len(), cfg.lr);
    let mut d_adam = AdamState::new(gan.discriminator.params().len(), cfg.lr);
    g_adam.beta1 = cfg.beta1;
    d_adam.beta1 = cfg.beta1;
    let batch = cfg.batch.min(data.rows());
    let steps = (data.rows() / batch).max(1);
    for _ in 0..cfg.epochs {
        let order = rng.permutation(data.rows());
        for s in 0..steps {
            let real = data.select_rows(&order[s * batch..(s + 1) * batch]);
            let z = rng.normal_matrix(batch, gan.noise_dim, 0.0, 1.0);
            let fake = gan.generator.predict(&z)?;
            discriminator_step(&mut gan.discriminator, &mut d_adam, &real, &fake, rng)?;

            let z = rng.normal_matrix(batch, gan.noise_dim, 0.0, 1.0);
            let (fake, g_cache) = gan.generator.forward(&z, Mode::Train, rng)?;
            let (logits, d_cache) = gan.discriminator.forward_logits(&fake, Mode::Train, rng)?;
            let m = batch as f64;
            let dl: Vec<f64> = logits.as_slice().iter().map(|&l| (sigmoid(l) - 1.0) / m).collect();
            let d_grads = gan.discriminator.backward(&d_cache, &DenseMatrix::from_raw(batch, 1, dl))?;
            let g_grads = gan.generator.backward(&g_cache, &d_grads.input)?;
            gan.generator.adam_step(&mut g_adam, &g_grads.params)?;
        }
    }
    Ok(gan)
}

/// Continues training only the discriminator on `real` against fresh
/// generator samples, as done before discriminator rejection sampling.
pub fn finetune_discriminator(gan: &mut ToyGan, real: &DenseMatrix, epochs: usize, batch: usize, lr: f64, rng: &mut RandomStream) -> Result<()> {
    if real.rows() == 0 || batch == 0 {
        return Err(Error::Usage("fine-tuning needs data and a positive batch size".into()));
    }
    let mut adam = AdamState::new(gan.discriminator.params().len(), lr);
    let batch = batch.min(real.rows());
    let steps = (real.rows() / batch).max(1);
    for _ in 0..epochs {
        let order = rng.permutation(real.rows());
        for s in 0..steps {
            let r = real.select_rows(&order[s * batch..(s + 1) * batch]);
            let fake = gan.generate(batch, rng)?;
            discriminator_step(&mut gan.discriminator, &mut adam, &r, &fake, rng)?;
        }
    }
    Ok(())
}
