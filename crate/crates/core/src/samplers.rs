//! Ratio-driven subsampling of generator output: rejection sampling,
//! independence Metropolis-Hastings, sampling-importance-resampling, and the
//! discriminator-based baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ln_one_minus_exp, pairwise_sum, sigmoid, DenseMatrix, RandomStream};
use crate::source::{Generator, RatioSource};
use crate::world::ToyGan;

/// Proposals evaluated per ratio-network call in the sequential samplers.
const PROPOSAL_BATCH: usize = 4096;
/// Chains advanced together in one block of the Metropolis-Hastings sampler.
const CHAIN_BLOCK: usize = 1024;
/// Clamp applied to discriminator probabilities before forming odds.
pub const ODDS_CLAMP: f64 = 1e-12;
/// Largest calibrator slope magnitude.
pub const CALIBRATION_SLOPE_CAP: f64 = 50.0;

/// Accepted samples plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerOutput {
    pub samples: DenseMatrix,
    /// For RS and DRS the ordinal of each accepted proposal, for SIR the pool
    /// index, for MH `chain_slot · K + step` of the chain's last accepted move.
    pub ids: Vec<u64>,
    pub diagnostics: SamplerDiagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SamplerDiagnostics {
    pub proposals: u64,
    /// MH chains discarded because they never left the real initializer.
    pub discarded_chains: u64,
    /// Final `M` for RS or `log M` for DRS.
    pub bound: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsConfig {
    pub burn_in: usize,
    pub target_count: usize,
    pub max_proposals: u64,
}

impl RsConfig {
    pub fn new(target_count: usize) -> Self {
        Self {
            burn_in: 50_000,
            target_count,
            max_proposals: 1_000_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhConfig {
    pub chain_len: usize,
    pub target_count: usize,
    /// Restarts allowed per output before giving up.
    pub max_restarts: usize,
}

impl MhConfig {
    pub fn new(target_count: usize) -> Self {
        Self {
            chain_len: 100,
            target_count,
            max_restarts: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SirConfig {
    pub pool_size: usize,
    pub target_count: usize,
}

impl SirConfig {
    pub fn new(target_count: usize) -> Self {
        Self {
            pool_size: 20_000,
            target_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrsConfig {
    pub gamma_percentile: f64,
    pub epsilon: f64,
    pub batch: usize,
    /// Fakes used for the initial `log M` estimate.
    pub burn_in: usize,
    pub target_count: usize,
    pub max_proposals: u64,
}

impl DrsConfig {
    pub fn new(target_count: usize) -> Self {
        Self {
            gamma_percentile: 95.0,
            epsilon: 1e-14,
            batch: 1000,
            burn_in: 10_000,
            target_count,
            max_proposals: 1_000_000_000,
        }
    }
}

fn check_ratios(r: &[f64], n: usize) -> Result<()> {
    if r.len() != n {
        return Err(Error::Shape(format!("ratio source returned {} values for {n} rows", r.len())));
    }
    if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Domain("ratio source emitted a negative or non-finite ratio".into()));
    }
    Ok(())
}

fn draw_with_ratios<G: Generator + ?Sized, R: RatioSource + ?Sized>(
    gen: &G,
    ratios: &R,
    n: usize,
    rng: &mut RandomStream,
) -> Result<(DenseMatrix, Vec<f64>)> {
    let x = gen.generate(n, rng)?;
    let r = ratios.ratios(&x)?;
    check_ratios(&r, n)?;
    Ok((x, r))
}

/// Rejection sampling with a running maximum: `M` starts as the largest
/// ratio among `burn_in` fakes, every later proposal raises it if needed, and
/// a proposal is kept with probability `r / M`.
pub fn rs_subsample<G: Generator + ?Sized, R: RatioSource + ?Sized>(
    gen: &G,
    ratios: &R,
    cfg: &RsConfig,
    rng: &mut RandomStream,
) -> Result<SamplerOutput> {
    if cfg.burn_in == 0 {
        return Err(Error::Usage("rejection sampling burn-in must be positive".into()));
    }
    let mut gen_rng = rng.derive_named("proposals");
    let mut acc_rng = rng.derive_named("accept");
    let (_, burn) = draw_with_ratios(gen, ratios, cfg.burn_in, &mut gen_rng)?;
    let mut m = burn.iter().copied().fold(0.0, f64::max);
    if m == 0.0 {
        return Err(Error::DegenerateWeights("every burn-in ratio is zero".into()));
    }

    let dim = gen.dim();
    let mut data = Vec::with_capacity(cfg.target_count * dim);
    let mut ids = Vec::with_capacity(cfg.target_count);
    let mut proposals = 0u64;
    while ids.len() < cfg.target_count {
        if proposals >= cfg.max_proposals {
            return Err(Error::Progress(format!(
                "rejection sampling accepted {} of {} after {proposals} proposals",
                ids.len(),
                cfg.target_count
            )));
        }
        let (x, r) = draw_with_ratios(gen, ratios, PROPOSAL_BATCH, &mut gen_rng)?;
        for (i, &ri) in r.iter().enumerate() {
            m = m.max(ri);
            let u = acc_rng.uniform();
            if m > 0.0 && u < ri / m {
                data.extend_from_slice(x.row(i));
                ids.push(proposals);
            }
            proposals += 1;
            if ids.len() == cfg.target_count {
                break;
            }
        }
    }
    Ok(SamplerOutput {
        samples: DenseMatrix::from_raw(ids.len(), dim, data),
        ids,
        diagnostics: SamplerDiagnostics {
            proposals,
            bound: Some(m),
            ..Default::default()
        },
    })
}

/// Independence Metropolis-Hastings acceptance probability `min(1, r'/r)`.
///
/// A chain sitting at ratio 0 accepts any proposal.
#[inline]
pub fn mh_acceptance(r_state: f64, r_proposal: f64) -> f64 {
    if r_state <= 0.0 {
        1.0
    } else {
        (r_proposal / r_state).min(1.0)
    }
}

struct BlockResult {
    rows: Vec<f64>,
    ids: Vec<u64>,
    moved: Vec<bool>,
}

fn run_chain_block<G: Generator + ?Sized, R: RatioSource + ?Sized>(
    gen: &G,
    ratios: &R,
    real: &DenseMatrix,
    slots: &[usize],
    chain_len: usize,
    mut rng: RandomStream,
) -> Result<BlockResult> {
    let b = slots.len();
    let dim = real.cols();
    let init: Vec<usize> = (0..b).map(|_| rng.index(real.rows())).collect();
    let start = real.select_rows(&init);
    let mut r_state = ratios.ratios(&start)?;
    check_ratios(&r_state, b)?;
    let mut state = start.into_vec();
    let mut moved = vec![false; b];
    let mut ids = vec![0u64; b];
    for k in 0..chain_len {
        let (x, r) = draw_with_ratios(gen, ratios, b, &mut rng)?;
        for c in 0..b {
            let u = rng.uniform();
            if u < mh_acceptance(r_state[c], r[c]) {
                state[c * dim..(c + 1) * dim].copy_from_slice(x.row(c));
                r_state[c] = r[c];
                moved[c] = true;
                ids[c] = (slots[c] * chain_len + k) as u64;
            }
        }
    }
    Ok(BlockResult { rows: state, ids, moved })
}

/// One independence Metropolis-Hastings chain per output, started at a real
/// sample and run for `chain_len` steps. Chains that never move off the real
/// initializer are rerun. Chains advance in blocks on the rayon pool, each
/// block with its own derived stream, so output does not depend on the
/// thread count.
pub fn mh_subsample<G: Generator + ?Sized, R: RatioSource + ?Sized>(
    gen: &G,
    ratios: &R,
    real: &DenseMatrix,
    cfg: &MhConfig,
    rng: &mut RandomStream,
) -> Result<SamplerOutput> {
    if real.rows() == 0 {
        return Err(Error::Usage("MH needs real samples to initialize chains".into()));
    }
    if cfg.chain_len == 0 {
        return Err(Error::Usage("MH chain length must be positive".into()));
    }
    if real.cols() != gen.dim() {
        return Err(Error::Shape(format!("real data has {} columns, generator emits {}", real.cols(), gen.dim())));
    }
    let dim = real.cols();
    let mut out = vec![0.0; cfg.target_count * dim];
    let mut ids = vec![0u64; cfg.target_count];
    let mut pending: Vec<usize> = (0..cfg.target_count).collect();
    let mut diag = SamplerDiagnostics::default();
    let mut round = 0u64;
    while !pending.is_empty() {
        if round > cfg.max_restarts as u64 {
            return Err(Error::Progress(format!(
                "{} MH chains still on their real initializer after {} restarts",
                pending.len(),
                cfg.max_restarts
            )));
        }
        let round_rng = rng.derive(round);
        let blocks: Vec<&[usize]> = pending.chunks(CHAIN_BLOCK).collect();
        let results = blocks
            .par_iter()
            .enumerate()
            .map(|(i, slots)| run_chain_block(gen, ratios, real, slots, cfg.chain_len, round_rng.derive(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mut still = Vec::new();
        for (slots, res) in blocks.iter().zip(results) {
            for (c, &slot) in slots.iter().enumerate() {
                if res.moved[c] {
                    out[slot * dim..(slot + 1) * dim].copy_from_slice(&res.rows[c * dim..(c + 1) * dim]);
                    ids[slot] = res.ids[c];
                } else {
                    still.push(slot);
                }
            }
        }
        diag.proposals += (pending.len() * cfg.chain_len) as u64;
        diag.discarded_chains += still.len() as u64;
        pending = still;
        round += 1;
    }
    Ok(SamplerOutput {
        samples: DenseMatrix::from_raw(cfg.target_count, dim, out),
        ids,
        diagnostics: diag,
    })
}

/// Runs a single chain from `initial` and returns the state after every step.
pub fn mh_chain<G: Generator + ?Sized, R: RatioSource + ?Sized>(
    gen: &G,
    ratios: &R,
    initial: &[f64],
    steps: usize,
    rng: &mut RandomStream,
) -> Result<DenseMatrix> {
    let dim = initial.len();
    if dim != gen.dim() {
        return Err(Error::Shape(format!("initial state has {dim} entries, generator emits {}", gen.dim())));
    }
    let start = DenseMatrix::from_vec(1, dim, initial.to_vec())?;
    let mut r_state = ratios.ratios(&start)?[0];
    let mut state = initial.to_vec();
    let mut trace = Vec::with_capacity(steps * dim);
    let mut done = 0;
    while done < steps {
        let n = PROPOSAL_BATCH.min(steps - done);
        let (x, r) = draw_with_ratios(gen, ratios, n, rng)?;
        for (i, &ri) in r.iter().enumerate() {
            if rng.uniform() < mh_acceptance(r_state, ri) {
                state.copy_from_slice(x.row(i));
                r_state = ri;
            }
            trace.extend_from_slice(&state);
        }
        done += n;
    }
    Ok(DenseMatrix::from_raw(steps, dim, trace))
}

/// Normalized importance weights `r_i / Σ r_j`.
pub fn sir_weights(ratios: &[f64]) -> Result<Vec<f64>> {
    check_ratios(ratios, ratios.len())?;
    let total = pairwise_sum(ratios);
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights(format!("all {} pool ratios are zero", ratios.len())));
    }
    Ok(ratios.iter().map(|r| r / total).collect())
}

/// Draws a pool of fakes and resamples it with replacement in proportion to
/// the normalized ratios.
pub fn sir_subsample<G: Generator + ?Sized, R: RatioSource + ?Sized>(
    gen: &G,
    ratios: &R,
    cfg: &SirConfig,
    rng: &mut RandomStream,
) -> Result<SamplerOutput> {
    if cfg.pool_size == 0 {
        return Err(Error::Usage("SIR pool size must be positive".into()));
    }
    let mut diag = SamplerDiagnostics::default();
    if cfg.pool_size < cfg.target_count {
        diag.warnings.push(format!(
            "pool of {} is smaller than the {} requested samples",
            cfg.pool_size, cfg.target_count
        ));
    }
    let mut pool_rng = rng.derive_named("pool");
    let mut pick_rng = rng.derive_named("resample");
    let (pool, r) = draw_with_ratios(gen, ratios, cfg.pool_size, &mut pool_rng)?;
    let w = sir_weights(&r)?;
    let mut cum = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for wi in &w {
        acc += wi;
        cum.push(acc);
    }
    let idx: Vec<usize> = (0..cfg.target_count)
        .map(|_| {
            let u = pick_rng.uniform() * acc;
            cum.partition_point(|&c| c <= u).min(cum.len() - 1)
        })
        .collect();
    diag.proposals = cfg.pool_size as u64;
    Ok(SamplerOutput {
        samples: pool.select_rows(&idx),
        ids: idx.iter().map(|&i| i as u64).collect(),
        diagnostics: diag,
    })
}

/// Source of discriminator logits `D̃(x)`.
pub trait LogitSource: Sync {
    fn logits(&self, x: &DenseMatrix) -> Result<Vec<f64>>;
}

impl<L: LogitSource + ?Sized> LogitSource for &L {
    fn logits(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        (**self).logits(x)
    }
}

impl LogitSource for ToyGan {
    fn logits(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        ToyGan::logits(self, x)
    }
}

/// Wraps a per-row function as a [`LogitSource`].
pub struct LogitFn<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> LogitSource for LogitFn<F> {
    fn logits(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        Ok(x.row_iter().map(|r| (self.0)(r)).collect())
    }
}

/// `F(x) = D̃ − log M − ln(1 − exp(D̃ − log M − ε))`, before the `γ` shift.
pub fn drs_score(logit: f64, log_m: f64, epsilon: f64) -> f64 {
    let d = logit - log_m;
    d - ln_one_minus_exp(d - epsilon)
}

/// Linearly interpolated percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Usage("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::Domain(format!("percentile {q} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Discriminator rejection sampling: accept with probability `σ(F(x) − γ)`,
/// where `γ` is the configured percentile of `F` over each proposal batch.
pub fn drs_baseline<G: Generator + ?Sized, L: LogitSource + ?Sized>(
    gen: &G,
    logits: &L,
    cfg: &DrsConfig,
    rng: &mut RandomStream,
) -> Result<SamplerOutput> {
    if !(cfg.gamma_percentile > 0.0 && cfg.gamma_percentile < 100.0) {
        return Err(Error::Usage(format!("gamma percentile {} outside (0, 100)", cfg.gamma_percentile)));
    }
    if !(cfg.epsilon > 0.0) || cfg.batch == 0 || cfg.burn_in == 0 {
        return Err(Error::Usage("DRS needs positive epsilon, batch and burn-in".into()));
    }
    let mut gen_rng = rng.derive_named("proposals");
    let mut acc_rng = rng.derive_named("accept");
    let burn = gen.generate(cfg.burn_in, &mut gen_rng)?;
    let mut log_m = logits.logits(&burn)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let dim = gen.dim();
    let mut data = Vec::with_capacity(cfg.target_count * dim);
    let mut ids = Vec::with_capacity(cfg.target_count);
    let mut proposals = 0u64;
    while ids.len() < cfg.target_count {
        if proposals >= cfg.max_proposals {
            return Err(Error::Progress(format!("DRS accepted {} after {proposals} proposals", ids.len())));
        }
        let x = gen.generate(cfg.batch, &mut gen_rng)?;
        let l = logits.logits(&x)?;
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("discriminator logits"));
        }
        log_m = l.iter().copied().fold(log_m, f64::max);
        let f: Vec<f64> = l.iter().map(|&li| drs_score(li, log_m, cfg.epsilon)).collect();
        let gamma = percentile(&f, cfg.gamma_percentile)?;
        for (i, fi) in f.iter().enumerate() {
            if acc_rng.uniform() < sigmoid(fi - gamma) {
                data.extend_from_slice(x.row(i));
                ids.push(proposals);
            }
            proposals += 1;
            if ids.len() == cfg.target_count {
                break;
            }
        }
    }
    Ok(SamplerOutput {
        samples: DenseMatrix::from_raw(ids.len(), dim, data),
        ids,
        diagnostics: SamplerDiagnostics {
            proposals,
            bound: Some(log_m),
            ..Default::default()
        },
    })
}

/// Monotone logistic map `D̃ ↦ σ(a·D̃ + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticCalibrator {
    pub slope: f64,
    pub intercept: f64,
}

impl LogisticCalibrator {
    pub fn apply(&self, logit: f64) -> f64 {
        sigmoid(self.slope * logit + self.intercept)
    }
}

/// Maximum-likelihood logistic fit of real (label 1) against fake (label 0)
/// logits by Newton's method. The slope is capped at
/// [`CALIBRATION_SLOPE_CAP`] in magnitude; once capped, only the intercept
/// keeps moving. Constant logits give the prior-rate constant calibrator.
pub fn calibrate_discriminator(logits_on_real: &[f64], logits_on_fake: &[f64]) -> Result<LogisticCalibrator> {
    if logits_on_real.is_empty() || logits_on_fake.is_empty() {
        return Err(Error::Usage("calibration needs real and fake logits".into()));
    }
    if logits_on_real.iter().chain(logits_on_fake).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("calibration logits"));
    }
    let n1 = logits_on_real.len() as f64;
    let n0 = logits_on_fake.len() as f64;
    let prior = (n1 / n0).ln();
    let first = logits_on_real[0];
    if logits_on_real.iter().chain(logits_on_fake).all(|&v| v == first) {
        return Ok(LogisticCalibrator {
            slope: 0.0,
            intercept: prior,
        });
    }
    let data: Vec<(f64, f64)> = logits_on_real
        .iter()
        .map(|&x| (x, 1.0))
        .chain(logits_on_fake.iter().map(|&x| (x, 0.0)))
        .collect();
    let (mut a, mut b) = (0.0, prior);
    let mut slope_fixed = false;
    for _ in 0..100 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(x, y) in &data {
            let p = sigmoid(a * x + b);
            let w = p * (1.0 - p);
            ga += (y - p) * x;
            gb += y - p;
            haa += w * x * x;
            hab += w * x;
            hbb += w;
        }
        let (da, db) = if slope_fixed {
            (0.0, if hbb > 0.0 { gb / hbb } else { 0.0 })
        } else {
            let det = haa * hbb - hab * hab;
            if det > 1e-300 {
                ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det)
            } else {
                (ga.signum() * CALIBRATION_SLOPE_CAP, 0.0)
            }
        };
        a += da;
        b += db;
        if a.abs() >= CALIBRATION_SLOPE_CAP {
            a = CALIBRATION_SLOPE_CAP.copysign(a);
            slope_fixed = true;
        }
        if da.abs().max(db.abs()) < 1e-8 {
            break;
        }
    }
    Ok(LogisticCalibrator { slope: a, intercept: b })
}

/// How a discriminator value is turned into a density ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscriminatorForm {
    /// `D / (1 − D)` from a probability.
    Odds,
    /// `exp(D̃)` from a logit.
    Exp,
}

pub fn ratio_from_discriminator(kind: DiscriminatorForm, value: f64) -> Result<f64> {
    match kind {
        DiscriminatorForm::Odds => {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Domain(format!("discriminator probability {value} outside [0, 1]")));
            }
            let d = value.clamp(ODDS_CLAMP, 1.0 - ODDS_CLAMP);
            Ok(d / (1.0 - d))
        }
        DiscriminatorForm::Exp => {
            let r = value.exp();
            if r.is_finite() {
                Ok(r)
            } else {
                Err(Error::NonFinite("exp of discriminator logit"))
            }
        }
    }
}

/// Ratios read off a discriminator, optionally through a calibrator.
pub struct DiscriminatorRatio<L> {
    pub logits: L,
    pub form: DiscriminatorForm,
    pub calibrator: Option<LogisticCalibrator>,
}

impl<L: LogitSource> RatioSource for DiscriminatorRatio<L> {
    fn ratios(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        self.logits
            .logits(x)?
            .into_iter()
            .map(|l| match (self.calibrator, self.form) {
                (Some(c), _) => ratio_from_discriminator(DiscriminatorForm::Odds, c.apply(l)),
                (None, DiscriminatorForm::Odds) => ratio_from_discriminator(DiscriminatorForm::Odds, sigmoid(l)),
                (None, DiscriminatorForm::Exp) => ratio_from_discriminator(DiscriminatorForm::Exp, l),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::RatioFn;

    struct Uniform1d;

    impl Generator for Uniform1d {
        fn dim(&self) -> usize {
            1
        }

        fn generate(&self, n: usize, rng: &mut RandomStream) -> Result<DenseMatrix> {
            DenseMatrix::from_vec(n, 1, (0..n).map(|_| rng.uniform()).collect())
        }
    }

    #[test]
    fn mh_acceptance_cases() {
        assert_eq!(mh_acceptance(1.0, 2.0), 1.0);
        assert_eq!(mh_acceptance(2.0, 1.0), 0.5);
        assert_eq!(mh_acceptance(0.0, 0.0), 1.0);
        assert_eq!(mh_acceptance(0.0, 3.0), 1.0);
    }

    #[test]
    fn sir_weight_normalization() {
        assert_eq!(sir_weights(&[1.0, 3.0]).unwrap(), vec![0.25, 0.75]);
        assert!(matches!(sir_weights(&[0.0, 0.0]), Err(Error::DegenerateWeights(_))));
        let w = sir_weights(&[0.1; 7]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_ratio_rs_accepts_everything() {
        let out = rs_subsample(&Uniform1d, &RatioFn(|_: &[f64]| 0.7), &RsConfig { burn_in: 10, ..RsConfig::new(500) }, &mut RandomStream::new(3, 0)).unwrap();
        assert_eq!(out.samples.rows(), 500);
        assert_eq!(out.diagnostics.proposals, 500);
        assert_eq!(out.ids, (0..500).collect::<Vec<u64>>());
    }

    #[test]
    fn drs_reference_values() {
        let f = drs_score(-1.0, 0.0, 1e-300);
        assert!((f - (-0.541_324_854_612_918_1)).abs() < 1e-12);
        assert!((sigmoid(f) - (-1.0f64).exp()).abs() < 1e-12);
        let top = drs_score(0.0, 0.0, 1e-14);
        assert!((top - 1e-14f64.ln().abs()).abs() < 1e-3);
        assert!(sigmoid(top) > 1.0 - 1e-12);
    }

    #[test]
    fn percentile_splits_the_batch() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let g = percentile(&v, 95.0).unwrap();
        let above = v.iter().filter(|&&x| x - g > 0.0).count();
        assert!((above as f64 / 1000.0 - 0.05).abs() <= 0.001);
    }

    #[test]
    fn ratio_from_discriminator_cases() {
        assert_eq!(ratio_from_discriminator(DiscriminatorForm::Odds, 0.5).unwrap(), 1.0);
        assert_eq!(ratio_from_discriminator(DiscriminatorForm::Odds, 0.75).unwrap(), 3.0);
        assert_eq!(ratio_from_discriminator(DiscriminatorForm::Exp, 0.0).unwrap(), 1.0);
        let hi = ratio_from_discriminator(DiscriminatorForm::Odds, 1.0).unwrap();
        assert!(hi.is_finite() && hi > 1e11);
        assert!(ratio_from_discriminator(DiscriminatorForm::Odds, 0.0).unwrap() < 1e-11);
        assert!(ratio_from_discriminator(DiscriminatorForm::Odds, 1.5).is_err());
    }

    #[test]
    fn calibration_behaviour() {
        let real = [2.0, 3.0, 4.0];
        let fake = [-2.0, -3.0, -4.0];
        let c = calibrate_discriminator(&real, &fake).unwrap();
        assert!(c.slope > 0.0 && c.slope <= CALIBRATION_SLOPE_CAP);
        assert!(real.iter().all(|&x| c.apply(x) > 0.99));
        assert!(fake.iter().all(|&x| c.apply(x) < 0.01));
        let swapped = calibrate_discriminator(&fake, &real).unwrap();
        assert!((swapped.slope + c.slope).abs() < 1e-9);

        let real = [0.5, 1.0, -0.2, 2.0, 0.1];
        let fake = [-0.5, 0.3, -1.0, -2.0, 0.8, -0.1];
        let c = calibrate_discriminator(&real, &fake).unwrap();
        let s = calibrate_discriminator(&fake, &real).unwrap();
        assert!((c.slope + s.slope).abs() < 1e-8);
        let grid: Vec<f64> = (-50..50).map(|i| i as f64 / 10.0).collect();
        assert!(grid.windows(2).all(|w| c.apply(w[0]) <= c.apply(w[1])));

        let k = calibrate_discriminator(&[1.0, 1.0], &[1.0]).unwrap();
        assert_eq!(k.slope, 0.0);
        assert!((k.apply(1.0) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn samplers_are_deterministic() {
        let ratio = RatioFn(|x: &[f64]| 2.0 * x[0]);
        let real = DenseMatrix::from_rows(&[[0.5], [0.9]]).unwrap();
        let run = |seed| {
            let mut rng = RandomStream::new(seed, 0);
            let a = mh_subsample(&Uniform1d, &ratio, &real, &MhConfig::new(300), &mut rng).unwrap();
            let b = sir_subsample(&Uniform1d, &ratio, &SirConfig::new(300), &mut rng).unwrap();
            let c = rs_subsample(&Uniform1d, &ratio, &RsConfig { burn_in: 100, ..RsConfig::new(300) }, &mut rng).unwrap();
            (a, b, c)
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5).0.samples, run(6).0.samples);
    }
}
