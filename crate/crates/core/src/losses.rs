//! Density-ratio training losses and their gradients with respect to the
//! model's ratio outputs.
//!
//! Every loss takes the ratios predicted on fake (generator) samples and on
//! real samples. Means are accumulated with pairwise summation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mean, sigmoid, sigmoid_grad, softplus_gap};

/// Ratios below this are clamped before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// `-ln 2 - 1`, the infimum of the empirical Softplus loss.
pub const SP_LOWER_BOUND: f64 = -std::f64::consts::LN_2 - 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "SP")]
    Sp,
    #[serde(rename = "uLSIF")]
    Ulsif,
    #[serde(rename = "DSKL")]
    Dskl,
    #[serde(rename = "BARR")]
    Barr,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Sp, LossKind::Ulsif, LossKind::Dskl, LossKind::Barr];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Sp => "SP",
            LossKind::Ulsif => "uLSIF",
            LossKind::Dskl => "DSKL",
            LossKind::Barr => "BARR",
        }
    }

    /// Whether the `λ·Q̂` normalization penalty is added to this loss.
    pub fn takes_penalty(self) -> bool {
        matches!(self, LossKind::Sp | LossKind::Ulsif)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sp" => Ok(LossKind::Sp),
            "ulsif" => Ok(LossKind::Ulsif),
            "dskl" => Ok(LossKind::Dskl),
            "barr" => Ok(LossKind::Barr),
            _ => Err(Error::Usage(format!("unknown loss kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Weight of the squared mean-deviation penalty.
    pub lambda: f64,
    /// Weight of BARR's absolute mean-deviation term.
    pub barr_lambda: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            barr_lambda: 10.0,
        }
    }
}

impl PenaltyConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }
}

fn check_nonneg(fake: &[f64], real: &[f64]) -> Result<()> {
    if fake.is_empty() || real.is_empty() {
        return Err(Error::Usage("loss needs nonempty fake and real ratio vectors".into()));
    }
    if let Some(v) = fake.iter().chain(real).find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("ratio {v} is not a finite nonnegative value")));
    }
    Ok(())
}

fn check_positive(values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("ratio {v} must be positive before taking its log")));
    }
    Ok(())
}

fn mean_map(xs: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let mapped: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    mean(&mapped)
}

/// Empirical Softplus loss `mean(σ(r_g)·r_g − η(r_g)) − mean(σ(r_r))`.
pub fn sp_loss(fake: &[f64], real: &[f64]) -> Result<f64> {
    check_nonneg(fake, real)?;
    Ok(sp_unchecked(fake, real))
}

fn sp_unchecked(fake: &[f64], real: &[f64]) -> f64 {
    mean_map(fake, softplus_gap) - mean_map(real, sigmoid)
}

/// uLSIF loss `mean(r_g²)/2 − mean(r_r)`.
pub fn ulsif_loss(fake: &[f64], real: &[f64]) -> Result<f64> {
    check_nonneg(fake, real)?;
    Ok(ulsif_unchecked(fake, real))
}

fn ulsif_unchecked(fake: &[f64], real: &[f64]) -> f64 {
    0.5 * mean_map(fake, |r| r * r) - mean(real)
}

/// DSKL loss `−mean(ln r_r) + mean(ln r_g)`; every ratio must be positive.
pub fn dskl_loss(fake: &[f64], real: &[f64]) -> Result<f64> {
    check_nonneg(fake, real)?;
    check_positive(fake)?;
    check_positive(real)?;
    Ok(dskl_unchecked(fake, real))
}

fn dskl_unchecked(fake: &[f64], real: &[f64]) -> f64 {
    -mean_map(real, f64::ln) + mean_map(fake, f64::ln)
}

/// BARR loss `−mean(ln r_r) + λ_b·|mean(r_g) − 1|`; real ratios must be positive.
pub fn barr_loss(fake: &[f64], real: &[f64], barr_lambda: f64) -> Result<f64> {
    check_nonneg(fake, real)?;
    check_positive(real)?;
    Ok(barr_unchecked(fake, real, barr_lambda))
}

fn barr_unchecked(fake: &[f64], real: &[f64], barr_lambda: f64) -> f64 {
    -mean_map(real, f64::ln) + barr_lambda * (mean(fake) - 1.0).abs()
}

/// Normalization penalty `(mean(r_g) − 1)²`.
pub fn penalty_qhat(fake: &[f64]) -> Result<f64> {
    if fake.is_empty() {
        return Err(Error::Usage("penalty needs at least one fake ratio".into()));
    }
    let d = mean(fake) - 1.0;
    Ok(d * d)
}

/// Loss value plus its partial derivatives with respect to every ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    /// Total objective, including `λ·Q̂` where it applies.
    pub loss: f64,
    /// The loss without the penalty term.
    pub bare_loss: f64,
    pub d_fake: Vec<f64>,
    pub d_real: Vec<f64>,
}

/// Evaluates the training objective for `kind` and its exact gradient.
///
/// DSKL and BARR clamp ratios at [`LOG_FLOOR`] before the logarithm (the
/// clamped entries get zero gradient). The `λ·Q̂` penalty is added for SP and
/// uLSIF only.
pub fn loss_and_ratio_grads(kind: LossKind, cfg: PenaltyConfig, fake: &[f64], real: &[f64]) -> Result<LossGrad> {
    check_nonneg(fake, real)?;
    if !(cfg.lambda >= 0.0) {
        return Err(Error::Domain(format!("penalty weight {} is negative", cfg.lambda)));
    }
    let ng = fake.len() as f64;
    let nr = real.len() as f64;
    let floor = |r: f64| r.max(LOG_FLOOR);
    let dlog = |r: f64| if r > LOG_FLOOR { 1.0 / r } else { 0.0 };

    let (bare_loss, mut d_fake, d_real) = match kind {
        LossKind::Sp => (
            sp_unchecked(fake, real),
            // d/dr [σ(r)·r − η(r)] = σ'(r)·r
            fake.iter().map(|&r| sigmoid_grad(r) * r / ng).collect(),
            real.iter().map(|&r| -sigmoid_grad(r) / nr).collect::<Vec<_>>(),
        ),
        LossKind::Ulsif => (
            ulsif_unchecked(fake, real),
            fake.iter().map(|&r| r / ng).collect(),
            vec![-1.0 / nr; real.len()],
        ),
        LossKind::Dskl => {
            let f: Vec<f64> = fake.iter().map(|&r| floor(r)).collect();
            let rr: Vec<f64> = real.iter().map(|&r| floor(r)).collect();
            (
                dskl_unchecked(&f, &rr),
                fake.iter().map(|&r| dlog(r) / ng).collect(),
                real.iter().map(|&r| -dlog(r) / nr).collect(),
            )
        }
        LossKind::Barr => {
            let rr: Vec<f64> = real.iter().map(|&r| floor(r)).collect();
            let dev = mean(fake) - 1.0;
            let sign = if dev > 0.0 {
                1.0
            } else if dev < 0.0 {
                -1.0
            } else {
                0.0
            };
            (
                barr_unchecked(fake, &rr, cfg.barr_lambda),
                vec![cfg.barr_lambda * sign / ng; fake.len()],
                real.iter().map(|&r| -dlog(r) / nr).collect(),
            )
        }
    };

    let mut loss = bare_loss;
    if kind.takes_penalty() && cfg.lambda > 0.0 {
        let dev = mean(fake) - 1.0;
        loss += cfg.lambda * dev * dev;
        let dq = 2.0 * cfg.lambda * dev / ng;
        d_fake.iter_mut().for_each(|g| *g += dq);
    }
    Ok(LossGrad {
        loss,
        bare_loss,
        d_fake,
        d_real,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, LN_2};

    #[test]
    fn sp_reference_values() {
        assert!((sp_loss(&[0.0], &[0.0]).unwrap() - (-LN_2 - 0.5)).abs() < 1e-15);
        assert!((sp_loss(&[100.0], &[100.0]).unwrap() + 1.0).abs() < 1e-10);
        assert!(sp_loss(&[0.0, 3.0], &[7.0]).unwrap() > SP_LOWER_BOUND);
    }

    #[test]
    fn ulsif_reference_values() {
        assert_eq!(ulsif_loss(&[1.0], &[1.0]).unwrap(), -0.5);
        assert_eq!(ulsif_loss(&[2.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        for r in [10.0, 1e3, 1e7] {
            assert_eq!(ulsif_loss(&[0.0], &[r]).unwrap(), -r);
        }
    }

    #[test]
    fn dskl_reference_values() {
        assert_eq!(dskl_loss(&[1.0], &[1.0]).unwrap(), 0.0);
        assert!((dskl_loss(&[1.0], &[E]).unwrap() + 1.0).abs() < 1e-15);
        assert!((dskl_loss(&[E * E], &[1.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(dskl_loss(&[0.0], &[1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn barr_reference_values() {
        assert_eq!(barr_loss(&[1.0], &[1.0], 10.0).unwrap(), 0.0);
        assert_eq!(barr_loss(&[3.0], &[1.0], 10.0).unwrap(), 20.0);
        assert!((barr_loss(&[1.0, 1.0], &[E], 10.0).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(barr_loss(&[1.0], &[0.0], 10.0), Err(Error::Domain(_))));
    }

    #[test]
    fn penalty_reference_values() {
        assert_eq!(penalty_qhat(&[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(penalty_qhat(&[0.0, 2.0]).unwrap(), 0.0);
        assert_eq!(penalty_qhat(&[2.0, 2.0]).unwrap(), 1.0);
        assert!(matches!(penalty_qhat(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn input_validation() {
        assert!(matches!(sp_loss(&[], &[1.0]), Err(Error::Usage(_))));
        assert!(matches!(sp_loss(&[1.0], &[]), Err(Error::Usage(_))));
        assert!(matches!(ulsif_loss(&[-1.0], &[1.0]), Err(Error::Domain(_))));
        assert!(matches!(sp_loss(&[f64::NAN], &[1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn sp_gradient_vanishes_at_zero_fake_ratio() {
        let lg = loss_and_ratio_grads(LossKind::Sp, PenaltyConfig::default(), &[0.0], &[1.0]).unwrap();
        assert_eq!(lg.d_fake, vec![0.0]);
    }

    #[test]
    fn zero_lambda_matches_bare_losses() {
        let fake = [0.3, 1.7, 2.2];
        let real = [0.9, 4.0];
        let cfg = PenaltyConfig::default();
        let pairs = [
            (LossKind::Sp, sp_loss(&fake, &real).unwrap()),
            (LossKind::Ulsif, ulsif_loss(&fake, &real).unwrap()),
            (LossKind::Dskl, dskl_loss(&fake, &real).unwrap()),
            (LossKind::Barr, barr_loss(&fake, &real, 10.0).unwrap()),
        ];
        for (kind, bare) in pairs {
            let lg = loss_and_ratio_grads(kind, cfg, &fake, &real).unwrap();
            assert_eq!(lg.loss, bare, "{kind}");
            assert_eq!(lg.bare_loss, bare, "{kind}");
        }
    }

    #[test]
    fn penalty_attaches_only_to_sp_and_ulsif() {
        let fake = [2.0, 2.0];
        let real = [1.0];
        let cfg = PenaltyConfig::with_lambda(0.5);
        for kind in LossKind::ALL {
            let lg = loss_and_ratio_grads(kind, cfg, &fake, &real).unwrap();
            let expected = if kind.takes_penalty() { 0.5 } else { 0.0 };
            assert!((lg.loss - lg.bare_loss - expected).abs() < 1e-15, "{kind}");
        }
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("sp".parse::<LossKind>().unwrap(), LossKind::Sp);
        assert_eq!("uLSIF".parse::<LossKind>().unwrap(), LossKind::Ulsif);
        assert!("kl".parse::<LossKind>().is_err());
        assert_eq!(serde_json::to_string(&LossKind::Ulsif).unwrap(), "\"uLSIF\"");
    }
}
