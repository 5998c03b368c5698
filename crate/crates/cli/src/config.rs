//! Experiment recipe shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ratio_subsampler::dre::{DreConfig, FeatureMap, LrSchedule};
use ratio_subsampler::losses::LossKind;
use ratio_subsampler::world::{GanConfig, MixtureSpec};
use ratio_subsampler::{Error, Result};

/// Octave frequencies of the desk preset's Fourier feature map.
pub const DESK_FREQUENCIES: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mixture: MixtureSpec,
    /// Overrides `mixture` when set.
    pub mixture_path: Option<PathBuf>,
    pub data: DataConfig,
    pub gan: GanConfig,
    pub dre: DreSection,
    pub sampler: SamplerSection,
    pub eval: EvalConfig,
    /// Also write `DRF1` twins of every sample file.
    pub write_binary: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            mixture: MixtureSpec::default(),
            mixture_path: None,
            data: DataConfig::default(),
            gan: GanConfig::default(),
            dre: DreSection::default(),
            sampler: SamplerSection::default(),
            eval: EvalConfig::default(),
            write_binary: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 50_000,
            n_valid: 50_000,
            n_test: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DreSection {
    pub loss_kind: LossKind,
    /// Fixed `λ` for `train-dre`; the pipeline sweeps `grid` instead when this is unset.
    pub lambda: Option<f64>,
    pub grid: Vec<f64>,
    pub epochs: usize,
    pub batch: usize,
    /// Defaults to `1e−3` for SP and `1e−5` for the other losses.
    pub lr: Option<f64>,
    pub schedule: LrSchedule,
    pub widths: Vec<usize>,
    pub groups: usize,
    pub drop_prob: f64,
    pub steps_per_epoch: Option<usize>,
    pub feature_map: Option<FeatureMap>,
}

impl Default for DreSection {
    fn default() -> Self {
        let base = DreConfig::new(LossKind::Sp, 0.0);
        Self {
            loss_kind: LossKind::Sp,
            lambda: None,
            grid: vec![0.0, 0.005, 0.01, 0.05, 0.1],
            epochs: base.epochs,
            batch: base.batch,
            lr: None,
            schedule: base.schedule,
            widths: base.widths,
            groups: base.groups,
            drop_prob: base.drop_prob,
            steps_per_epoch: None,
            feature_map: None,
        }
    }
}

impl DreSection {
    pub fn to_dre_config(&self, lambda: f64) -> DreConfig {
        let base = DreConfig::new(self.loss_kind, lambda);
        DreConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr.unwrap_or(base.lr),
            schedule: self.schedule,
            widths: self.widths.clone(),
            groups: self.groups,
            drop_prob: self.drop_prob,
            steps_per_epoch: self.steps_per_epoch,
            ..base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMethod {
    None,
    Rs,
    Mh,
    Sir,
    Drs,
}

impl SamplerMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerMethod::None => "none",
            SamplerMethod::Rs => "rs",
            SamplerMethod::Mh => "mh",
            SamplerMethod::Sir => "sir",
            SamplerMethod::Drs => "drs",
        }
    }

    pub fn needs_dre(self, ratio: RatioChoice) -> bool {
        matches!(self, SamplerMethod::Rs | SamplerMethod::Mh | SamplerMethod::Sir) && ratio == RatioChoice::Dre
    }
}

impl std::str::FromStr for SamplerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::Usage(format!("unknown sampler method {s:?}")))
    }
}

/// Where RS, MH and SIR read their ratios from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioChoice {
    Dre,
    DiscriminatorOdds,
    DiscriminatorExp,
    /// Discriminator odds after logistic calibration on the validation set.
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub method: SamplerMethod,
    pub ratio: RatioChoice,
    pub rs_burn_in: usize,
    pub mh_chain_len: usize,
    pub mh_max_restarts: usize,
    pub sir_pool_size: usize,
    pub drs_gamma_percentile: f64,
    pub drs_epsilon: f64,
    pub drs_batch: usize,
    pub drs_burn_in: usize,
    /// Extra discriminator epochs on the validation set before DRS.
    pub drs_finetune_epochs: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            method: SamplerMethod::Rs,
            ratio: RatioChoice::Dre,
            rs_burn_in: 50_000,
            mh_chain_len: 100,
            mh_max_restarts: 1000,
            sir_pool_size: 20_000,
            drs_gamma_percentile: 95.0,
            drs_epsilon: 1e-14,
            drs_batch: 1000,
            drs_burn_in: 10_000,
            drs_finetune_epochs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_subsample: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_subsample: 10_000 }
    }
}

impl PipelineConfig {
    /// Settings that finish in minutes on one core: the full data sizes, GAN
    /// recipe and samplers, with a narrow ratio network trained for few epochs
    /// on Fourier features of the samples.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.dre.widths = vec![64, 64, 32];
        cfg.dre.groups = 4;
        cfg.dre.drop_prob = 0.0;
        cfg.dre.epochs = 20;
        cfg.dre.feature_map = Some(FeatureMap::Fourier {
            input_dim: 2,
            frequencies: DESK_FREQUENCIES.to_vec(),
        });
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    /// The mixture in effect, reading `mixture_path` when given.
    pub fn resolve_mixture(&self) -> Result<MixtureSpec> {
        match &self.mixture_path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                MixtureSpec::from_json(&text)
            }
            None => {
                self.mixture.validate()?;
                Ok(self.mixture.clone())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("data.n_train", self.data.n_train),
            ("data.n_valid", self.data.n_valid),
            ("data.n_test", self.data.n_test),
            ("gan.batch", self.gan.batch),
            ("gan.noise_dim", self.gan.noise_dim),
            ("dre.epochs", self.dre.epochs),
            ("dre.batch", self.dre.batch),
            ("sampler.rs_burn_in", self.sampler.rs_burn_in),
            ("sampler.mh_chain_len", self.sampler.mh_chain_len),
            ("sampler.sir_pool_size", self.sampler.sir_pool_size),
            ("sampler.drs_batch", self.sampler.drs_batch),
            ("sampler.drs_burn_in", self.sampler.drs_burn_in),
            ("eval.n_subsample", self.eval.n_subsample),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Usage(format!("{name} must be at least 1")));
        }
        if self.dre.lambda.is_none() && self.dre.grid.is_empty() {
            return Err(Error::Usage("dre needs a lambda or a nonempty grid".into()));
        }
        if self.dre.lambda.into_iter().chain(self.dre.grid.iter().copied()).any(|l| !(l >= 0.0)) {
            return Err(Error::Usage("penalty weights must be nonnegative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with `out_dir` blanked, hex encoded.
    pub fn hash(&self) -> String {
        let recipe = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let text = serde_json::to_string(&recipe).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"seed": 7, "sampler": {"method": "sir"}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sampler.method, SamplerMethod::Sir);
        assert_eq!(cfg.sampler.sir_pool_size, 20_000);
        assert_eq!(cfg.data.n_train, 50_000);
        assert!(PipelineConfig::from_json(r#"{"sede": 7}"#).is_err());
    }

    #[test]
    fn validation_and_hash() {
        let mut cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let h = cfg.hash();
        assert_eq!(h.len(), 64);
        cfg.data.n_train = 0;
        assert!(matches!(cfg.validate(), Err(Error::Usage(_))));
        assert_ne!(cfg.hash(), h);
        let moved = PipelineConfig {
            out_dir: PathBuf::from("elsewhere"),
            ..cfg.clone()
        };
        assert_eq!(moved.hash(), cfg.hash());
    }

    #[test]
    fn dre_learning_rate_defaults_follow_the_loss() {
        let mut s = DreSection::default();
        assert_eq!(s.to_dre_config(0.0).lr, 1e-3);
        s.loss_kind = LossKind::Ulsif;
        assert_eq!(s.to_dre_config(0.0).lr, 1e-5);
        s.lr = Some(0.5);
        assert_eq!(s.to_dre_config(0.1).lr, 0.5);
    }
}
