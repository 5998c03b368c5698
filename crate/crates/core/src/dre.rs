//! Density-ratio models trained on feature representations of real and
//! generated samples, and KS-based selection of the penalty weight.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::ks_two_sample;
use crate::losses::{loss_and_ratio_grads, LossKind, PenaltyConfig};
use crate::nn::{ratio_mlp_layers, AdamState, MlpModel, Mode};
use crate::numeric::{mean, DenseMatrix, RandomStream};
use crate::source::{Generator, RatioSource};
use crate::world::chunked;

const DRF1_MAGIC: &[u8; 4] = b"DRF1";

/// Serializes a matrix as `DRF1`: magic, u32 LE rows, u32 LE cols, then the
/// values as f64 LE in row-major order.
pub fn encode_drf1(m: &DenseMatrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Usage("too many rows for DRF1".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Usage("too many columns for DRF1".into()))?;
    let mut out = Vec::with_capacity(12 + 8 * m.as_slice().len());
    out.extend_from_slice(DRF1_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_drf1(bytes: &[u8]) -> Result<DenseMatrix> {
    if bytes.len() < 4 || &bytes[..4] != DRF1_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "missing DRF1 magic".into(),
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: "truncated DRF1 header".into(),
        });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| Error::Parse {
            offset: 4,
            message: "DRF1 dimensions overflow".into(),
        })?;
    if bytes.len() != expected {
        return Err(Error::Parse {
            offset: bytes.len().min(expected),
            message: format!("DRF1 body has {} bytes, header implies {}", bytes.len() - 12, expected - 12),
        });
    }
    let data = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    DenseMatrix::from_vec(rows, cols, data)
}

pub fn write_drf1(path: &Path, m: &DenseMatrix) -> Result<()> {
    std::fs::write(path, encode_drf1(m)?).map_err(|e| Error::io(path, e))
}

pub fn read_drf1(path: &Path) -> Result<DenseMatrix> {
    decode_drf1(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Descriptor of the map `φ` from samples to the space the ratio is estimated in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureMap {
    Identity { dim: usize },
    /// Row `i` of the `DRF1` file holds `φ` of sample row `i`.
    Precomputed { dim: usize, file_path: PathBuf },
    /// `x` followed by `sin(ωx_j)` and `cos(ωx_j)` for every listed `ω`.
    /// Injective because `x` itself is kept.
    Fourier { input_dim: usize, frequencies: Vec<f64> },
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } | FeatureMap::Precomputed { dim, .. } => *dim,
            FeatureMap::Fourier { input_dim, frequencies } => input_dim * (1 + 2 * frequencies.len()),
        }
    }

    /// Loads whatever the map needs to be applied.
    pub fn resolve(&self) -> Result<ResolvedFeatureMap> {
        let table = match self {
            FeatureMap::Identity { .. } => None,
            FeatureMap::Fourier { input_dim, frequencies } => {
                if *input_dim == 0 || frequencies.iter().any(|w| !w.is_finite()) {
                    return Err(Error::Usage("Fourier features need a positive input dimension and finite frequencies".into()));
                }
                None
            }
            FeatureMap::Precomputed { dim, file_path } => {
                let t = read_drf1(file_path)?;
                if t.cols() != *dim {
                    return Err(Error::Shape(format!(
                        "feature file {} has {} columns, descriptor says {dim}",
                        file_path.display(),
                        t.cols()
                    )));
                }
                Some(t)
            }
        };
        Ok(ResolvedFeatureMap { map: self.clone(), table })
    }
}

/// Anything that maps a batch of samples to feature rows.
pub trait FeatureTransform: Sync {
    /// Output feature dimension.
    fn dim(&self) -> usize;

    fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix>;
}

/// A [`FeatureMap`] with its file contents in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedFeatureMap {
    map: FeatureMap,
    table: Option<DenseMatrix>,
}

impl ResolvedFeatureMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            map: FeatureMap::Identity { dim },
            table: None,
        }
    }

    pub fn descriptor(&self) -> &FeatureMap {
        &self.map
    }
}

impl FeatureTransform for ResolvedFeatureMap {
    fn dim(&self) -> usize {
        self.map.dim()
    }

    fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        match &self.table {
            None => {
                let input_dim = match &self.map {
                    FeatureMap::Fourier { input_dim, .. } => *input_dim,
                    _ => self.dim(),
                };
                if x.cols() != input_dim {
                    return Err(Error::Shape(format!("batch has {} columns, feature map expects {input_dim}", x.cols())));
                }
                match &self.map {
                    FeatureMap::Fourier { frequencies, .. } => Ok(fourier_features(x, frequencies)),
                    _ => Ok(x.clone()),
                }
            }
            Some(t) => {
                if x.rows() != t.rows() {
                    return Err(Error::Shape(format!(
                        "precomputed features cover {} rows, batch has {}",
                        t.rows(),
                        x.rows()
                    )));
                }
                Ok(t.clone())
            }
        }
    }
}

fn fourier_features(x: &DenseMatrix, frequencies: &[f64]) -> DenseMatrix {
    let d = x.cols();
    let width = d * (1 + 2 * frequencies.len());
    let mut data = Vec::with_capacity(x.rows() * width);
    for row in x.row_iter() {
        data.extend_from_slice(row);
        for &w in frequencies {
            data.extend(row.iter().map(|v| (w * v).sin()));
            data.extend(row.iter().map(|v| (w * v).cos()));
        }
    }
    DenseMatrix::from_raw(x.rows(), width, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every_epochs` epochs.
    StepDecay { every_epochs: usize, factor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { every_epochs, factor } => base * factor.powi((epoch / every_epochs.max(1)) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DreConfig {
    pub loss_kind: LossKind,
    pub lambda: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Hidden widths of the ratio network.
    pub widths: Vec<usize>,
    /// Group-norm groups per hidden layer; 0 disables group norm.
    pub groups: usize,
    pub drop_prob: f64,
    /// Steps per epoch; defaults to `real rows / batch`.
    pub steps_per_epoch: Option<usize>,
    /// Stop as soon as a step's penalized loss falls below this value.
    pub stop_below: Option<f64>,
}

impl DreConfig {
    /// Full-size recipe: 400 epochs, batch 512, lr `1e−3` for SP and `1e−5`
    /// otherwise, hidden widths 2048-1024-512-256-128 with group norm and dropout.
    pub fn new(loss_kind: LossKind, lambda: f64) -> Self {
        Self {
            loss_kind,
            lambda,
            epochs: 400,
            batch: 512,
            lr: if loss_kind == LossKind::Sp { 1e-3 } else { 1e-5 },
            schedule: LrSchedule::Constant,
            widths: vec![2048, 1024, 512, 256, 128],
            groups: 4,
            drop_prob: 0.2,
            steps_per_epoch: None,
            stop_below: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub steps: usize,
    /// Penalized loss of every mini-batch, in order.
    pub step_losses: Vec<f64>,
    /// Loss without the penalty, per mini-batch.
    pub bare_losses: Vec<f64>,
    /// Mean ratio over the fake half of the last mini-batch.
    pub final_mean_fake_ratio: f64,
    pub stopped_early: bool,
}

/// Trained ratio model `r̂(x) = ψ̂(φ(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DreModel {
    pub features: ResolvedFeatureMap,
    pub ratio_net: MlpModel,
    pub loss_kind: LossKind,
    pub lambda: f64,
    pub train_report: Option<TrainReport>,
}

#[derive(Serialize, Deserialize)]
struct DreFile {
    format_version: u32,
    feature_map: FeatureMap,
    loss_kind: LossKind,
    lambda: f64,
    ratio_net: serde_json::Value,
    #[serde(default)]
    train_report: Option<TrainReport>,
}

impl DreModel {
    pub fn new(features: ResolvedFeatureMap, ratio_net: MlpModel, loss_kind: LossKind, lambda: f64) -> Result<Self> {
        if ratio_net.input_dim() != features.dim() || ratio_net.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "ratio net maps {} → {}, features have dimension {}",
                ratio_net.input_dim(),
                ratio_net.output_dim(),
                features.dim()
            )));
        }
        if !ratio_net.final_nonneg() {
            return Err(Error::Usage("ratio net must end in a ReLU".into()));
        }
        Ok(Self {
            features,
            ratio_net,
            loss_kind,
            lambda,
            train_report: None,
        })
    }

    /// Eval-mode ratios for each row of `x`.
    pub fn estimate_ratio(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        estimate_ratio_with(&self.features, &self.ratio_net, x)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&DreFile {
            format_version: 1,
            feature_map: self.features.descriptor().clone(),
            loss_kind: self.loss_kind,
            lambda: self.lambda,
            ratio_net: self.ratio_net.checkpoint_value(),
            train_report: self.train_report.clone(),
        })
        .expect("dre model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DreFile = serde_json::from_str(text).map_err(|e| Error::from_json(e, text))?;
        if file.format_version != 1 {
            return Err(Error::Usage(format!("unsupported DRE format_version {}", file.format_version)));
        }
        let mut model = Self::new(
            file.feature_map.resolve()?,
            MlpModel::from_checkpoint_value(file.ratio_net)?,
            file.loss_kind,
            file.lambda,
        )?;
        model.train_report = file.train_report;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

impl RatioSource for DreModel {
    fn ratios(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        self.estimate_ratio(x)
    }
}

/// `ψ̂(φ(x))` for an arbitrary feature transform.
pub fn estimate_ratio_with(features: &dyn FeatureTransform, net: &MlpModel, x: &DenseMatrix) -> Result<Vec<f64>> {
    let y = features.apply(x)?;
    if y.cols() != net.input_dim() {
        return Err(Error::Shape(format!("features have {} columns, ratio net expects {}", y.cols(), net.input_dim())));
    }
    chunked(&y, |c| net.predict(c))
}

/// Trains a ratio network by mini-batch Adam: each step pairs `batch` real
/// rows (reshuffled every epoch) with `batch` fresh generator draws, maps
/// both through `φ`, and descends the configured loss plus `λ·Q̂`.
pub fn train_dre<G: Generator + ?Sized>(
    real: &DenseMatrix,
    gen: &G,
    features: ResolvedFeatureMap,
    cfg: &DreConfig,
    rng: &mut RandomStream,
) -> Result<DreModel> {
    if real.rows() == 0 {
        return Err(Error::Usage("DRE training data is empty".into()));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Usage("DRE batch and learning rate must be positive".into()));
    }
    if real.cols() != gen.dim() {
        return Err(Error::Shape(format!("real data has {} columns, generator emits {}", real.cols(), gen.dim())));
    }
    let layers = ratio_mlp_layers(features.dim(), &cfg.widths, cfg.groups, cfg.drop_prob);
    let mut init_rng = rng.derive_named("init");
    let mut net = MlpModel::new(layers, true, &mut init_rng)?;
    // Start every ratio near one so the nonnegative output is not dead on arrival.
    let last = net.params().len() - 1;
    net.params_mut()[last] = 1.0;
    let mut adam = AdamState::new(net.params().len(), cfg.lr);
    let penalty = PenaltyConfig::with_lambda(cfg.lambda);

    let mut order_rng = rng.derive_named("order");
    let mut fake_rng = rng.derive_named("fakes");
    let mut drop_rng = rng.derive_named("dropout");
    let batch = cfg.batch.min(real.rows());
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or(real.rows() / batch).max(1);
    let mut report = TrainReport {
        epochs_run: 0,
        steps: 0,
        step_losses: Vec::new(),
        bare_losses: Vec::new(),
        final_mean_fake_ratio: f64::NAN,
        stopped_early: false,
    };

    'epochs: for epoch in 0..cfg.epochs {
        adam.lr = cfg.schedule.rate(cfg.lr, epoch);
        let mut order = order_rng.permutation(real.rows());
        while order.len() < steps_per_epoch * batch {
            order.extend(order_rng.permutation(real.rows()));
        }
        for s in 0..steps_per_epoch {
            let xr = real.select_rows(&order[s * batch..(s + 1) * batch]);
            let xf = gen.generate(batch, &mut fake_rng)?;
            let y = features.apply(&xr)?.vstack(&features.apply(&xf)?)?;
            let (out, cache) = net.forward(&y, Mode::Train, &mut drop_rng)?;
            let (r_real, r_fake) = out.as_slice().split_at(batch);
            let lg = loss_and_ratio_grads(cfg.loss_kind, penalty, r_fake, r_real)?;
            if !lg.loss.is_finite() {
                return Err(Error::NonFinite("DRE training loss"));
            }
            let mut g = lg.d_real;
            g.extend_from_slice(&lg.d_fake);
            let grads = net.backward(&cache, &DenseMatrix::from_vec(2 * batch, 1, g)?)?;
            net.adam_step(&mut adam, &grads.params)?;
            report.step_losses.push(lg.loss);
            report.bare_losses.push(lg.bare_loss);
            report.final_mean_fake_ratio = mean(r_fake);
            report.steps += 1;
            if cfg.stop_below.is_some_and(|t| lg.loss < t) {
                report.stopped_early = true;
                report.epochs_run = epoch + 1;
                break 'epochs;
            }
        }
        report.epochs_run = epoch + 1;
    }
    let mut model = DreModel::new(features, net, cfg.loss_kind, cfg.lambda)?;
    model.train_report = Some(report);
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    pub ks_stats: Vec<f64>,
    pub selected_lambda: f64,
    pub selected_index: usize,
}

/// Removes repeated values, keeping first occurrences. The flag reports
/// whether anything was dropped.
pub fn dedup_grid(grid: &[f64]) -> (Vec<f64>, bool) {
    let mut out: Vec<f64> = Vec::with_capacity(grid.len());
    for &g in grid {
        if !out.iter().any(|&o| o == g) {
            out.push(g);
        }
    }
    let dropped = out.len() != grid.len();
    (out, dropped)
}

/// Index of the smallest statistic; ties go to the smaller `λ`.
pub fn select_lambda(grid: &[f64], ks_stats: &[f64]) -> Result<usize> {
    if grid.is_empty() || grid.len() != ks_stats.len() {
        return Err(Error::Usage("sweep grid is empty or misaligned".into()));
    }
    let mut best = 0;
    for i in 1..grid.len() {
        let better = ks_stats[i] < ks_stats[best] || (ks_stats[i] == ks_stats[best] && grid[i] < grid[best]);
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// Trains one model per `λ` (all from the same seed) and selects the one whose
/// ratios on training reals and held-out reals are closest in KS distance.
/// Every trained model is returned, aligned with `grid`.
pub fn sweep_lambda<G: Generator + ?Sized>(
    real_train: &DenseMatrix,
    real_holdout: &DenseMatrix,
    gen: &G,
    features: &ResolvedFeatureMap,
    grid: &[f64],
    cfg: &DreConfig,
    rng: &RandomStream,
) -> Result<(SweepResult, Vec<DreModel>)> {
    if grid.is_empty() {
        return Err(Error::Usage("λ grid is empty".into()));
    }
    let runs = grid
        .par_iter()
        .map(|&lambda| {
            let mut c = cfg.clone();
            c.lambda = lambda;
            let model = train_dre(real_train, gen, features.clone(), &c, &mut rng.clone())?;
            let ks = ks_two_sample(&model.estimate_ratio(real_train)?, &model.estimate_ratio(real_holdout)?)?;
            Ok((ks.statistic, model))
        })
        .collect::<Result<Vec<_>>>()?;
    let ks_stats: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let best = select_lambda(grid, &ks_stats)?;
    Ok((
        SweepResult {
            grid: grid.to_vec(),
            ks_stats,
            selected_lambda: grid[best],
            selected_index: best,
        },
        runs.into_iter().map(|r| r.1).collect(),
    ))
}
