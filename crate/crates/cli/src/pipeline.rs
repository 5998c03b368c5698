//! Pipeline stages. Every stage draws from its own stream derived from the
//! root seed and the stage name, so any stage can be rerun alone.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use ratio_subsampler::dre::{dedup_grid, sweep_lambda, train_dre, DreModel, ResolvedFeatureMap, SweepResult, TrainReport};
use ratio_subsampler::evaluation::{quality_report, QualityReport};
use ratio_subsampler::losses::LossKind;
use ratio_subsampler::samplers::{
    calibrate_discriminator, drs_baseline, mh_subsample, rs_subsample, sir_subsample, DiscriminatorForm, DiscriminatorRatio,
    DrsConfig, MhConfig, RsConfig, SamplerDiagnostics, SamplerOutput, SirConfig,
};
use ratio_subsampler::world::{finetune_discriminator, mixture_sample, train_toy_gan, MixtureSpec, ToyGan};
use ratio_subsampler::{DenseMatrix, Error, Generator, RandomStream, RatioSource, Result};

use crate::config::{PipelineConfig, RatioChoice, SamplerMethod};
use crate::samples::write_samples;

pub const TRAIN_FILE: &str = "train.csv";
pub const VALID_FILE: &str = "valid.csv";
pub const TEST_FILE: &str = "test.csv";
pub const GAN_FILE: &str = "gan.json";
pub const DRE_FILE: &str = "dre.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const LOSS_CURVE_FILE: &str = "dre_loss.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const QUALITY_FILE: &str = "quality.json";
pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// The stream a named stage draws from.
pub fn stage_stream(cfg: &PipelineConfig, stage: &str) -> RandomStream {
    RandomStream::new(cfg.seed, 0).derive_named(stage)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: DenseMatrix,
    pub valid: DenseMatrix,
    pub test: DenseMatrix,
}

/// Draws the train, validation and test sets from independent streams.
pub fn generate_data(cfg: &PipelineConfig, spec: &MixtureSpec) -> Result<Datasets> {
    let draw = |n, name| mixture_sample(spec, n, &mut stage_stream(cfg, name));
    Ok(Datasets {
        train: draw(cfg.data.n_train, "gen-data/train")?,
        valid: draw(cfg.data.n_valid, "gen-data/valid")?,
        test: draw(cfg.data.n_test, "gen-data/test")?,
    })
}

/// Writes the three sets into `dir` and returns the paths written.
pub fn write_data(cfg: &PipelineConfig, dir: &Path, data: &Datasets) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (name, m) in [(TRAIN_FILE, &data.train), (VALID_FILE, &data.valid), (TEST_FILE, &data.test)] {
        let path = dir.join(name);
        write_samples(&path, m)?;
        written.push(path.clone());
        if cfg.write_binary {
            let bin = path.with_extension("drf1");
            write_samples(&bin, m)?;
            written.push(bin);
        }
    }
    Ok(written)
}

pub fn train_gan(cfg: &PipelineConfig, train: &DenseMatrix) -> Result<ToyGan> {
    train_toy_gan(train, &cfg.gan, &mut stage_stream(cfg, "train-gan"))
}

pub fn feature_map(cfg: &PipelineConfig, dim: usize) -> Result<ResolvedFeatureMap> {
    match &cfg.dre.feature_map {
        Some(map) => map.resolve(),
        None => Ok(ResolvedFeatureMap::identity(dim)),
    }
}

/// Trains one ratio model at a fixed `λ`.
pub fn train_dre_fixed(cfg: &PipelineConfig, train: &DenseMatrix, gen: &dyn Generator, lambda: f64) -> Result<DreModel> {
    let features = feature_map(cfg, train.cols())?;
    train_dre(train, gen, features, &cfg.dre.to_dre_config(lambda), &mut stage_stream(cfg, "train-dre"))
}

pub struct SweepRun {
    pub result: SweepResult,
    /// One model per grid entry, aligned with `result.grid`.
    pub models: Vec<DreModel>,
    pub warnings: Vec<String>,
}

impl SweepRun {
    pub fn selected(&self) -> &DreModel {
        &self.models[self.result.selected_index]
    }
}

/// Sweeps the configured grid. Every `λ` trains from the stream
/// `train-dre` uses, so the selected model equals `train-dre` at that `λ`.
pub fn sweep(cfg: &PipelineConfig, train: &DenseMatrix, valid: &DenseMatrix, gen: &dyn Generator) -> Result<SweepRun> {
    let (grid, dropped) = dedup_grid(&cfg.dre.grid);
    let mut warnings = Vec::new();
    if dropped {
        warnings.push(format!("duplicate λ values removed; grid is now {grid:?}"));
    }
    let features = feature_map(cfg, train.cols())?;
    let (result, models) = sweep_lambda(
        train,
        valid,
        gen,
        &features,
        &grid,
        &cfg.dre.to_dre_config(0.0),
        &stage_stream(cfg, "train-dre"),
    )?;
    Ok(SweepRun { result, models, warnings })
}

pub fn sweep_table(result: &SweepResult) -> String {
    let mut out = String::from("lambda,ks_stat,selected\n");
    for (i, (l, ks)) in result.grid.iter().zip(&result.ks_stats).enumerate() {
        writeln!(out, "{l},{ks},{}", u8::from(i == result.selected_index)).expect("writing to a string");
    }
    out
}

pub fn loss_curve_csv(report: &TrainReport) -> String {
    let mut out = String::from("step,loss,bare_loss\n");
    for (i, (l, b)) in report.step_losses.iter().zip(&report.bare_losses).enumerate() {
        writeln!(out, "{i},{l},{b}").expect("writing to a string");
    }
    out
}

/// Draws `eval.n_subsample` samples with the configured sampler. `dre` is
/// required when the sampler reads ratios from a trained ratio model.
pub fn subsample(cfg: &PipelineConfig, gan: &ToyGan, dre: Option<&DreModel>, valid: &DenseMatrix) -> Result<SamplerOutput> {
    let s = &cfg.sampler;
    let n = cfg.eval.n_subsample;
    let method = s.method;
    if method == SamplerMethod::None {
        let samples = gan.generate(n, &mut stage_stream(cfg, "raw"))?;
        return Ok(SamplerOutput {
            samples,
            ids: (0..n as u64).collect(),
            diagnostics: SamplerDiagnostics {
                proposals: n as u64,
                ..Default::default()
            },
        });
    }
    let mut rng = stage_stream(cfg, &format!("subsample/{}", method.as_str()));
    if method == SamplerMethod::Drs {
        let mut tuned = gan.clone();
        if s.drs_finetune_epochs > 0 {
            finetune_discriminator(&mut tuned, valid, s.drs_finetune_epochs, cfg.gan.batch, cfg.gan.lr, &mut rng.derive_named("finetune"))?;
        }
        let drs = DrsConfig {
            gamma_percentile: s.drs_gamma_percentile,
            epsilon: s.drs_epsilon,
            batch: s.drs_batch,
            burn_in: s.drs_burn_in,
            ..DrsConfig::new(n)
        };
        return drs_baseline(gan, &tuned, &drs, &mut rng);
    }

    let disc = |form, calibrator| DiscriminatorRatio {
        logits: gan,
        form,
        calibrator,
    };
    let source: Box<dyn RatioSource + '_> = match s.ratio {
        RatioChoice::Dre => Box::new(dre.ok_or_else(|| Error::Usage("this sampler needs a trained ratio model".into()))?),
        RatioChoice::DiscriminatorOdds => Box::new(disc(DiscriminatorForm::Odds, None)),
        RatioChoice::DiscriminatorExp => Box::new(disc(DiscriminatorForm::Exp, None)),
        RatioChoice::Calibrated => {
            let fakes = gan.generate(valid.rows(), &mut rng.derive_named("calibration"))?;
            let c = calibrate_discriminator(&gan.logits(valid)?, &gan.logits(&fakes)?)?;
            Box::new(disc(DiscriminatorForm::Odds, Some(c)))
        }
    };
    match method {
        SamplerMethod::Rs => {
            let c = RsConfig {
                burn_in: s.rs_burn_in,
                ..RsConfig::new(n)
            };
            rs_subsample(gan, &*source, &c, &mut rng)
        }
        SamplerMethod::Mh => {
            let c = MhConfig {
                chain_len: s.mh_chain_len,
                max_restarts: s.mh_max_restarts,
                ..MhConfig::new(n)
            };
            mh_subsample(gan, &*source, valid, &c, &mut rng)
        }
        SamplerMethod::Sir => {
            let c = SirConfig {
                pool_size: s.sir_pool_size,
                target_count: n,
            };
            sir_subsample(gan, &*source, &c, &mut rng)
        }
        SamplerMethod::None | SamplerMethod::Drs => unreachable!("handled above"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DreSummary {
    pub loss_kind: LossKind,
    pub lambda: f64,
    pub epochs_run: usize,
    pub steps: usize,
    pub final_step_loss: f64,
    pub min_step_loss: f64,
    pub final_mean_fake_ratio: f64,
}

impl DreSummary {
    pub fn of(model: &DreModel) -> Option<Self> {
        let r = model.train_report.as_ref()?;
        Some(Self {
            loss_kind: model.loss_kind,
            lambda: model.lambda,
            epochs_run: r.epochs_run,
            steps: r.steps,
            final_step_loss: *r.step_losses.last()?,
            min_step_loss: r.step_losses.iter().copied().fold(f64::INFINITY, f64::min),
            final_mean_fake_ratio: r.final_mean_fake_ratio,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplerSummary {
    pub method: SamplerMethod,
    pub ratio: RatioChoice,
    pub n_samples: usize,
    pub diagnostics: SamplerDiagnostics,
}

/// Everything the pipeline measured. Wall times live in a separate file so
/// reruns with the same seed produce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    /// Quality of raw generator draws, i.e. no subsampling.
    pub raw_quality: QualityReport,
    pub sweep: Option<SweepResult>,
    pub dre: Option<DreSummary>,
    pub sampler: SamplerSummary,
    pub quality: QualityReport,
    pub artifacts: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
}

/// In-memory results of a full run.
pub struct PipelineOutcome {
    pub report: Report,
    pub timings: Timings,
    pub data: Datasets,
    pub gan: ToyGan,
    pub sweep: Option<SweepRun>,
    pub dre: Option<DreModel>,
    pub samples: DenseMatrix,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        artifacts: Vec<PathBuf>,
        #[source]
        source: Error,
    },
}

impl CliError {
    pub fn core(&self) -> &Error {
        match self {
            CliError::Core(e) | CliError::Stage { source: e, .. } => e,
        }
    }

    pub fn exit_code(&self) -> i32 {
        exit_code(self.core())
    }
}

/// 2 for usage and shape errors, 3 for I/O and unreadable files, 4 for
/// numeric and progress failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Shape(_) => 2,
        Error::Io { .. } | Error::Parse { .. } => 3,
        Error::Domain(_) | Error::NonFinite(_) | Error::DegenerateWeights(_) | Error::Progress(_) => 4,
    }
}

struct Tracker {
    dir: PathBuf,
    written: Vec<PathBuf>,
    timings: Timings,
}

impl Tracker {
    fn stage<T>(&mut self, stage: &'static str, f: impl FnOnce(&Path, &mut Vec<PathBuf>) -> Result<T>) -> std::result::Result<T, CliError> {
        let t = Instant::now();
        let out = f(&self.dir, &mut self.written).map_err(|source| CliError::Stage {
            stage,
            artifacts: self.written.clone(),
            source,
        })?;
        self.timings.stages.push((stage.to_string(), t.elapsed().as_secs_f64()));
        Ok(out)
    }
}

/// Runs data generation, GAN training, ratio estimation (sweeping `λ` unless
/// one is fixed), subsampling and evaluation, persisting every artifact in
/// `cfg.out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<PipelineOutcome, CliError> {
    cfg.validate()?;
    let spec = cfg.resolve_mixture()?;
    ensure_dir(&cfg.out_dir)?;
    let mut t = Tracker {
        dir: cfg.out_dir.clone(),
        written: Vec::new(),
        timings: Timings::default(),
    };
    let mut warnings = Vec::new();

    let data = t.stage("gen-data", |dir, w| {
        let data = generate_data(cfg, &spec)?;
        w.extend(write_data(cfg, dir, &data)?);
        Ok(data)
    })?;

    let gan = t.stage("train-gan", |dir, w| {
        let gan = train_gan(cfg, &data.train)?;
        let path = dir.join(GAN_FILE);
        write_text(&path, &gan.to_json())?;
        w.push(path);
        Ok(gan)
    })?;

    let needs_dre = cfg.sampler.method.needs_dre(cfg.sampler.ratio);
    let (sweep_run, dre) = if !needs_dre {
        (None, None)
    } else if let Some(lambda) = cfg.dre.lambda {
        let model = t.stage("train-dre", |dir, w| {
            let model = train_dre_fixed(cfg, &data.train, &gan, lambda)?;
            persist_dre(dir, w, &model)?;
            Ok(model)
        })?;
        (None, Some(model))
    } else {
        let run = t.stage("sweep-lambda", |dir, w| {
            let run = sweep(cfg, &data.train, &data.valid, &gan)?;
            let path = dir.join(SWEEP_FILE);
            write_text(&path, &sweep_table(&run.result))?;
            w.push(path);
            persist_dre(dir, w, run.selected())?;
            Ok(run)
        })?;
        warnings.extend(run.warnings.iter().cloned());
        let model = run.selected().clone();
        (Some(run), Some(model))
    };

    let (raw_quality, output) = t.stage("subsample", |dir, w| {
        let raw = gan.generate(cfg.eval.n_subsample, &mut stage_stream(cfg, "raw"))?;
        let raw_quality = quality_report(&raw, &spec)?;
        let out = subsample(cfg, &gan, dre.as_ref(), &data.valid)?;
        let path = dir.join(SAMPLES_FILE);
        write_samples(&path, &out.samples)?;
        w.push(path.clone());
        if cfg.write_binary {
            let bin = path.with_extension("drf1");
            write_samples(&bin, &out.samples)?;
            w.push(bin);
        }
        Ok((raw_quality, out))
    })?;
    warnings.extend(output.diagnostics.warnings.iter().cloned());

    let quality = t.stage("evaluate", |dir, w| {
        let q = quality_report(&output.samples, &spec)?;
        let path = dir.join(QUALITY_FILE);
        write_json(&path, &q)?;
        w.push(path);
        Ok(q)
    })?;

    let mut artifacts: Vec<String> = t
        .written
        .iter()
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    artifacts.push(REPORT_FILE.into());
    let report = Report {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        raw_quality,
        sweep: sweep_run.as_ref().map(|r| r.result.clone()),
        dre: dre.as_ref().and_then(DreSummary::of),
        sampler: SamplerSummary {
            method: cfg.sampler.method,
            ratio: cfg.sampler.ratio,
            n_samples: output.samples.rows(),
            diagnostics: output.diagnostics.clone(),
        },
        quality,
        artifacts,
        warnings,
    };
    let report_path = cfg.out_dir.join(REPORT_FILE);
    write_json(&report_path, &report).map_err(|source| CliError::Stage {
        stage: "report",
        artifacts: t.written.clone(),
        source,
    })?;
    write_json(&cfg.out_dir.join(TIMINGS_FILE), &t.timings)?;
    Ok(PipelineOutcome {
        report,
        timings: t.timings,
        data,
        gan,
        sweep: sweep_run,
        dre,
        samples: output.samples,
    })
}

fn persist_dre(dir: &Path, written: &mut Vec<PathBuf>, model: &DreModel) -> Result<()> {
    let path = dir.join(DRE_FILE);
    model.save(&path)?;
    written.push(path);
    if let Some(r) = &model.train_report {
        let path = dir.join(LOSS_CURVE_FILE);
        write_text(&path, &loss_curve_csv(r))?;
        written.push(path);
    }
    Ok(())
}
