use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ratio_subsampler::dre::DreModel;
use ratio_subsampler::evaluation::quality_report;
use ratio_subsampler::losses::LossKind;
use ratio_subsampler::world::ToyGan;
use ratio_subsampler::Error;
use ratio_subsampler_cli::config::{PipelineConfig, RatioChoice, SamplerMethod};
use ratio_subsampler_cli::pipeline::{self, CliError};
use ratio_subsampler_cli::samples::{read_samples, write_samples};

const THREADS_VAR: &str = "RATIO_SUBSAMPLER_THREADS";

#[derive(Parser)]
#[command(name = "ratio-subsampler", version, about = "Density-ratio subsampling of an imperfect GAN on the 25-Gaussian benchmark")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Config file plus overrides for the most used keys.
#[derive(Args)]
struct Common {
    /// JSON pipeline config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the single-core desk preset instead of the full-scale defaults.
    #[arg(long, global = true)]
    desk: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    n_train: Option<usize>,
    #[arg(long, global = true)]
    n_valid: Option<usize>,
    #[arg(long, global = true)]
    n_test: Option<usize>,
    #[arg(long, global = true)]
    gan_epochs: Option<usize>,
    /// sp, ulsif, dskl or barr.
    #[arg(long, global = true)]
    loss: Option<LossKind>,
    /// Fixed penalty weight; disables the sweep.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Comma-separated sweep grid.
    #[arg(long, global = true, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long, global = true)]
    dre_epochs: Option<usize>,
    #[arg(long, global = true)]
    dre_lr: Option<f64>,
    /// Comma-separated hidden widths of the ratio network.
    #[arg(long, global = true, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// none, rs, mh, sir or drs.
    #[arg(long, global = true)]
    method: Option<SamplerMethod>,
    /// dre, discriminator-odds, discriminator-exp or calibrated.
    #[arg(long, global = true, value_parser = parse_ratio)]
    ratio: Option<RatioChoice>,
    #[arg(long, global = true)]
    n_subsample: Option<usize>,
    /// Also write DRF1 twins of sample files.
    #[arg(long, global = true)]
    binary: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the train, validation and test sets.
    GenData,
    /// Train the toy GAN on the training set.
    TrainGan {
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Train one ratio model at a fixed penalty weight.
    TrainDre {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        gan: Option<PathBuf>,
    },
    /// Train one ratio model per grid value and keep the KS-selected one.
    SweepLambda {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        gan: Option<PathBuf>,
    },
    /// Draw subsamples from the GAN with the configured sampler.
    Subsample {
        #[arg(long)]
        gan: Option<PathBuf>,
        #[arg(long)]
        dre: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Output sample file; a `.drf1` extension selects the binary format.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a sample file against the mixture.
    Evaluate {
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Every stage in sequence, writing a report.
    RunPipeline,
}

fn parse_ratio(s: &str) -> Result<RatioChoice, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown ratio source {s:?}"))
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None if self.desk => PipelineConfig::desk(),
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(self.seed => cfg.seed);
        set!(self.out_dir => cfg.out_dir);
        set!(self.n_train => cfg.data.n_train);
        set!(self.n_valid => cfg.data.n_valid);
        set!(self.n_test => cfg.data.n_test);
        set!(self.gan_epochs => cfg.gan.epochs);
        set!(self.loss => cfg.dre.loss_kind);
        set!(self.grid => cfg.dre.grid);
        set!(self.dre_epochs => cfg.dre.epochs);
        set!(self.widths => cfg.dre.widths);
        set!(self.method => cfg.sampler.method);
        set!(self.ratio => cfg.sampler.ratio);
        set!(self.n_subsample => cfg.eval.n_subsample);
        if self.lambda.is_some() {
            cfg.dre.lambda = self.lambda;
        }
        if self.dre_lr.is_some() {
            cfg.dre.lr = self.dre_lr;
        }
        cfg.write_binary |= self.binary;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn or_default(path: &Option<PathBuf>, cfg: &PipelineConfig, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| cfg.out_dir.join(name))
}

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_gan(path: &Path) -> Result<ToyGan, Error> {
    ToyGan::from_json(&read_text(path)?)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.common.resolve()?;
    if matches!(cli.command, Command::RunPipeline) {
        let out = pipeline::run_pipeline(&cfg)?;
        for w in &out.report.warnings {
            eprintln!("warning: {w}");
        }
        println!("{}", serde_json::to_string_pretty(&out.report).expect("report serializes"));
        return Ok(());
    }
    pipeline::ensure_dir(&cfg.out_dir)?;
    let spec = cfg.resolve_mixture()?;
    let dir = cfg.out_dir.clone();
    match &cli.command {
        Command::GenData => {
            let data = pipeline::generate_data(&cfg, &spec)?;
            for p in pipeline::write_data(&cfg, &dir, &data)? {
                println!("{}", p.display());
            }
        }
        Command::TrainGan { train } => {
            let train = read_samples(&or_default(train, &cfg, pipeline::TRAIN_FILE))?;
            let gan = pipeline::train_gan(&cfg, &train)?;
            let path = dir.join(pipeline::GAN_FILE);
            pipeline::write_text(&path, &gan.to_json())?;
            println!("{}", path.display());
        }
        Command::TrainDre { train, gan } => {
            let lambda = cfg
                .dre
                .lambda
                .ok_or_else(|| Error::Usage("train-dre needs --lambda or dre.lambda in the config".into()))?;
            let train = read_samples(&or_default(train, &cfg, pipeline::TRAIN_FILE))?;
            let gan = load_gan(&or_default(gan, &cfg, pipeline::GAN_FILE))?;
            let model = pipeline::train_dre_fixed(&cfg, &train, &gan, lambda)?;
            println!("{}", save_dre(&dir, &model)?.display());
        }
        Command::SweepLambda { train, valid, gan } => {
            let train = read_samples(&or_default(train, &cfg, pipeline::TRAIN_FILE))?;
            let valid = read_samples(&or_default(valid, &cfg, pipeline::VALID_FILE))?;
            let gan = load_gan(&or_default(gan, &cfg, pipeline::GAN_FILE))?;
            let run = pipeline::sweep(&cfg, &train, &valid, &gan)?;
            for w in &run.warnings {
                eprintln!("warning: {w}");
            }
            let table = pipeline::sweep_table(&run.result);
            pipeline::write_text(&dir.join(pipeline::SWEEP_FILE), &table)?;
            save_dre(&dir, run.selected())?;
            print!("{table}");
        }
        Command::Subsample { gan, dre, valid, output } => {
            let gan = load_gan(&or_default(gan, &cfg, pipeline::GAN_FILE))?;
            let valid = read_samples(&or_default(valid, &cfg, pipeline::VALID_FILE))?;
            let model = if cfg.sampler.method.needs_dre(cfg.sampler.ratio) {
                Some(DreModel::load(&or_default(dre, &cfg, pipeline::DRE_FILE))?)
            } else {
                None
            };
            let out = pipeline::subsample(&cfg, &gan, model.as_ref(), &valid)?;
            for w in &out.diagnostics.warnings {
                eprintln!("warning: {w}");
            }
            let path = or_default(output, &cfg, pipeline::SAMPLES_FILE);
            write_samples(&path, &out.samples)?;
            println!("{}", path.display());
        }
        Command::Evaluate { samples } => {
            let x = read_samples(&or_default(samples, &cfg, pipeline::SAMPLES_FILE))?;
            let q = quality_report(&x, &spec)?;
            pipeline::write_json(&dir.join(pipeline::QUALITY_FILE), &q)?;
            println!("{}", serde_json::to_string_pretty(&q).expect("report serializes"));
        }
        Command::RunPipeline => unreachable!("handled above"),
    }
    Ok(())
}

fn save_dre(dir: &Path, model: &DreModel) -> Result<PathBuf, Error> {
    let path = dir.join(pipeline::DRE_FILE);
    model.save(&path)?;
    if let Some(r) = &model.train_report {
        pipeline::write_text(&dir.join(pipeline::LOSS_CURVE_FILE), &pipeline::loss_curve_csv(r))?;
    }
    Ok(path)
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().map_err(CliError::from).and_then(|()| run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Stage { artifacts, .. } = &e {
                for a in artifacts {
                    eprintln!("  kept {}", a.display());
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
