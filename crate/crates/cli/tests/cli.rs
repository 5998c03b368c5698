use std::path::Path;
use std::process::Command;

use ratio_subsampler::evaluation::quality_report;
use ratio_subsampler::world::MixtureSpec;
use ratio_subsampler::Generator;
use ratio_subsampler_cli::config::{PipelineConfig, SamplerMethod};
use ratio_subsampler_cli::pipeline::{self, stage_stream};
use ratio_subsampler_cli::samples::read_samples;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ratio-subsampler"))
}

fn tiny(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    cfg.seed = 11;
    cfg.out_dir = dir.to_path_buf();
    cfg.data.n_train = 2048;
    cfg.data.n_valid = 2048;
    cfg.data.n_test = 256;
    cfg.gan.epochs = 2;
    cfg.gan.hidden = vec![16, 16];
    cfg.dre.epochs = 1;
    cfg.dre.batch = 256;
    cfg.dre.widths = vec![16, 8];
    cfg.dre.lambda = Some(0.01);
    cfg.sampler.rs_burn_in = 1000;
    cfg.sampler.sir_pool_size = 2000;
    cfg.sampler.mh_chain_len = 5;
    cfg.eval.n_subsample = 300;
    cfg
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_data_writes_the_default_counts() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin().args(["gen-data", "--out-dir"]).arg(dir.path()).status().unwrap();
    assert!(status.success());
    for (name, rows) in [("train.csv", 50_000), ("valid.csv", 50_000), ("test.csv", 10_000)] {
        let m = read_samples(&dir.path().join(name)).unwrap();
        assert_eq!((m.rows(), m.cols()), (rows, 2), "{name}");
    }
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let status = bin()
            .args(["gen-data", "--seed", "5", "--n-train", "300", "--n-valid", "200", "--n-test", "100", "--binary", "--out-dir"])
            .arg(d.path())
            .status()
            .unwrap();
        assert!(status.success());
    }
    for name in ["train.csv", "valid.csv", "test.csv", "train.drf1"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    let csv = read_samples(&a.path().join("train.csv")).unwrap();
    let bin = read_samples(&a.path().join("train.drf1")).unwrap();
    assert_eq!(csv, bin);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["gen-data", "--n-train", "0", "--out-dir"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "no_such_key": 2}"#).unwrap();
    let out = bin().args(["gen-data", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin()
        .args(["evaluate", "--samples"])
        .arg(dir.path().join("missing.csv"))
        .args(["--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    let garbled = dir.path().join("garbled.csv");
    std::fs::write(&garbled, "x0,x1\n1,oops\n").unwrap();
    let out = bin().args(["evaluate", "--samples"]).arg(&garbled).args(["--out-dir"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));

    let out = bin().args(["gen-data", "--out-dir"]).arg(dir.path()).env("RATIO_SUBSAMPLER_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_commands_hand_off_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let config = write_config(dir.path(), &cfg);
    let run = |args: &[&str]| {
        let out = bin().args(args).arg("--config").arg(&config).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["gen-data"]);
    run(&["train-gan"]);
    run(&["train-dre"]);
    run(&["subsample", "--method", "sir"]);
    let samples = read_samples(&dir.path().join("samples.csv")).unwrap();
    assert_eq!(samples.rows(), 300);
    let text = run(&["evaluate"]);
    let q: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(q["n_samples"], 300);
    assert!(dir.path().join("quality.json").exists());
    assert!(dir.path().join("dre_loss.csv").exists());

    let table = run(&["sweep-lambda", "--grid", "0.05,0,0.05"]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "lambda,ks_stat,selected");
    assert_eq!(lines.len(), 3);
    assert_eq!(lines.iter().filter(|l| l.ends_with(",1")).count(), 1);
}

#[test]
fn sampler_none_reports_raw_generator_quality() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.sampler.method = SamplerMethod::None;
    let out = pipeline::run_pipeline(&cfg).unwrap();
    assert!(out.dre.is_none());
    let raw = out.gan.generate(cfg.eval.n_subsample, &mut stage_stream(&cfg, "raw")).unwrap();
    let q = quality_report(&raw, &MixtureSpec::default()).unwrap();
    assert_eq!(out.report.quality, q);
    assert_eq!(out.report.raw_quality, q);
}

#[test]
fn sir_returns_exactly_the_target_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.sampler.method = SamplerMethod::Sir;
    cfg.sampler.sir_pool_size = 20_000;
    cfg.eval.n_subsample = 10_000;
    let out = pipeline::run_pipeline(&cfg).unwrap();
    assert_eq!(out.samples.rows(), 10_000);
    assert_eq!(read_samples(&dir.path().join("samples.csv")).unwrap().rows(), 10_000);
}

#[test]
fn sweep_tables_select_exactly_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.dre.lambda = None;
    cfg.dre.grid = vec![0.0, 0.005, 0.01, 0.05, 0.1];
    let data = pipeline::generate_data(&cfg, &MixtureSpec::default()).unwrap();
    let gan = pipeline::train_gan(&cfg, &data.train).unwrap();
    let run = pipeline::sweep(&cfg, &data.train, &data.valid, &gan).unwrap();
    let table = pipeline::sweep_table(&run.result);
    assert_eq!(table.lines().count(), 6);
    assert_eq!(table.lines().filter(|l| l.ends_with(",1")).count(), 1);
    assert!(run.warnings.is_empty());
    let best = run.result.ks_stats.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(run.result.ks_stats[run.result.selected_index], best);

    // The selected model is the one a fixed-λ run trains.
    let fixed = pipeline::train_dre_fixed(&cfg, &data.train, &gan, run.result.selected_lambda).unwrap();
    assert_eq!(fixed.ratio_net.params(), run.selected().ratio_net.params());

    cfg.dre.grid = vec![0.05];
    let run = pipeline::sweep(&cfg, &data.train, &data.valid, &gan).unwrap();
    assert_eq!(run.result.selected_lambda, 0.05);

    cfg.dre.grid = vec![0.01, 0.0, 0.01];
    let run = pipeline::sweep(&cfg, &data.train, &data.valid, &gan).unwrap();
    assert_eq!(run.result.grid, vec![0.01, 0.0]);
    assert_eq!(run.warnings.len(), 1);
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let mut cfg = tiny(d.path());
        cfg.out_dir = d.path().to_path_buf();
        cfg.sampler.method = SamplerMethod::Mh;
        pipeline::run_pipeline(&cfg).unwrap();
    }
    for name in ["samples.csv", "quality.json", "gan.json", "dre.json"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    // The report names its own directory nowhere, so it matches too.
    assert_eq!(
        std::fs::read(a.path().join("report.json")).unwrap(),
        std::fs::read(b.path().join("report.json")).unwrap()
    );
}

#[test]
fn failed_stages_list_their_partial_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.mixture_path = Some(dir.path().join("absent.json"));
    let err = pipeline::run_pipeline(&cfg).err().unwrap();
    assert_eq!(err.exit_code(), 3);

    let mut cfg = tiny(dir.path());
    cfg.sampler.method = SamplerMethod::Rs;
    cfg.sampler.ratio = ratio_subsampler_cli::RatioChoice::Dre;
    cfg.dre.feature_map = Some(ratio_subsampler::dre::FeatureMap::Precomputed {
        dim: 4,
        file_path: dir.path().join("no-features.drf1"),
    });
    match pipeline::run_pipeline(&cfg) {
        Err(pipeline::CliError::Stage { stage, artifacts, .. }) => {
            assert_eq!(stage, "train-dre");
            assert!(artifacts.iter().any(|p| p.ends_with("gan.json")));
            assert!(artifacts.iter().any(|p| p.ends_with("train.csv")));
        }
        other => panic!("expected a stage failure, got {:?}", other.err()),
    }
}
