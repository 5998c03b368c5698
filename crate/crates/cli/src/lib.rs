//! Pipeline orchestration for the 25-Gaussian subsampling benchmark:
//! configuration, sample files, and the stages behind each subcommand.

pub mod config;
pub mod pipeline;
pub mod samples;

pub use config::{PipelineConfig, RatioChoice, SamplerMethod};
pub use pipeline::{exit_code, run_pipeline, CliError, PipelineOutcome, Report};
