//! Density-ratio estimation under the Softplus loss, ratio-driven subsampling
//! of imperfect generators, and the 25-Gaussian benchmark.

pub mod dre;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod nn;
pub mod numeric;
pub mod samplers;
pub mod source;
pub mod world;

pub use error::{Error, Result};
pub use numeric::{DenseMatrix, RandomStream};
pub use source::{Generator, RatioSource};
