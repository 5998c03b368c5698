//! Anything that can emit fresh samples on demand.

use crate::error::{Error, Result};
use crate::numeric::{DenseMatrix, RandomStream};

/// Rows produced per network evaluation when large draws are chunked.
pub const CHUNK_ROWS: usize = 8192;

/// A source of i.i.d. samples, e.g. a trained generator or a known mixture.
pub trait Generator: Sync {
    /// Dimension of each emitted row.
    fn dim(&self) -> usize;

    fn generate(&self, n: usize, rng: &mut RandomStream) -> Result<DenseMatrix>;
}

impl<G: Generator + ?Sized> Generator for &G {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn generate(&self, n: usize, rng: &mut RandomStream) -> Result<DenseMatrix> {
        (**self).generate(n, rng)
    }
}

/// Draws rows uniformly with replacement from a fixed table, e.g. a file of
/// precomputed features of fake samples.
#[derive(Debug, Clone)]
pub struct RowPool {
    rows: DenseMatrix,
}

impl RowPool {
    pub fn new(rows: DenseMatrix) -> Result<Self> {
        if rows.rows() == 0 {
            return Err(Error::Usage("row pool is empty".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &DenseMatrix {
        &self.rows
    }
}

impl Generator for RowPool {
    fn dim(&self) -> usize {
        self.rows.cols()
    }

    fn generate(&self, n: usize, rng: &mut RandomStream) -> Result<DenseMatrix> {
        let idx: Vec<usize> = (0..n).map(|_| rng.index(self.rows.rows())).collect();
        Ok(self.rows.select_rows(&idx))
    }
}

/// Anything that assigns a nonnegative density ratio to each sample row.
pub trait RatioSource: Sync {
    fn ratios(&self, x: &DenseMatrix) -> Result<Vec<f64>>;
}

impl<R: RatioSource + ?Sized> RatioSource for &R {
    fn ratios(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        (**self).ratios(x)
    }
}

/// Wraps a per-row function as a [`RatioSource`].
pub struct RatioFn<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> RatioSource for RatioFn<F> {
    fn ratios(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        x.row_iter()
            .map(|row| {
                let r = (self.0)(row);
                if r.is_finite() && r >= 0.0 {
                    Ok(r)
                } else {
                    Err(Error::Domain(format!("ratio {r} is not a finite nonnegative value")))
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_pool_draws_existing_rows() {
        let table = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let pool = RowPool::new(table).unwrap();
        let draws = pool.generate(50, &mut RandomStream::new(0, 0)).unwrap();
        assert_eq!(draws.rows(), 50);
        assert!(draws.row_iter().all(|r| r == [1.0, 2.0] || r == [3.0, 4.0]));
        assert!(RowPool::new(DenseMatrix::zeros(0, 2)).is_err());
    }
}
