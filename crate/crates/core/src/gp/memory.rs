use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// A lookup-table GP: stores a mean vector and covariance matrix on a set of
/// anchor inputs and answers every query with the values of the nearest
/// anchor (Euclidean distance, lowest index on ties).
///
/// On its own anchors it reproduces the stored moments exactly, so any
/// moment-matching divergence against those moments is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryGp {
    anchors: DMatrix<f64>,
    mean_values: DVector<f64>,
    cov_values: DMatrix<f64>,
}

impl MemoryGp {
    pub fn new(
        anchors: DMatrix<f64>,
        mean_values: DVector<f64>,
        cov_values: DMatrix<f64>,
    ) -> Result<Self> {
        let m = anchors.nrows();
        if m == 0 {
            return Err(Error::InvalidInput(
                "memory GP needs at least one anchor".into(),
            ));
        }
        if mean_values.len() != m {
            return Err(Error::Dimension {
                expected: m,
                actual: mean_values.len(),
            });
        }
        if cov_values.shape() != (m, m) {
            return Err(Error::Dimension {
                expected: m,
                actual: cov_values.nrows(),
            });
        }
        let asym = (&cov_values - cov_values.transpose()).amax();
        let scale = cov_values.amax().max(1e-300);
        if asym > 1e-10 * scale {
            return Err(Error::InvalidInput(
                "memory GP covariance is not symmetric".into(),
            ));
        }
        let eig = SymmetricEigen::new(cov_values.clone());
        if eig.eigenvalues.iter().any(|&v| v < -1e-9 * scale) {
            return Err(Error::InvalidInput(
                "memory GP covariance is not positive semidefinite".into(),
            ));
        }
        Ok(MemoryGp {
            anchors,
            mean_values,
            cov_values,
        })
    }

    pub fn anchors(&self) -> &DMatrix<f64> {
        &self.anchors
    }

    /// Index of the nearest anchor to `x`.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, row) in self.anchors.row_iter().enumerate() {
            let d: f64 = row.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        self.mean_values[self.nearest(x)]
    }

    pub fn cov(&self, x: &[f64], y: &[f64]) -> f64 {
        self.cov_values[(self.nearest(x), self.nearest(y))]
    }

    /// Mean vector and covariance matrix on the rows of `xq`.
    pub fn moments(&self, xq: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let idx: Vec<usize> = xq
            .row_iter()
            .map(|r| self.nearest(&r.iter().copied().collect::<Vec<_>>()))
            .collect();
        let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.mean_values[i]));
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |a, b| {
            self.cov_values[(idx[a], idx[b])]
        });
        (mean, cov)
    }
}

/// Builds a [`MemoryGp`] from anchors and stored moments.
pub fn build_memory_gp(
    inputs: DMatrix<f64>,
    mean_values: DVector<f64>,
    cov_values: DMatrix<f64>,
) -> Result<MemoryGp> {
    MemoryGp::new(inputs, mean_values, cov_values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_anchor() -> MemoryGp {
        MemoryGp::new(
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DVector::from_vec(vec![3.0, 4.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn exact_anchor_retrieval() {
        let gp = two_anchor();
        assert_eq!(gp.mean(&[1.0]), 4.0);
        assert_eq!(gp.cov(&[1.0], &[1.0]), 1.0);
        assert_eq!(gp.cov(&[0.1], &[0.9]), 0.5);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let gp = two_anchor();
        assert_eq!(gp.nearest(&[0.5]), 0);
        assert_eq!(gp.mean(&[0.5]), 3.0);
    }

    #[test]
    fn rejects_empty_and_indefinite() {
        assert!(MemoryGp::new(
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DMatrix::zeros(0, 0)
        )
        .is_err());
        let bad = MemoryGp::new(
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        );
        assert!(bad.is_err());
    }
}
