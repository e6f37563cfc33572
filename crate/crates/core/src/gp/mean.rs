use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanKind {
    Constant,
    Linear,
}

impl MeanKind {
    pub const ALL: [MeanKind; 2] = [MeanKind::Constant, MeanKind::Linear];

    pub fn name(self) -> &'static str {
        match self {
            MeanKind::Constant => "constant",
            MeanKind::Linear => "linear",
        }
    }
}

impl std::str::FromStr for MeanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" | "const" => Ok(MeanKind::Constant),
            "linear" => Ok(MeanKind::Linear),
            _ => Err(Error::InvalidInput(format!("unknown mean function `{s}`"))),
        }
    }
}

/// Prior mean function over the warped input cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanFn {
    Constant { c: f64 },
    Linear { weights: Vec<f64>, bias: f64 },
}

impl MeanFn {
    pub fn kind(&self) -> MeanKind {
        match self {
            MeanFn::Constant { .. } => MeanKind::Constant,
            MeanFn::Linear { .. } => MeanKind::Linear,
        }
    }

    pub fn zero() -> Self {
        MeanFn::Constant { c: 0.0 }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        match self {
            MeanFn::Linear { weights, .. } if weights.len() != d => Err(Error::Dimension {
                expected: weights.len(),
                actual: d,
            }),
            _ => Ok(()),
        }
    }

    pub fn eval_point(&self, x: &[f64]) -> f64 {
        match self {
            MeanFn::Constant { c } => *c,
            MeanFn::Linear { weights, bias } => {
                weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias
            }
        }
    }

    /// Evaluates the mean at each row of `x`.
    pub fn eval(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_dim(x.ncols())?;
        Ok(match self {
            MeanFn::Constant { c } => DVector::from_element(x.nrows(), *c),
            MeanFn::Linear { weights, bias } => {
                let w = DVector::from_column_slice(weights);
                x * w + DVector::from_element(x.nrows(), *bias)
            }
        })
    }

    pub fn n_params(&self) -> usize {
        match self {
            MeanFn::Constant { .. } => 1,
            MeanFn::Linear { weights, .. } => weights.len() + 1,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            MeanFn::Constant { c } => vec![*c],
            MeanFn::Linear { weights, bias } => {
                let mut p = weights.clone();
                p.push(*bias);
                p
            }
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        match self {
            MeanFn::Constant { c } => *c = p[0],
            MeanFn::Linear { weights, bias } => {
                let d = weights.len();
                weights.copy_from_slice(&p[..d]);
                *bias = p[d];
            }
        }
    }

    /// Derivative of the mean vector with respect to each parameter.
    pub fn grads(&self, x: &DMatrix<f64>) -> Vec<DVector<f64>> {
        let n = x.nrows();
        match self {
            MeanFn::Constant { .. } => vec![DVector::from_element(n, 1.0)],
            MeanFn::Linear { weights, .. } => {
                let mut g: Vec<DVector<f64>> = (0..weights.len())
                    .map(|l| x.column(l).into_owned())
                    .collect();
                g.push(DVector::from_element(n, 1.0));
                g
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_linear() {
        let x = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.5, 0.5, 0.9, 0.0]);
        assert_eq!(MeanFn::zero().eval(&x).unwrap(), DVector::zeros(3));
        assert_eq!(
            MeanFn::Constant { c: 2.0 }.eval(&x).unwrap(),
            DVector::from_element(3, 2.0)
        );
        let lin = MeanFn::Linear {
            weights: vec![1.0, 1.0],
            bias: 0.0,
        };
        assert!((lin.eval(&x).unwrap()[1] - 1.0).abs() < 1e-15);
        let bad = MeanFn::Linear {
            weights: vec![1.0],
            bias: 0.0,
        };
        assert!(matches!(bad.eval(&x), Err(Error::Dimension { .. })));
    }
}
