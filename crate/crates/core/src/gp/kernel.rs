use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    SquaredExponential,
    Matern32,
    Matern52,
    DotProduct,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [
        KernelKind::SquaredExponential,
        KernelKind::Matern32,
        KernelKind::Matern52,
        KernelKind::DotProduct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::SquaredExponential => "squared_exponential",
            KernelKind::Matern32 => "matern32",
            KernelKind::Matern52 => "matern52",
            KernelKind::DotProduct => "dot_product",
        }
    }

    pub fn is_stationary(self) -> bool {
        !matches!(self, KernelKind::DotProduct)
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se" | "squared_exponential" | "rbf" => Ok(KernelKind::SquaredExponential),
            "matern32" => Ok(KernelKind::Matern32),
            "matern52" => Ok(KernelKind::Matern52),
            "dot" | "dot_product" => Ok(KernelKind::DotProduct),
            _ => Err(Error::InvalidInput(format!("unknown kernel `{s}`"))),
        }
    }
}

/// Covariance functions, all parameterized in log space.
///
/// The stationary kernels use ARD length scales; `a = exp(log_amplitude)` and
/// the kernel variance at zero distance is `a^2`. The dot-product kernel is
/// `exp(log_bias_variance) + exp(log_weight_variance) * <x, x'>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    SquaredExponential {
        log_amplitude: f64,
        log_length_scales: Vec<f64>,
    },
    Matern32 {
        log_amplitude: f64,
        log_length_scales: Vec<f64>,
    },
    Matern52 {
        log_amplitude: f64,
        log_length_scales: Vec<f64>,
    },
    DotProduct {
        log_bias_variance: f64,
        log_weight_variance: f64,
    },
}

impl Kernel {
    pub fn stationary(kind: KernelKind, log_amplitude: f64, log_length_scales: Vec<f64>) -> Self {
        match kind {
            KernelKind::SquaredExponential => Kernel::SquaredExponential {
                log_amplitude,
                log_length_scales,
            },
            KernelKind::Matern32 => Kernel::Matern32 {
                log_amplitude,
                log_length_scales,
            },
            KernelKind::Matern52 => Kernel::Matern52 {
                log_amplitude,
                log_length_scales,
            },
            KernelKind::DotProduct => panic!("dot product kernel is not stationary"),
        }
    }

    pub fn kind(&self) -> KernelKind {
        match self {
            Kernel::SquaredExponential { .. } => KernelKind::SquaredExponential,
            Kernel::Matern32 { .. } => KernelKind::Matern32,
            Kernel::Matern52 { .. } => KernelKind::Matern52,
            Kernel::DotProduct { .. } => KernelKind::DotProduct,
        }
    }

    fn stationary_parts(&self) -> Option<(f64, &[f64])> {
        match self {
            Kernel::SquaredExponential {
                log_amplitude,
                log_length_scales,
            }
            | Kernel::Matern32 {
                log_amplitude,
                log_length_scales,
            }
            | Kernel::Matern52 {
                log_amplitude,
                log_length_scales,
            } => Some((*log_amplitude, log_length_scales)),
            Kernel::DotProduct { .. } => None,
        }
    }

    /// Input dimension the kernel is tied to, if any.
    pub fn dim(&self) -> Option<usize> {
        self.stationary_parts().map(|(_, ls)| ls.len())
    }

    /// Typical magnitude of the kernel's variance; scales diagonal jitter.
    pub fn scale(&self) -> f64 {
        match self {
            Kernel::DotProduct {
                log_bias_variance,
                log_weight_variance,
            } => log_bias_variance.exp() + log_weight_variance.exp(),
            _ => {
                let (la, _) = self.stationary_parts().unwrap();
                (2.0 * la).exp()
            }
        }
    }

    pub fn n_params(&self) -> usize {
        match self.stationary_parts() {
            Some((_, ls)) => 1 + ls.len(),
            None => 2,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Kernel::DotProduct {
                log_bias_variance,
                log_weight_variance,
            } => vec![*log_bias_variance, *log_weight_variance],
            _ => {
                let (la, ls) = self.stationary_parts().unwrap();
                std::iter::once(la).chain(ls.iter().copied()).collect()
            }
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        match self {
            Kernel::SquaredExponential {
                log_amplitude,
                log_length_scales,
            }
            | Kernel::Matern32 {
                log_amplitude,
                log_length_scales,
            }
            | Kernel::Matern52 {
                log_amplitude,
                log_length_scales,
            } => {
                *log_amplitude = p[0];
                log_length_scales.copy_from_slice(&p[1..]);
            }
            Kernel::DotProduct {
                log_bias_variance,
                log_weight_variance,
            } => {
                *log_bias_variance = p[0];
                *log_weight_variance = p[1];
            }
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        match self.dim() {
            Some(k) if k != d => Err(Error::Dimension {
                expected: k,
                actual: d,
            }),
            _ => Ok(()),
        }
    }

    /// `k(x, x')` for two points.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Kernel::DotProduct {
                log_bias_variance,
                log_weight_variance,
            } => {
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                log_bias_variance.exp() + log_weight_variance.exp() * dot
            }
            _ => {
                let (la, ls) = self.stationary_parts().unwrap();
                let r2: f64 = x
                    .iter()
                    .zip(y)
                    .zip(ls)
                    .map(|((a, b), l)| ((a - b) / l.exp()).powi(2))
                    .sum();
                (2.0 * la).exp() * self.profile(r2)
            }
        }
    }

    /// Unit-amplitude stationary profile as a function of squared scaled distance.
    fn profile(&self, r2: f64) -> f64 {
        match self.kind() {
            KernelKind::SquaredExponential => (-0.5 * r2).exp(),
            KernelKind::Matern32 => {
                let s = SQRT3 * r2.sqrt();
                (1.0 + s) * (-s).exp()
            }
            KernelKind::Matern52 => {
                let r = r2.sqrt();
                let s = SQRT5 * r;
                (1.0 + s + 5.0 * r2 / 3.0) * (-s).exp()
            }
            KernelKind::DotProduct => unreachable!(),
        }
    }

    /// `-2 d profile / d(r^2)`: multiplies `r_l^2` to give `d k / d log l_l` (unit amplitude).
    fn profile_length_factor(&self, r2: f64) -> f64 {
        match self.kind() {
            KernelKind::SquaredExponential => (-0.5 * r2).exp(),
            KernelKind::Matern32 => 3.0 * (-SQRT3 * r2.sqrt()).exp(),
            KernelKind::Matern52 => {
                let s = SQRT5 * r2.sqrt();
                5.0 / 3.0 * (1.0 + s) * (-s).exp()
            }
            KernelKind::DotProduct => unreachable!(),
        }
    }

    /// Cross-covariance matrix between the rows of `x` and the rows of `y`.
    pub fn gram(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x.ncols())?;
        if x.ncols() != y.ncols() {
            return Err(Error::Dimension {
                expected: x.ncols(),
                actual: y.ncols(),
            });
        }
        let xr: Vec<Vec<f64>> = rows(x);
        let yr: Vec<Vec<f64>> = rows(y);
        Ok(DMatrix::from_fn(x.nrows(), y.nrows(), |i, j| {
            self.eval(&xr[i], &yr[j])
        }))
    }

    /// Symmetric Gram matrix of `x` with itself.
    pub fn gram_sym(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x.ncols())?;
        let xr = rows(x);
        let n = x.nrows();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(&xr[i], &xr[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// Gram matrix of `x` plus its derivative with respect to each log-parameter,
    /// in the order of [`Kernel::params`].
    pub fn gram_with_grads(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        self.check_dim(x.ncols())?;
        let n = x.nrows();
        let d = x.ncols();
        let xr = rows(x);
        let mut k = DMatrix::zeros(n, n);
        let mut grads = vec![DMatrix::zeros(n, n); self.n_params()];
        match self {
            Kernel::DotProduct {
                log_bias_variance,
                log_weight_variance,
            } => {
                let (b, w) = (log_bias_variance.exp(), log_weight_variance.exp());
                for i in 0..n {
                    for j in 0..=i {
                        let dot: f64 = xr[i].iter().zip(&xr[j]).map(|(a, c)| a * c).sum();
                        let v = b + w * dot;
                        set_sym(&mut k, i, j, v);
                        set_sym(&mut grads[0], i, j, b);
                        set_sym(&mut grads[1], i, j, w * dot);
                    }
                }
            }
            _ => {
                let (la, ls) = self.stationary_parts().unwrap();
                let amp2 = (2.0 * la).exp();
                let inv_l: Vec<f64> = ls.iter().map(|l| (-l).exp()).collect();
                let mut r2l = vec![0.0; d];
                for i in 0..n {
                    for j in 0..=i {
                        let mut r2 = 0.0;
                        for l in 0..d {
                            let s = (xr[i][l] - xr[j][l]) * inv_l[l];
                            r2l[l] = s * s;
                            r2 += r2l[l];
                        }
                        let v = amp2 * self.profile(r2);
                        set_sym(&mut k, i, j, v);
                        set_sym(&mut grads[0], i, j, 2.0 * v);
                        if i != j {
                            let f = amp2 * self.profile_length_factor(r2);
                            for l in 0..d {
                                set_sym(&mut grads[1 + l], i, j, f * r2l[l]);
                            }
                        }
                    }
                }
            }
        }
        Ok((k, grads))
    }
}

fn set_sym(m: &mut DMatrix<f64>, i: usize, j: usize, v: f64) {
    m[(i, j)] = v;
    m[(j, i)] = v;
}

pub(crate) fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| x.row(i).iter().copied().collect())
        .collect()
}
