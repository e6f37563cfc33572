//! Gaussian-process primitives over the warped unit cube.
//!
//! Everything here is immutable after construction: a [`Posterior`] caches the
//! Cholesky factor of `k(X, X) + σ²I` and answers queries without mutation.

mod kernel;
mod mean;
mod memory;

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kernel::{Kernel, KernelKind};
pub use mean::{MeanFn, MeanKind};
pub use memory::{build_memory_gp, MemoryGp};

/// First rung of the diagonal jitter ladder, relative to the kernel scale.
pub const JITTER_START: f64 = 1e-10;
/// Last rung of the jitter ladder before giving up.
pub const JITTER_MAX: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A set of `(x, y)` observations with `x` in warped coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    /// `n x d`
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Observations {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Self {
        assert_eq!(x.nrows(), y.len(), "one value per input row");
        Observations { x, y }
    }

    pub fn empty(d: usize) -> Self {
        Observations {
            x: DMatrix::zeros(0, d),
            y: DVector::zeros(0),
        }
    }

    pub fn from_points(d: usize, points: &[(Vec<f64>, f64)]) -> Self {
        Observations {
            x: DMatrix::from_fn(points.len(), d, |i, j| points[i].0[j]),
            y: DVector::from_iterator(points.len(), points.iter().map(|p| p.1)),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Keeps the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Observations {
        Observations {
            x: self.x.select_rows(indices),
            y: DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.y[i])),
        }
    }
}

/// A (mean family, kernel family) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Structure {
    pub mean: MeanKind,
    pub kernel: KernelKind,
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.mean.name(), self.kernel.name())
    }
}

/// Mean function, kernel and observation noise: the object meta-training fits
/// and BO then holds fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpParams {
    pub mean: MeanFn,
    pub kernel: Kernel,
    pub log_noise_variance: f64,
}

impl GpParams {
    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    pub fn structure(&self) -> Structure {
        Structure {
            mean: self.mean.kind(),
            kernel: self.kernel.kind(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.mean.n_params() + self.kernel.n_params() + 1
    }

    /// Flattened free parameters: mean, then kernel log-parameters, then log noise variance.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut p = self.mean.params();
        p.extend(self.kernel.params());
        p.push(self.log_noise_variance);
        p
    }

    pub fn with_params(&self, p: &[f64]) -> GpParams {
        assert_eq!(p.len(), self.n_params());
        let mut out = self.clone();
        let nm = out.mean.n_params();
        let nk = out.kernel.n_params();
        out.mean.set_params(&p[..nm]);
        out.kernel.set_params(&p[nm..nm + nk]);
        out.log_noise_variance = p[nm + nk];
        out
    }

    /// Checks the mean and kernel agree on the input dimension `d`.
    pub fn check_dim(&self, d: usize) -> Result<()> {
        if let Some(k) = self.kernel.dim() {
            if k != d {
                return Err(Error::Dimension {
                    expected: k,
                    actual: d,
                });
            }
        }
        if let MeanFn::Linear { weights, .. } = &self.mean {
            if weights.len() != d {
                return Err(Error::Dimension {
                    expected: weights.len(),
                    actual: d,
                });
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// `k(X) + σ²I`, without jitter.
    pub fn noisy_gram(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut k = self.kernel.gram_sym(x)?;
        for i in 0..k.nrows() {
            k[(i, i)] += self.noise_variance();
        }
        Ok(k)
    }

    /// Model moments on `x` with derivatives for every free parameter.
    pub(crate) fn moments_with_grads(&self, x: &DMatrix<f64>) -> Result<ModelMoments> {
        self.check_dim(x.ncols())?;
        let mean = self.mean.eval(x)?;
        let mean_grads = self.mean.grads(x);
        let (mut cov, mut cov_grads) = self.kernel.gram_with_grads(x)?;
        let noise = self.noise_variance();
        for i in 0..cov.nrows() {
            cov[(i, i)] += noise;
        }
        cov_grads.push(DMatrix::from_diagonal_element(x.nrows(), x.nrows(), noise));
        Ok(ModelMoments {
            mean,
            mean_grads,
            cov,
            cov_grads,
        })
    }
}

/// Mean vector and covariance `k(X) + σ²I` with their parameter derivatives.
///
/// `mean_grads` covers the mean parameters; `cov_grads` covers the kernel
/// parameters followed by the log noise variance. Together they line up with
/// [`GpParams::to_vec`].
pub(crate) struct ModelMoments {
    pub mean: DVector<f64>,
    pub mean_grads: Vec<DVector<f64>>,
    pub cov: DMatrix<f64>,
    pub cov_grads: Vec<DMatrix<f64>>,
}

/// Cholesky factor of a covariance after diagonal jitter.
#[derive(Debug, Clone)]
pub struct Factor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl Factor {
    /// Factors `cov + jitter I`, escalating jitter ×10 from `1e-10·scale`
    /// up to `1e-4·scale`.
    pub fn new(cov: &DMatrix<f64>, scale: f64) -> Result<Self> {
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("covariance has non-finite entries".into()));
        }
        let scale = if scale.is_finite() && scale > 0.0 {
            scale
        } else {
            1.0
        };
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * scale;
            let mut m = cov.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(m) {
                if chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .all(|d| d.is_finite() && *d > 0.0)
                {
                    return Ok(Factor { chol, jitter });
                }
            }
            rel *= 10.0;
        }
        Err(Error::Numerical(format!(
            "Cholesky factorization failed for a {}x{} matrix even with jitter {:e}",
            cov.nrows(),
            cov.ncols(),
            JITTER_MAX * scale
        )))
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn ln_det(&self) -> f64 {
        2.0 * self
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ b`
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("triangular factor has a positive diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Factors `k(X) + σ²I` for the given parameters.
pub fn factor_noisy_gram(params: &GpParams, x: &DMatrix<f64>) -> Result<Factor> {
    Factor::new(&params.noisy_gram(x)?, params.kernel.scale())
}

/// A GP conditioned on observations.
#[derive(Debug, Clone)]
pub struct Posterior {
    params: GpParams,
    obs: Observations,
    factor: Option<Factor>,
    alpha: DVector<f64>,
}

impl Posterior {
    pub fn new(params: &GpParams, obs: &Observations) -> Result<Self> {
        params.check_dim(obs.dim())?;
        if obs.is_empty() {
            return Ok(Posterior {
                params: params.clone(),
                obs: obs.clone(),
                factor: None,
                alpha: DVector::zeros(0),
            });
        }
        let factor = factor_noisy_gram(params, &obs.x)?;
        let resid = &obs.y - params.mean.eval(&obs.x)?;
        let alpha = factor.solve(&resid);
        Ok(Posterior {
            params: params.clone(),
            obs: obs.clone(),
            factor: Some(factor),
            alpha,
        })
    }

    pub fn params(&self) -> &GpParams {
        &self.params
    }

    pub fn observations(&self) -> &Observations {
        &self.obs
    }

    pub fn noise_variance(&self) -> f64 {
        self.params.noise_variance()
    }

    /// Posterior mean and latent (noise-free) covariance at the rows of `xq`.
    pub fn predict(&self, xq: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let prior_mean = self.params.mean.eval(xq)?;
        let prior_cov = self.params.kernel.gram_sym(xq)?;
        let Some(factor) = &self.factor else {
            return Ok((prior_mean, prior_cov));
        };
        let kqx = self.params.kernel.gram(xq, &self.obs.x)?;
        let mean = prior_mean + &kqx * &self.alpha;
        let v = factor.solve_lower(&kqx.transpose());
        let mut cov = prior_cov - v.transpose() * &v;
        let sym = (&cov + cov.transpose()) * 0.5;
        cov.copy_from(&sym);
        Ok((mean, cov))
    }

    /// Posterior mean and latent marginal variance (clamped at zero).
    pub fn predict_marginal(&self, xq: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let prior_mean = self.params.mean.eval(xq)?;
        let prior_var = DVector::from_iterator(
            xq.nrows(),
            kernel::rows(xq)
                .iter()
                .map(|r| self.params.kernel.eval(r, r)),
        );
        let Some(factor) = &self.factor else {
            return Ok((prior_mean, prior_var));
        };
        let kqx = self.params.kernel.gram(xq, &self.obs.x)?;
        let mean = prior_mean + &kqx * &self.alpha;
        let v = factor.solve_lower(&kqx.transpose());
        let var = DVector::from_iterator(
            xq.nrows(),
            (0..xq.nrows()).map(|j| (prior_var[j] - v.column(j).norm_squared()).max(0.0)),
        );
        Ok((mean, var))
    }
}

/// Conditional GP moments at `xq` given `obs`.
pub fn posterior(
    params: &GpParams,
    obs: &Observations,
    xq: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    Posterior::new(params, obs)?.predict(xq)
}

/// Negative log marginal likelihood of one sub-dataset, in nats.
pub fn nll_subdataset(params: &GpParams, obs: &Observations) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::InvalidInput(
            "sub-dataset has no observations".into(),
        ));
    }
    params.check_dim(obs.dim())?;
    let factor = factor_noisy_gram(params, &obs.x)?;
    let resid = &obs.y - params.mean.eval(&obs.x)?;
    let alpha = factor.solve(&resid);
    Ok(0.5 * resid.dot(&alpha) + 0.5 * factor.ln_det() + 0.5 * obs.len() as f64 * LN_2PI)
}

/// NLL of one sub-dataset and its gradient with respect to [`GpParams::to_vec`].
pub fn nll_with_grad(params: &GpParams, obs: &Observations) -> Result<(f64, DVector<f64>)> {
    if obs.is_empty() {
        return Err(Error::InvalidInput(
            "sub-dataset has no observations".into(),
        ));
    }
    let m = params.moments_with_grads(&obs.x)?;
    let factor = Factor::new(&m.cov, params.kernel.scale())?;
    let resid = &obs.y - &m.mean;
    let alpha = factor.solve(&resid);
    let value = 0.5 * resid.dot(&alpha) + 0.5 * factor.ln_det() + 0.5 * obs.len() as f64 * LN_2PI;

    // d/dθ = ½ tr((K⁻¹ − ααᵀ) dK) − αᵀ dμ
    let mut w = factor.inverse();
    w.ger(-1.0, &alpha, &alpha, 1.0);
    let mut grad = Vec::with_capacity(params.n_params());
    grad.extend(m.mean_grads.iter().map(|g| -alpha.dot(g)));
    grad.extend(m.cov_grads.iter().map(|g| 0.5 * w.dot(g)));
    Ok((value, DVector::from_vec(grad)))
}
