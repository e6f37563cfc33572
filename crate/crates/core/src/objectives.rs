//! Training objectives: multi-task marginal likelihood and moment-matching
//! divergences between the empirical distribution on matching inputs and the
//! model's prediction there.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::MatchingDataset;
use crate::error::{Error, Result};
use crate::gp::{nll_subdataset, nll_with_grad, Factor, GpParams, Observations};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Eigenvalues at or below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-9;

/// Diagonal shift used by [`DegenerateMode::EpsilonJitter`].
pub const DEGENERATE_EPSILON: f64 = 1e-6;

/// Default weight of the divergence term in the combined objective.
pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveKind {
    Nll,
    Kl,
    NllPlusKl { lambda: f64 },
}

impl ObjectiveKind {
    pub fn needs_matching(self) -> bool {
        match self {
            ObjectiveKind::Nll => false,
            ObjectiveKind::Kl => true,
            ObjectiveKind::NllPlusKl { lambda } => lambda > 0.0,
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            ObjectiveKind::NllPlusKl { lambda } if !(lambda.is_finite() && lambda >= 0.0) => Err(
                Error::InvalidInput(format!("lambda must be finite and >= 0, got {lambda}")),
            ),
            _ => Ok(()),
        }
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    /// `nll`, `kl`, `nllkl` (λ = 10) or `nllkl:<λ>`.
    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "nll" => ObjectiveKind::Nll,
            "kl" => ObjectiveKind::Kl,
            "nllkl" | "nll+kl" => ObjectiveKind::NllPlusKl {
                lambda: DEFAULT_LAMBDA,
            },
            _ => {
                let lambda = s
                    .strip_prefix("nllkl:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("unknown objective `{s}`")))?;
                ObjectiveKind::NllPlusKl { lambda }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// How to treat a rank-deficient sample covariance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegenerateMode {
    #[default]
    PseudoKl,
    EpsilonJitter,
}

impl FromStr for DegenerateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo-kl" | "pseudo_kl" => Ok(DegenerateMode::PseudoKl),
            "epsilon" | "epsilon-jitter" | "epsilon_jitter" => Ok(DegenerateMode::EpsilonJitter),
            _ => Err(Error::InvalidInput(format!(
                "unknown degenerate mode `{s}`"
            ))),
        }
    }
}

/// Sample mean and biased sample covariance on matching inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimates {
    pub inputs: DMatrix<f64>,
    pub mu_tilde: DVector<f64>,
    pub k_tilde: DMatrix<f64>,
    pub rank: usize,
    pub n_tasks: usize,
    /// All eigenvalues of `k_tilde`, ascending, clamped at zero.
    eigenvalues: DVector<f64>,
}

impl MomentEstimates {
    /// Wraps externally supplied moments and computes their numerical rank.
    pub fn from_moments(
        inputs: DMatrix<f64>,
        mu_tilde: DVector<f64>,
        k_tilde: DMatrix<f64>,
        n_tasks: usize,
    ) -> Result<Self> {
        let m = mu_tilde.len();
        if inputs.nrows() != m || k_tilde.shape() != (m, m) {
            return Err(Error::Dimension {
                expected: m,
                actual: k_tilde.nrows(),
            });
        }
        if m == 0 {
            return Err(Error::InvalidInput("moment estimates need M >= 1".into()));
        }
        let sym = (&k_tilde + k_tilde.transpose()) * 0.5;
        let mut eigenvalues = SymmetricEigen::new(sym).eigenvalues;
        eigenvalues.as_mut_slice().sort_by(f64::total_cmp);
        eigenvalues.apply(|v| *v = v.max(0.0));
        let max = eigenvalues.max();
        let rank = if max > 0.0 {
            eigenvalues.iter().filter(|&&v| v > RANK_TOL * max).count()
        } else {
            0
        };
        Ok(MomentEstimates {
            inputs,
            mu_tilde,
            k_tilde,
            rank,
            n_tasks,
            eigenvalues,
        })
    }

    pub fn len(&self) -> usize {
        self.mu_tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_tilde.is_empty()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.len()
    }

    /// `ln|AᵀA|` for a full-column-rank factor `A` with `K̃ = AAᵀ`: the sum of
    /// the logs of the retained eigenvalues.
    pub fn ln_pseudo_det(&self) -> f64 {
        let m = self.len();
        self.eigenvalues
            .iter()
            .skip(m - self.rank)
            .map(|v| v.ln())
            .sum()
    }

    /// The same estimates rescaled by `N / (N - 1)`.
    pub fn unbiased(&self) -> Result<Self> {
        if self.n_tasks < 2 {
            return Err(Error::InvalidInput(
                "unbiased rescaling needs N >= 2".into(),
            ));
        }
        let f = self.n_tasks as f64 / (self.n_tasks as f64 - 1.0);
        MomentEstimates::from_moments(
            self.inputs.clone(),
            self.mu_tilde.clone(),
            &self.k_tilde * f,
            self.n_tasks,
        )
    }

    fn epsilon_ln_det(&self) -> f64 {
        self.eigenvalues
            .iter()
            .map(|v| (v + DEGENERATE_EPSILON).ln())
            .sum()
    }
}

/// Sample mean `(1/N) y 1` and biased covariance `(1/N)(y − μ̃1ᵀ)(y − μ̃1ᵀ)ᵀ`.
pub fn moment_estimates(matching: &MatchingDataset) -> Result<MomentEstimates> {
    let (m, n) = matching.values.shape();
    if m == 0 {
        return Err(Error::InvalidInput("matching dataset is empty".into()));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "sample covariance needs at least 2 tasks, got {n}"
        )));
    }
    let y = &matching.values;
    let mu = y.column_sum() / n as f64;
    let mut centered = y.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mu;
    }
    let k = &centered * centered.transpose() / n as f64;
    MomentEstimates::from_moments(matching.inputs.clone(), mu, k, n)
}

/// Negative log marginal likelihood summed over tasks in order.
pub fn multi_task_nll(gp: &GpParams, tasks: &[Observations]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::InvalidInput("no tasks".into()));
    }
    tasks
        .iter()
        .try_fold(0.0, |acc, obs| Ok(acc + nll_subdataset(gp, obs)?))
}

/// [`multi_task_nll`] with its gradient over [`GpParams::to_vec`].
pub fn multi_task_nll_with_grad(
    gp: &GpParams,
    tasks: &[Observations],
) -> Result<(f64, DVector<f64>)> {
    if tasks.is_empty() {
        return Err(Error::InvalidInput("no tasks".into()));
    }
    let mut value = 0.0;
    let mut grad = DVector::zeros(gp.n_params());
    for obs in tasks {
        let (v, g) = nll_with_grad(gp, obs)?;
        value += v;
        grad += g;
    }
    Ok((value, grad))
}

/// Shared pieces of every Gaussian divergence against the model on the
/// matching inputs: `tr(K⁻¹K̃)`, `(μ−μ̃)ᵀK⁻¹(μ−μ̃)` and `ln|K|`.
struct DivergenceTerms {
    trace: f64,
    quad: f64,
    ln_det: f64,
}

fn divergence_terms(
    mu_tilde: &DVector<f64>,
    k_tilde: &DMatrix<f64>,
    mu: &DVector<f64>,
    k: &DMatrix<f64>,
    scale: f64,
) -> Result<DivergenceTerms> {
    let factor = Factor::new(k, scale)?;
    let delta = mu - mu_tilde;
    let trace = factor.solve_mat(k_tilde).trace();
    let quad = delta.dot(&factor.solve(&delta));
    Ok(DivergenceTerms {
        trace,
        quad,
        ln_det: factor.ln_det(),
    })
}

/// KL divergence `KL(N(μ̃, K̃) ‖ N(μ, K))` between two full-rank Gaussians,
/// given `ln|K̃|`.
pub fn gaussian_kl(
    mu_tilde: &DVector<f64>,
    k_tilde: &DMatrix<f64>,
    ln_det_tilde: f64,
    mu: &DVector<f64>,
    k: &DMatrix<f64>,
) -> Result<f64> {
    let scale = k.diagonal().amax();
    let t = divergence_terms(mu_tilde, k_tilde, mu, k, scale)?;
    let m = mu.len() as f64;
    Ok(0.5 * (t.trace + t.quad + t.ln_det - ln_det_tilde - m))
}

fn model_moments(est: &MomentEstimates, gp: &GpParams) -> Result<(DVector<f64>, DMatrix<f64>)> {
    gp.check_dim(est.inputs.ncols())?;
    Ok((gp.mean.eval(&est.inputs)?, gp.noisy_gram(&est.inputs)?))
}

/// KL divergence from the empirical moments to the model on the matching
/// inputs. Requires a full-rank sample covariance.
pub fn kl_divergence(est: &MomentEstimates, gp: &GpParams) -> Result<f64> {
    if !est.is_full_rank() {
        return Err(Error::Numerical(format!(
            "sample covariance has rank {} < M = {}; use pseudo_kl or epsilon mode",
            est.rank,
            est.len()
        )));
    }
    let (mu, k) = model_moments(est, gp)?;
    let t = divergence_terms(&est.mu_tilde, &est.k_tilde, &mu, &k, gp.kernel.scale())?;
    Ok(0.5 * (t.trace + t.quad + t.ln_det - est.ln_pseudo_det() - est.len() as f64))
}

/// Pseudo-KL divergence for a possibly degenerate sample covariance of rank R:
/// `½(tr(K⁻¹K̃) + (μ−μ̃)ᵀK⁻¹(μ−μ̃) + ln|K| − ln|AᵀA| + (M−R) ln 2π − R)`.
///
/// Equals [`kl_divergence`] when `R = M`; can be negative otherwise.
pub fn pseudo_kl(est: &MomentEstimates, gp: &GpParams) -> Result<f64> {
    if est.rank == 0 {
        return Err(Error::Numerical(
            "pseudo-KL is undefined for a zero sample covariance".into(),
        ));
    }
    let (mu, k) = model_moments(est, gp)?;
    let t = divergence_terms(&est.mu_tilde, &est.k_tilde, &mu, &k, gp.kernel.scale())?;
    let m = est.len() as f64;
    let r = est.rank as f64;
    Ok(0.5 * (t.trace + t.quad + t.ln_det - est.ln_pseudo_det() + (m - r) * LN_2PI - r))
}

fn epsilon_shift(k: &DMatrix<f64>) -> DMatrix<f64> {
    let mut k = k.clone();
    for i in 0..k.nrows() {
        k[(i, i)] += DEGENERATE_EPSILON;
    }
    k
}

/// Full KL after adding `ε = 1e-6` to the diagonals of both covariances.
pub fn epsilon_kl(est: &MomentEstimates, gp: &GpParams) -> Result<f64> {
    let (mu, k) = model_moments(est, gp)?;
    let t = divergence_terms(
        &est.mu_tilde,
        &epsilon_shift(&est.k_tilde),
        &mu,
        &epsilon_shift(&k),
        gp.kernel.scale(),
    )?;
    Ok(0.5 * (t.trace + t.quad + t.ln_det - est.epsilon_ln_det() - est.len() as f64))
}

/// The divergence reported for a model: exact KL when the sample covariance
/// has full rank, otherwise pseudo-KL or epsilon-shifted KL per `mode`.
pub fn divergence(est: &MomentEstimates, gp: &GpParams, mode: DegenerateMode) -> Result<f64> {
    if est.is_full_rank() {
        kl_divergence(est, gp)
    } else {
        match mode {
            DegenerateMode::PseudoKl => pseudo_kl(est, gp),
            DegenerateMode::EpsilonJitter => epsilon_kl(est, gp),
        }
    }
}

/// The parameter-dependent part of [`divergence`],
/// `½(tr(K⁻¹K̃) + (μ−μ̃)ᵀK⁻¹(μ−μ̃) + ln|K|)`, with its gradient.
///
/// Differs from the divergence by a constant in the model parameters, so it
/// shares the divergence's gradient and minimizers.
pub fn divergence_target_with_grad(
    est: &MomentEstimates,
    gp: &GpParams,
    mode: DegenerateMode,
) -> Result<(f64, DVector<f64>)> {
    let mm = gp.moments_with_grads(&est.inputs)?;
    let shift = mode == DegenerateMode::EpsilonJitter && !est.is_full_rank();
    let (k, k_tilde) = if shift {
        (epsilon_shift(&mm.cov), epsilon_shift(&est.k_tilde))
    } else {
        (mm.cov.clone(), est.k_tilde.clone())
    };
    let factor = Factor::new(&k, gp.kernel.scale())?;
    let delta = &mm.mean - &est.mu_tilde;
    let kinv = factor.inverse();
    let beta = &kinv * &delta;
    let kinv_kt = &kinv * &k_tilde;
    let value = 0.5 * (kinv_kt.trace() + delta.dot(&beta) + factor.ln_det());

    // d/dθ = ½ tr((K⁻¹ − K⁻¹K̃K⁻¹ − ββᵀ) dK) + βᵀ dμ
    let mut w = &kinv - &kinv_kt * &kinv;
    w.ger(-1.0, &beta, &beta, 1.0);
    let mut grad = Vec::with_capacity(gp.n_params());
    grad.extend(mm.mean_grads.iter().map(|g| beta.dot(g)));
    grad.extend(mm.cov_grads.iter().map(|g| 0.5 * w.dot(g)));
    Ok((value, DVector::from_vec(grad)))
}

/// `multi_task_nll + λ · divergence`.
pub fn combined_objective(
    gp: &GpParams,
    tasks: &[Observations],
    est: Option<&MomentEstimates>,
    lambda: f64,
    mode: DegenerateMode,
) -> Result<f64> {
    let nll = multi_task_nll(gp, tasks)?;
    if lambda == 0.0 {
        return Ok(nll);
    }
    let est = est.ok_or_else(|| {
        Error::InvalidInput("combined objective with lambda > 0 needs matching data".into())
    })?;
    Ok(nll + lambda * divergence(est, gp, mode)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{Kernel, MeanFn};

    fn matching(values: &[f64], m: usize, n: usize) -> MatchingDataset {
        MatchingDataset {
            inputs: DMatrix::from_fn(m, 1, |i, _| i as f64 / m as f64),
            values: DMatrix::from_row_slice(m, n, values),
        }
    }

    #[test]
    fn identical_columns_give_zero_covariance() {
        let est = moment_estimates(&matching(&[1.0, 1.0, 1.0, 2.0, 2.0, 2.0], 2, 3)).unwrap();
        assert_eq!(est.k_tilde, DMatrix::zeros(2, 2));
        assert_eq!(est.rank, 0);
    }

    #[test]
    fn two_by_two_hand_example() {
        let est = moment_estimates(&matching(&[1.0, 3.0, 2.0, 4.0], 2, 2)).unwrap();
        assert_eq!(est.mu_tilde, DVector::from_vec(vec![2.0, 3.0]));
        assert_eq!(
            est.k_tilde,
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])
        );
        assert_eq!(est.rank, 1);
        let unbiased = est.unbiased().unwrap();
        assert_eq!(unbiased.k_tilde, &est.k_tilde * 2.0);
    }

    #[test]
    fn single_task_is_rejected() {
        assert!(moment_estimates(&matching(&[1.0, 2.0], 2, 1)).is_err());
    }

    #[test]
    fn one_dimensional_kl_closed_form() {
        let v = gaussian_kl(
            &DVector::from_vec(vec![0.0]),
            &DMatrix::from_element(1, 1, 1.0),
            0.0,
            &DVector::from_vec(vec![1.0]),
            &DMatrix::from_element(1, 1, 2.0),
        )
        .unwrap();
        assert!((v - 0.5 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn pseudo_kl_can_be_negative() {
        // K̃ = diag(1, 0) at inputs {1, 0}, μ̃ = μ = 0; a dot-product model puts
        // almost no variance on the second input, where K̃ has none either
        let est = MomentEstimates::from_moments(
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            DVector::zeros(2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])),
            3,
        )
        .unwrap();
        assert_eq!(est.rank, 1);
        let gp = GpParams {
            mean: MeanFn::zero(),
            kernel: Kernel::DotProduct {
                log_bias_variance: -20.0,
                log_weight_variance: 0.0,
            },
            log_noise_variance: 0.01f64.ln(),
        };
        let v = pseudo_kl(&est, &gp).unwrap();

        let b = (-20.0f64).exp();
        let k = DMatrix::from_row_slice(2, 2, &[b + 1.0 + 0.01, b, b, b + 0.01]);
        let kinv = k.clone().try_inverse().unwrap();
        let direct = 0.5 * (kinv[(0, 0)] + k.determinant().ln() - 0.0 + LN_2PI - 1.0);
        assert!((v - direct).abs() < 1e-8, "{v} vs {direct}");
        assert!(v < 0.0);
    }

    #[test]
    fn objective_kind_parsing() {
        assert_eq!("nll".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::Nll);
        assert_eq!(
            "nllkl".parse::<ObjectiveKind>().unwrap(),
            ObjectiveKind::NllPlusKl { lambda: 10.0 }
        );
        assert_eq!(
            "nllkl:2.5".parse::<ObjectiveKind>().unwrap(),
            ObjectiveKind::NllPlusKl { lambda: 2.5 }
        );
        assert!("nllkl:-1".parse::<ObjectiveKind>().is_err());
        assert!("mse".parse::<ObjectiveKind>().is_err());
    }
}
