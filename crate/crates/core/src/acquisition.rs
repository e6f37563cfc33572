//! Acquisition functions and candidate-set maximization.
//!
//! All scores take the posterior standard deviation of a noisy observation,
//! `sqrt(latent variance + σ²)`, and assume maximization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Floor applied to a nonpositive standard deviation in [`pi_score`].
pub const STD_FLOOR: f64 = 1e-12;

/// Default PI margin.
pub const DEFAULT_PI_MARGIN: f64 = 0.1;

/// UCB coefficient used by the hand-tuned single-task baseline.
pub const DEFAULT_UCB_ZETA: f64 = 1.8;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

/// `(μ − (best + margin)) / σ`; a raw score, not passed through Φ.
pub fn pi_score(post_mean: f64, post_std: f64, best_y: f64, margin: f64) -> f64 {
    let s = if post_std > 0.0 { post_std } else { STD_FLOOR };
    (post_mean - (best_y + margin)) / s
}

pub fn ucb_score(post_mean: f64, post_std: f64, zeta: f64) -> f64 {
    post_mean + zeta * post_std
}

/// Expected improvement over `best_y` under a Gaussian predictive.
pub fn ei_score(post_mean: f64, post_std: f64, best_y: f64) -> f64 {
    let diff = post_mean - best_y;
    if post_std <= 0.0 {
        return diff.max(0.0);
    }
    let z = diff / post_std;
    let n = std_normal();
    (diff * n.cdf(z) + post_std * n.pdf(z)).max(0.0)
}

/// The UCB coefficient ζ_t calibrated to `n_tasks` training tasks, iteration
/// `t` (1-based) and failure probability `delta`.
///
/// Defined when `0 < δ < 1`, `t ≥ 1` and `N ≥ 4 ln(6/δ) + t + 2`.
pub fn theoretical_ucb_zeta(n_tasks: usize, t: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if t == 0 {
        return Err(Error::Domain("iteration t is 1-based".into()));
    }
    let n = n_tasks as f64;
    let t = t as f64;
    let l6 = (6.0 / delta).ln();
    let need = 4.0 * l6 + t + 2.0;
    if n < need {
        return Err(Error::Domain(format!(
            "need N >= 4 ln(6/delta) + t + 2 = {need:.3}, got N = {n}"
        )));
    }
    // The precondition already implies every radicand below is positive; the
    // checks name the radical should that ever fail numerically.
    let num_radicand =
        6.0 * n * (n - 3.0 + t + 2.0 * (t * l6).sqrt() + 2.0 * l6) / (delta * n * (n - t - 1.0));
    if !(num_radicand >= 0.0) {
        return Err(Error::Domain(format!(
            "radicand of the numerator's first root is {num_radicand}"
        )));
    }
    let inner = 1.0 - 2.0 * (l6 / (n - t)).sqrt();
    let den_radicand = (n - 1.0) * inner;
    if !(den_radicand > 0.0) {
        return Err(Error::Domain(format!(
            "radicand of the denominator root is {den_radicand}"
        )));
    }
    let num = num_radicand.sqrt() + (2.0 * n * (3.0 / delta).ln()).sqrt();
    Ok(num / den_radicand.sqrt())
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_candidates(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no candidates to score".into()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            return Err(Error::Numerical(format!(
                "acquisition score of candidate {i} is NaN"
            )));
        }
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// An acquisition rule as selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Acquisition {
    Pi {
        margin: f64,
    },
    Ei,
    Ucb {
        zeta: f64,
    },
    /// UCB with ζ_t from [`theoretical_ucb_zeta`] for the number of training tasks.
    UcbTheory {
        delta: f64,
    },
}

impl Acquisition {
    pub fn validate(self) -> Result<()> {
        match self {
            Acquisition::Pi { margin } if !(margin >= 0.0 && margin.is_finite()) => Err(
                Error::InvalidInput(format!("PI margin must be >= 0, got {margin}")),
            ),
            Acquisition::Ucb { zeta } if !(zeta >= 0.0 && zeta.is_finite()) => Err(
                Error::InvalidInput(format!("UCB coefficient must be >= 0, got {zeta}")),
            ),
            Acquisition::UcbTheory { delta } if !(delta > 0.0 && delta < 1.0) => Err(
                Error::InvalidInput(format!("delta must lie in (0, 1), got {delta}")),
            ),
            _ => Ok(()),
        }
    }

    /// Scores `(mean, std)` pairs at iteration `t` (1-based).
    ///
    /// `best_y` is the incumbent; `n_tasks` is only used by `UcbTheory`.
    pub fn scores(
        self,
        means: &[f64],
        stds: &[f64],
        best_y: f64,
        t: usize,
        n_tasks: usize,
    ) -> Result<Vec<f64>> {
        let zeta = match self {
            Acquisition::Ucb { zeta } => zeta,
            Acquisition::UcbTheory { delta } => theoretical_ucb_zeta(n_tasks, t, delta)?,
            _ => 0.0,
        };
        Ok(means
            .iter()
            .zip(stds)
            .map(|(&m, &s)| match self {
                Acquisition::Pi { margin } => pi_score(m, s, best_y, margin),
                Acquisition::Ei => ei_score(m, s, best_y),
                Acquisition::Ucb { .. } | Acquisition::UcbTheory { .. } => ucb_score(m, s, zeta),
            })
            .collect())
    }

    /// Whether the score depends on an incumbent value.
    pub fn uses_incumbent(self) -> bool {
        matches!(self, Acquisition::Pi { .. } | Acquisition::Ei)
    }
}

impl fmt::Display for Acquisition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Acquisition::Pi { margin } => write!(f, "pi{margin}"),
            Acquisition::Ei => write!(f, "ei"),
            Acquisition::Ucb { zeta } => write!(f, "ucb:{zeta}"),
            Acquisition::UcbTheory { delta } => write!(f, "ucb-theory:{delta}"),
        }
    }
}

impl FromStr for Acquisition {
    type Err = Error;

    /// `pi<margin>` (e.g. `pi0.1`), `ei`, `ucb:<ζ>` or `ucb-theory:<δ>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("unknown acquisition `{s}`"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let acq = if s == "ei" {
            Acquisition::Ei
        } else if let Some(v) = s.strip_prefix("ucb-theory:") {
            Acquisition::UcbTheory { delta: num(v)? }
        } else if let Some(v) = s.strip_prefix("ucb:") {
            Acquisition::Ucb { zeta: num(v)? }
        } else if s == "pi" {
            Acquisition::Pi {
                margin: DEFAULT_PI_MARGIN,
            }
        } else if let Some(v) = s.strip_prefix("pi") {
            Acquisition::Pi { margin: num(v)? }
        } else {
            return Err(bad());
        };
        acq.validate()?;
        Ok(acq)
    }
}
