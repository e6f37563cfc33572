//! Fitting a GP prior to many tasks at once.
//!
//! Every requested (mean, kernel) structure is optimized from `restarts`
//! random initializations with Adam on the chosen objective; the lowest final
//! objective wins. Positive quantities live in log space, so the optimizer is
//! unconstrained.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{MatchingDataset, OutputWarp, TuningDataset};
use crate::error::{Error, Result};
use crate::gp::{GpParams, Kernel, KernelKind, MeanFn, MeanKind, Observations, Structure};
use crate::objectives::{
    divergence, divergence_target_with_grad, moment_estimates, multi_task_nll,
    multi_task_nll_with_grad, DegenerateMode, MomentEstimates, ObjectiveKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub steps: usize,
    pub restarts: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub mean_family: Vec<MeanKind>,
    pub kernel_family: Vec<KernelKind>,
    pub degenerate_mode: DegenerateMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveKind::Nll,
            steps: 1000,
            restarts: 4,
            seed: 0,
            learning_rate: 1e-2,
            mean_family: vec![MeanKind::Constant, MeanKind::Linear],
            kernel_family: vec![
                KernelKind::SquaredExponential,
                KernelKind::Matern52,
                KernelKind::DotProduct,
            ],
            degenerate_mode: DegenerateMode::PseudoKl,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.mean_family.is_empty() || self.kernel_family.is_empty() {
            return Err(Error::InvalidInput(
                "mean and kernel families must be nonempty".into(),
            ));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::InvalidInput(
                "steps and restarts must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Structures in search order: means outer, kernels inner.
    pub fn structures(&self) -> Vec<Structure> {
        self.mean_family
            .iter()
            .flat_map(|&mean| {
                self.kernel_family
                    .iter()
                    .map(move |&kernel| Structure { mean, kernel })
            })
            .collect()
    }
}

/// Objective values of one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    pub structure: Structure,
    pub restart: usize,
    /// Objective at the initialization and after every step.
    pub values: Vec<f64>,
    pub best_so_far: Vec<f64>,
    pub rejected_steps: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Multi-task NLL on the training tasks.
    pub nll: Option<f64>,
    /// KL (or pseudo-KL) on the matching data.
    pub divergence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub best: GpParams,
    pub structure: Structure,
    pub objective: ObjectiveKind,
    pub final_objective: f64,
    pub traces: Vec<RestartTrace>,
    pub diagnostics: Diagnostics,
}

/// Stream id for a structure, independent of the order families are listed in.
fn structure_stream(structure: Structure) -> u64 {
    let m = structure.mean as u64;
    let k = structure.kernel as u64;
    (m * 8 + k) << 32
}

/// Random initialization for one restart; reproducible per `(seed, restart)`.
///
/// Log amplitude, log length scales and dot-product log variances are
/// `N(0, 1)`; log noise variance is `N(-4, 1)`; a constant mean or linear bias
/// is `N(0, 1)`; linear weights are `N(0, 0.1²)`.
pub fn init_params(structure: Structure, dim: usize, seed: u64, restart: usize) -> GpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(structure_stream(structure) | restart as u64);
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut draw = |mu: f64, sigma: f64| mu + sigma * std.sample(&mut rng);

    let mean = match structure.mean {
        MeanKind::Constant => MeanFn::Constant { c: draw(0.0, 1.0) },
        MeanKind::Linear => MeanFn::Linear {
            weights: (0..dim).map(|_| draw(0.0, 0.1)).collect(),
            bias: draw(0.0, 1.0),
        },
    };
    let kernel = match structure.kernel {
        KernelKind::DotProduct => Kernel::DotProduct {
            log_bias_variance: draw(0.0, 1.0),
            log_weight_variance: draw(0.0, 1.0),
        },
        kind => {
            let la = draw(0.0, 1.0);
            let ls = (0..dim).map(|_| draw(0.0, 1.0)).collect();
            Kernel::stationary(kind, la, ls)
        }
    };
    GpParams {
        mean,
        kernel,
        log_noise_variance: draw(-4.0, 1.0),
    }
}

/// Value of the training objective.
///
/// For [`ObjectiveKind::Kl`] this is the parameter-dependent part of the
/// divergence (constants dropped); the combined objective uses the full
/// divergence so its value is directly interpretable.
pub fn objective_value(
    gp: &GpParams,
    tasks: &[Observations],
    est: Option<&MomentEstimates>,
    kind: ObjectiveKind,
    mode: DegenerateMode,
) -> Result<f64> {
    match kind {
        ObjectiveKind::Nll => multi_task_nll(gp, tasks),
        _ => objective_gradient(gp, tasks, est, kind, mode).map(|(v, _)| v),
    }
}

fn require_est(est: Option<&MomentEstimates>) -> Result<&MomentEstimates> {
    est.filter(|e| !e.is_empty())
        .ok_or_else(|| Error::InvalidInput("KL objectives need a nonempty matching dataset".into()))
}

/// Objective value and gradient over [`GpParams::to_vec`].
pub fn objective_gradient(
    gp: &GpParams,
    tasks: &[Observations],
    est: Option<&MomentEstimates>,
    kind: ObjectiveKind,
    mode: DegenerateMode,
) -> Result<(f64, DVector<f64>)> {
    let (value, grad) = match kind {
        ObjectiveKind::Nll => multi_task_nll_with_grad(gp, tasks)?,
        ObjectiveKind::Kl => divergence_target_with_grad(require_est(est)?, gp, mode)?,
        ObjectiveKind::NllPlusKl { lambda } => {
            let (nll, g_nll) = multi_task_nll_with_grad(gp, tasks)?;
            if lambda == 0.0 {
                (nll, g_nll)
            } else {
                let est = require_est(est)?;
                let (_, g_div) = divergence_target_with_grad(est, gp, mode)?;
                let div = divergence(est, gp, mode)?;
                (nll + lambda * div, g_nll + g_div * lambda)
            }
        }
    };
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite objective or gradient".into()));
    }
    Ok((value, grad))
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(steps: usize, learning_rate: f64) -> Self {
        Adam {
            steps,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimized {
    pub best: DVector<f64>,
    pub best_value: f64,
    pub values: Vec<f64>,
    pub best_so_far: Vec<f64>,
    pub rejected_steps: usize,
}

/// Minimizes `f` with Adam from `x0`.
///
/// A step whose objective or gradient fails is rejected: the iterate reverts
/// and the step size halves. Only a failure at `x0` is an error.
pub fn adam_minimize<F>(x0: DVector<f64>, adam: Adam, mut f: F) -> Result<Minimized>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let (v0, g0) = f(&x0)?;
    if !v0.is_finite() || g0.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(
            "objective is not finite at the initialization".into(),
        ));
    }
    let n = x0.len();
    let mut x = x0;
    let mut grad = g0;
    let mut value = v0;
    let mut best = x.clone();
    let mut best_value = v0;
    let mut values = Vec::with_capacity(adam.steps + 1);
    let mut best_so_far = Vec::with_capacity(adam.steps + 1);
    values.push(v0);
    best_so_far.push(v0);

    let mut m = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    let mut lr = adam.learning_rate;
    let mut rejected = 0;
    for t in 1..=adam.steps {
        m = m * adam.beta1 + &grad * (1.0 - adam.beta1);
        v = v * adam.beta2 + grad.component_mul(&grad) * (1.0 - adam.beta2);
        let mhat = &m / (1.0 - adam.beta1.powi(t as i32));
        let vhat = &v / (1.0 - adam.beta2.powi(t as i32));
        let step = mhat.zip_map(&vhat, |a, b| a / (b.sqrt() + adam.epsilon));
        let candidate = &x - step * lr;
        match f(&candidate) {
            Ok((cv, cg)) if cv.is_finite() && cg.iter().all(|g| g.is_finite()) => {
                x = candidate;
                grad = cg;
                value = cv;
                if cv < best_value {
                    best_value = cv;
                    best = x.clone();
                }
            }
            _ => {
                rejected += 1;
                lr *= 0.5;
            }
        }
        values.push(value);
        best_so_far.push(best_value);
    }
    Ok(Minimized {
        best,
        best_value,
        values,
        best_so_far,
        rejected_steps: rejected,
    })
}

struct RunOutcome {
    trace: RestartTrace,
    best: Option<(GpParams, f64)>,
}

fn run_restart(
    structure: Structure,
    restart: usize,
    dim: usize,
    tasks: &[Observations],
    est: Option<&MomentEstimates>,
    config: &TrainConfig,
) -> RunOutcome {
    let init = init_params(structure, dim, config.seed, restart);
    let adam = Adam::new(config.steps, config.learning_rate);
    let result = adam_minimize(DVector::from_vec(init.to_vec()), adam, |p| {
        let gp = init.with_params(p.as_slice());
        objective_gradient(&gp, tasks, est, config.objective, config.degenerate_mode)
    });
    match result {
        Ok(min) => RunOutcome {
            best: Some((init.with_params(min.best.as_slice()), min.best_value)),
            trace: RestartTrace {
                structure,
                restart,
                values: min.values,
                best_so_far: min.best_so_far,
                rejected_steps: min.rejected_steps,
                error: None,
            },
        },
        Err(e) => RunOutcome {
            best: None,
            trace: RestartTrace {
                structure,
                restart,
                values: vec![],
                best_so_far: vec![],
                rejected_steps: 0,
                error: Some(e.to_string()),
            },
        },
    }
}

/// Fits a GP prior to already-warped task observations and/or moment estimates.
///
/// `dim` is the warped input dimension. Restarts run in parallel; selection is
/// a deterministic reduction in (structure, restart) order.
pub fn train_on(
    tasks: &[Observations],
    est: Option<&MomentEstimates>,
    dim: usize,
    config: &TrainConfig,
) -> Result<TrainResult> {
    config.validate()?;
    if config.objective.needs_matching() {
        require_est(est)?;
    }
    if config.objective != ObjectiveKind::Kl && tasks.is_empty() {
        return Err(Error::InvalidInput("no training tasks".into()));
    }
    let jobs: Vec<(Structure, usize)> = config
        .structures()
        .into_iter()
        .flat_map(|s| (0..config.restarts).map(move |r| (s, r)))
        .collect();
    let outcomes: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(s, r)| run_restart(s, r, dim, tasks, est, config))
        .collect();

    let mut best: Option<(GpParams, f64)> = None;
    for o in &outcomes {
        if let Some((p, v)) = &o.best {
            if best.as_ref().is_none_or(|(_, bv)| v < bv) {
                best = Some((p.clone(), *v));
            }
        }
    }
    let traces: Vec<RestartTrace> = outcomes.into_iter().map(|o| o.trace).collect();
    let Some((best, final_objective)) = best else {
        let causes: Vec<String> = traces
            .iter()
            .map(|t| {
                format!(
                    "{} restart {}: {}",
                    t.structure,
                    t.restart,
                    t.error.as_deref().unwrap_or("unknown")
                )
            })
            .collect();
        return Err(Error::Numerical(format!(
            "every restart failed: {}",
            causes.join("; ")
        )));
    };
    let diagnostics = Diagnostics {
        nll: if tasks.is_empty() {
            None
        } else {
            multi_task_nll(&best, tasks).ok()
        },
        divergence: est.and_then(|e| divergence(e, &best, config.degenerate_mode).ok()),
    };
    Ok(TrainResult {
        structure: best.structure(),
        best,
        objective: config.objective,
        final_objective,
        traces,
        diagnostics,
    })
}

/// Fits a GP prior to a study using the standard output warping.
///
/// KL-family objectives need `matching`, typically from
/// [`extract_matching`](crate::dataset::extract_matching).
pub fn train_gp(
    dataset: &TuningDataset,
    matching: Option<&MatchingDataset>,
    config: &TrainConfig,
) -> Result<TrainResult> {
    let tasks = dataset.observations(OutputWarp::Standard)?;
    let tasks: Vec<Observations> = tasks.into_iter().filter(|t| !t.is_empty()).collect();
    let est = match matching {
        Some(m) if !m.is_empty() && m.n_tasks() >= 2 => Some(moment_estimates(m)?),
        _ => None,
    };
    train_on(&tasks, est.as_ref(), dataset.dim(), config)
}
