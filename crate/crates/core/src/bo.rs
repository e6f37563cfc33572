//! Bayesian optimization loops with a frozen prior, plus single-task baselines.
//!
//! Offline runs replay a finite pool of recorded trials: candidates are the
//! pool's points and observing one returns its recorded value. Online runs
//! query an [`Objective`] anywhere in the warped unit cube and pick points from
//! a seeded quasi-random candidate set.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::acquisition::{argmax_candidates, Acquisition, DEFAULT_UCB_ZETA};
use crate::dataset::{warp_online, ObjectiveScale, OutputWarp, TuningDataset};
use crate::error::{Error, Result};
use crate::gp::{
    nll_with_grad, GpParams, Kernel, KernelKind, MeanFn, MeanKind, Observations, Posterior,
    Structure,
};
use crate::qmc::Halton;
use crate::training::{adam_minimize, init_params, Adam};

/// Default number of quasi-random candidates per online iteration.
pub const DEFAULT_CANDIDATES: usize = 5000;
/// Optimizer steps for each per-iteration refit of a single-task baseline.
pub const REFIT_STEPS: usize = 100;
/// Adam step size for baseline refits.
pub const REFIT_LEARNING_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub iterations: usize,
    pub acquisition: Acquisition,
    pub seed: u64,
    /// Online only.
    pub candidate_count: usize,
    /// Offline only: never pick a pool point twice while unpicked ones remain.
    pub dedup: bool,
    pub refit_steps: usize,
    pub refit_learning_rate: f64,
}

impl BoConfig {
    pub fn new(iterations: usize, acquisition: Acquisition, seed: u64) -> Self {
        BoConfig {
            iterations,
            acquisition,
            seed,
            candidate_count: DEFAULT_CANDIDATES,
            dedup: false,
            refit_steps: REFIT_STEPS,
            refit_learning_rate: REFIT_LEARNING_RATE,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidInput("iterations must be >= 1".into()));
        }
        if self.candidate_count == 0 {
            return Err(Error::InvalidInput("candidate_count must be >= 1".into()));
        }
        self.acquisition.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Method {
    /// A frozen meta-trained prior. `n_tasks` is the number of training tasks,
    /// used only by the calibrated UCB coefficient.
    HyperBo {
        id: String,
        prior: GpParams,
        n_tasks: usize,
    },
    Random,
    /// Constant mean, Matérn 3/2, refit by NLL every iteration.
    Stbo,
    /// Constant mean, Matérn 5/2, MAP refit under hand-set priors, UCB 1.8.
    Stboh,
}

impl Method {
    pub fn id(&self) -> &str {
        match self {
            Method::HyperBo { id, .. } => id,
            Method::Random => "rand",
            Method::Stbo => "stbo",
            Method::Stboh => "stboh",
        }
    }
}

/// One BO iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// Warped input.
    pub x: Vec<f64>,
    /// Warped objective; `-inf` for an infeasible evaluation.
    pub y: f64,
    /// Objective as returned by the oracle; NaN when infeasible.
    pub raw: f64,
}

impl Step {
    pub fn feasible(&self) -> bool {
        self.y > f64::NEG_INFINITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoTrace {
    pub method: String,
    pub seed: u64,
    pub steps: Vec<Step>,
    pub best_so_far: Vec<f64>,
    pub regret: Vec<f64>,
    /// Index of the first step attaining the best `y`.
    pub recommendation: usize,
    pub f_max: f64,
}

impl BoTrace {
    fn new(method: &str, seed: u64, steps: Vec<Step>, f_max: f64) -> Self {
        let ys: Vec<f64> = steps.iter().map(|s| s.y).collect();
        let best_so_far = running_max(&ys);
        let regret = best_so_far.iter().map(|b| f_max - b).collect();
        let recommendation = ys
            .iter()
            .enumerate()
            .fold(0, |best, (i, &y)| if y > ys[best] { i } else { best });
        BoTrace {
            method: method.to_string(),
            seed,
            steps,
            best_so_far,
            regret,
            recommendation,
            f_max,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Equality of every stored float by bit pattern, so NaN entries compare equal.
    pub fn bit_identical(&self, other: &BoTrace) -> bool {
        fn bits(t: &BoTrace) -> Vec<u64> {
            let mut v: Vec<u64> = t
                .steps
                .iter()
                .flat_map(|s| s.x.iter().chain([&s.y, &s.raw]).map(|f| f.to_bits()))
                .collect();
            v.extend(t.best_so_far.iter().chain(&t.regret).map(|f| f.to_bits()));
            v.extend([t.f_max.to_bits(), t.recommendation as u64, t.seed]);
            v
        }
        self.method == other.method && self.len() == other.len() && bits(self) == bits(other)
    }
}

fn running_max(ys: &[f64]) -> Vec<f64> {
    ys.iter()
        .scan(f64::NEG_INFINITY, |m, &y| {
            *m = m.max(y);
            Some(*m)
        })
        .collect()
}

/// `f_max − max_{s≤t} y_s` for every `t`.
pub fn simple_regret(ys: &[f64], f_max: f64) -> Vec<f64> {
    running_max(ys).into_iter().map(|b| f_max - b).collect()
}

/// A finite set of recorded trials to replay offline.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    /// `n x d` warped inputs.
    pub x: DMatrix<f64>,
    /// Warped objectives.
    pub y: Vec<f64>,
    pub raw: Vec<f64>,
}

impl Pool {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>, raw: Vec<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("pool is empty".into()));
        }
        if y.len() != x.nrows() || raw.len() != x.nrows() {
            return Err(Error::Dimension {
                expected: x.nrows(),
                actual: y.len(),
            });
        }
        Ok(Pool { x, y, raw })
    }

    /// The feasible trials of one task of a study.
    pub fn from_task(dataset: &TuningDataset, task_id: &str) -> Result<Self> {
        let i = dataset
            .task_index(task_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task `{task_id}`")))?;
        let obs = dataset.task_observations(i, OutputWarp::Standard)?;
        let raw = dataset.tasks[i]
            .trials
            .iter()
            .filter_map(|t| t.usable_objective())
            .collect();
        Pool::new(obs.x, obs.y.iter().copied().collect(), raw)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.y.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A black-box function queried in warped coordinates. `None` marks an
/// infeasible evaluation.
pub trait Objective {
    fn dim(&self) -> usize;
    fn evaluate(&mut self, x: &[f64]) -> Option<f64>;
}

/// Scores candidates for one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scorer {
    pub acquisition: Acquisition,
    /// 1-based iteration.
    pub t: usize,
    pub n_tasks: usize,
    /// Best observed value; when `None` the best posterior mean over the
    /// candidates stands in.
    pub incumbent: Option<f64>,
}

impl Scorer {
    pub fn score(&self, post: &Posterior, xq: &DMatrix<f64>) -> Result<Vec<f64>> {
        let (mean, var) = post.predict_marginal(xq)?;
        let noise = post.noise_variance();
        let std: Vec<f64> = var.iter().map(|v| (v + noise).sqrt()).collect();
        let best = match self.incumbent {
            Some(b) => b,
            None => mean.max(),
        };
        self.acquisition
            .scores(mean.as_slice(), &std, best, self.t, self.n_tasks)
    }
}

/// Maximizes the acquisition over `candidate_count` quasi-random points plus
/// every observed point; returns the point and its score.
pub fn maximize_acquisition_online(
    post: &Posterior,
    scorer: &Scorer,
    candidate_count: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let d = post.observations().dim();
    let fresh = Halton::new(d, seed).points(candidate_count);
    let seen = &post.observations().x;
    let mut cand = DMatrix::zeros(candidate_count + seen.nrows(), d);
    cand.rows_mut(0, candidate_count).copy_from(&fresh);
    cand.rows_mut(candidate_count, seen.nrows()).copy_from(seen);
    let scores = scorer.score(post, &cand)?;
    let i = argmax_candidates(&scores)?;
    Ok((cand.row(i).iter().copied().collect(), scores[i]))
}

/// Refits `params` by NLL on `obs` from its current value; `None` on failure.
pub fn refit_nll(obs: &Observations, params: &GpParams, steps: usize, lr: f64) -> Option<GpParams> {
    let out = adam_minimize(
        DVector::from_vec(params.to_vec()),
        Adam::new(steps, lr),
        |p| nll_with_grad(&params.with_params(p.as_slice()), obs),
    )
    .ok()?;
    Some(params.with_params(out.best.as_slice()))
}

/// Gaussian priors on log parameters for the hand-tuned baseline, with soft
/// clipping to each prior's 1st–99th percentile band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPrior {
    pub mean: f64,
    pub std: f64,
}

pub const STBOH_LOG_AMPLITUDE: LogPrior = LogPrior {
    mean: -1.0,
    std: 1.0,
};
pub const STBOH_LOG_LENGTH_SCALE: LogPrior = LogPrior {
    mean: 0.0,
    std: 1.0,
};
pub const STBOH_LOG_NOISE_VARIANCE: LogPrior = LogPrior {
    mean: -6.0,
    std: 3.0,
};

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn softplus_inv(z: f64) -> f64 {
    // ln(e^z − 1)
    z + (-(-z).exp()).ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LogPrior {
    pub fn band(self) -> (f64, f64) {
        let q = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.99);
        (self.mean - q * self.std, self.mean + q * self.std)
    }

    pub fn neg_log_density(self, v: f64) -> f64 {
        let z = (v - self.mean) / self.std;
        0.5 * z * z
    }

    /// Smooth bijection from the real line onto the band:
    /// `hi − softplus(c − softplus(u − lo)) · c / softplus(c)` with `c = hi − lo`.
    pub fn soft_clip(self, u: f64) -> f64 {
        let (lo, hi) = self.band();
        let c = hi - lo;
        hi - softplus(c - softplus(u - lo)) * c / softplus(c)
    }

    fn soft_clip_grad(self, u: f64) -> f64 {
        let (lo, hi) = self.band();
        let c = hi - lo;
        c / softplus(c) * sigmoid(c - softplus(u - lo)) * sigmoid(u - lo)
    }

    /// Inverse of [`LogPrior::soft_clip`] for a value strictly inside the band.
    pub fn soft_unclip(self, v: f64) -> f64 {
        let (lo, hi) = self.band();
        let c = hi - lo;
        lo + softplus_inv(c - softplus_inv((hi - v) * softplus(c) / c))
    }
}

/// Result of a MAP fit for the hand-tuned baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct MapFit {
    pub params: GpParams,
    /// Unconstrained coordinates `[c, u_amp, u_ls.., u_noise]`.
    pub unconstrained: Vec<f64>,
}

fn stboh_priors(d: usize) -> Vec<LogPrior> {
    let mut p = vec![STBOH_LOG_AMPLITUDE];
    p.extend(std::iter::repeat_n(STBOH_LOG_LENGTH_SCALE, d));
    p.push(STBOH_LOG_NOISE_VARIANCE);
    p
}

fn stboh_params(u: &[f64], priors: &[LogPrior]) -> GpParams {
    let d = priors.len() - 2;
    let theta: Vec<f64> = u[1..]
        .iter()
        .zip(priors)
        .map(|(&v, p)| p.soft_clip(v))
        .collect();
    GpParams {
        mean: MeanFn::Constant { c: u[0] },
        kernel: Kernel::stationary(KernelKind::Matern52, theta[0], theta[1..=d].to_vec()),
        log_noise_variance: theta[d + 1],
    }
}

/// MAP estimate for the constant-mean Matérn 5/2 baseline: NLL on `obs` plus
/// Gaussian negative log priors, optimized in soft-clipped coordinates so the
/// log parameters stay inside their bands. `obs` may be empty.
pub fn stboh_map(
    obs: &Observations,
    d: usize,
    start: Option<&[f64]>,
    steps: usize,
    lr: f64,
) -> Result<MapFit> {
    let priors = stboh_priors(d);
    let u0: Vec<f64> = match start {
        Some(u) => u.to_vec(),
        None => {
            let c = if obs.is_empty() { 0.0 } else { obs.y.mean() };
            std::iter::once(c)
                .chain(priors.iter().map(|p| p.soft_unclip(p.mean)))
                .collect()
        }
    };
    let out = adam_minimize(DVector::from_vec(u0), Adam::new(steps, lr), |u| {
        let gp = stboh_params(u.as_slice(), &priors);
        let (mut value, mut g) = if obs.is_empty() {
            (0.0, DVector::zeros(u.len()))
        } else {
            nll_with_grad(&gp, obs)?
        };
        for (i, p) in priors.iter().enumerate() {
            let ui = u[i + 1];
            let th = p.soft_clip(ui);
            value += p.neg_log_density(th);
            g[i + 1] += (th - p.mean) / (p.std * p.std);
            g[i + 1] *= p.soft_clip_grad(ui);
        }
        Ok((value, g))
    })?;
    let u: Vec<f64> = out.best.iter().copied().collect();
    Ok(MapFit {
        params: stboh_params(&u, &priors),
        unconstrained: u,
    })
}

/// Where observations come from.
enum Source<'a> {
    Pool(&'a Pool),
    Online {
        objective: &'a mut dyn Objective,
        scale: ObjectiveScale,
    },
}

impl Source<'_> {
    fn dim(&self) -> usize {
        match self {
            Source::Pool(p) => p.x.ncols(),
            Source::Online { objective, .. } => objective.dim(),
        }
    }
}

/// Refit state carried across iterations by the single-task baselines.
enum Baseline {
    None,
    Stbo(GpParams),
    Stboh(Option<Vec<f64>>),
}

fn iteration_seed(seed: u64, t: usize) -> u64 {
    seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// GP training values for the steps so far: recorded values offline, the
/// per-task softplus squashing online.
fn model_observations(steps: &[Step], d: usize, online: bool) -> Observations {
    let x = DMatrix::from_fn(steps.len(), d, |i, j| steps[i].x[j]);
    let ys: Vec<f64> = steps.iter().map(|s| s.y).collect();
    let y = if online {
        let feasible: Vec<bool> = steps.iter().map(Step::feasible).collect();
        warp_online(&ys, &feasible).unwrap_or_else(|_| vec![-2.0; ys.len()])
    } else {
        ys
    };
    Observations::new(x, DVector::from_vec(y))
}

fn run(source: &mut Source<'_>, method: &Method, config: &BoConfig, f_max: f64) -> Result<BoTrace> {
    config.validate()?;
    let d = source.dim();
    if let Method::HyperBo { prior, .. } = method {
        prior.check_dim(d)?;
    }
    let online = matches!(source, Source::Online { .. });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut steps: Vec<Step> = Vec::with_capacity(config.iterations);
    let mut picked = vec![
        false;
        if let Source::Pool(p) = source {
            p.len()
        } else {
            0
        }
    ];
    let mut baseline = match method {
        Method::Stbo => Baseline::Stbo(init_params(
            Structure {
                mean: MeanKind::Constant,
                kernel: KernelKind::Matern32,
            },
            d,
            config.seed,
            0,
        )),
        Method::Stboh => Baseline::Stboh(None),
        _ => Baseline::None,
    };

    for t in 1..=config.iterations {
        let obs = model_observations(&steps, d, online);
        let model = match (method, &mut baseline) {
            (Method::Random, _) => None,
            (Method::Stbo | Method::Stboh, _) if steps.is_empty() => None,
            (Method::HyperBo { prior, n_tasks, .. }, _) => {
                Some((prior.clone(), config.acquisition, *n_tasks))
            }
            (_, Baseline::Stbo(params)) => {
                if steps.len() == 1 {
                    if let MeanFn::Constant { c } = &mut params.mean {
                        *c = obs.y.mean();
                    }
                }
                if let Some(p) =
                    refit_nll(&obs, params, config.refit_steps, config.refit_learning_rate)
                {
                    *params = p;
                }
                Some((params.clone(), config.acquisition, 0))
            }
            (_, Baseline::Stboh(state)) => {
                let fit = stboh_map(
                    &obs,
                    d,
                    state.as_deref(),
                    config.refit_steps,
                    config.refit_learning_rate,
                );
                let params = match fit {
                    Ok(fit) => {
                        *state = Some(fit.unconstrained);
                        fit.params
                    }
                    Err(_) => match state {
                        Some(u) => stboh_params(u, &stboh_priors(d)),
                        None => stboh_params(
                            &std::iter::once(0.0)
                                .chain(stboh_priors(d).iter().map(|p| p.soft_unclip(p.mean)))
                                .collect::<Vec<_>>(),
                            &stboh_priors(d),
                        ),
                    },
                };
                Some((
                    params,
                    Acquisition::Ucb {
                        zeta: DEFAULT_UCB_ZETA,
                    },
                    0,
                ))
            }
            _ => unreachable!("baseline state matches method"),
        };

        let incumbent = obs.y.iter().copied().reduce(f64::max);
        let step = match source {
            Source::Pool(pool) => {
                let i = match model {
                    None => rng.random_range(0..pool.len()),
                    Some((params, acquisition, n_tasks)) => {
                        let post = Posterior::new(&params, &obs)?;
                        let scorer = Scorer {
                            acquisition,
                            t,
                            n_tasks,
                            incumbent,
                        };
                        let open: Vec<usize> = if config.dedup && picked.iter().any(|p| !p) {
                            (0..pool.len()).filter(|&i| !picked[i]).collect()
                        } else {
                            (0..pool.len()).collect()
                        };
                        let cand = pool.x.select_rows(&open);
                        open[argmax_candidates(&scorer.score(&post, &cand)?)?]
                    }
                };
                picked[i] = true;
                Step {
                    x: pool.x.row(i).iter().copied().collect(),
                    y: pool.y[i],
                    raw: pool.raw[i],
                }
            }
            Source::Online { objective, scale } => {
                let x: Vec<f64> = match model {
                    None => (0..d).map(|_| rng.random::<f64>()).collect(),
                    Some((params, acquisition, n_tasks)) => {
                        let post = Posterior::new(&params, &obs)?;
                        let scorer = Scorer {
                            acquisition,
                            t,
                            n_tasks,
                            incumbent,
                        };
                        let seed = iteration_seed(config.seed, t);
                        maximize_acquisition_online(&post, &scorer, config.candidate_count, seed)?.0
                    }
                };
                match objective.evaluate(&x).filter(|v| v.is_finite()) {
                    Some(raw) => Step {
                        y: scale.warp(raw),
                        x,
                        raw,
                    },
                    None => Step {
                        x,
                        y: f64::NEG_INFINITY,
                        raw: f64::NAN,
                    },
                }
            }
        };
        steps.push(step);
    }
    Ok(BoTrace::new(method.id(), config.seed, steps, f_max))
}

/// Replays `pool`; regret is measured against the pool maximum.
pub fn run_offline(pool: &Pool, method: &Method, config: &BoConfig) -> Result<BoTrace> {
    run(&mut Source::Pool(pool), method, config, pool.max())
}

/// Optimizes `objective` directly. `f_max` (in warped units) is only used for
/// regret; pass NaN when unknown.
pub fn run_online(
    objective: &mut dyn Objective,
    scale: ObjectiveScale,
    method: &Method,
    config: &BoConfig,
    f_max: f64,
) -> Result<BoTrace> {
    run(
        &mut Source::Online { objective, scale },
        method,
        config,
        f_max,
    )
}

/// A HyperBO run with a frozen prior.
pub fn run_hyperbo(
    pool: &Pool,
    prior: &GpParams,
    n_tasks: usize,
    config: &BoConfig,
) -> Result<BoTrace> {
    let method = Method::HyperBo {
        id: "hyperbo".into(),
        prior: prior.clone(),
        n_tasks,
    };
    run_offline(pool, &method, config)
}
