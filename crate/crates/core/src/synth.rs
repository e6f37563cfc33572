//! Synthetic studies drawn from a known GP.
//!
//! Every task's function is a draw from the truth GP: latent values are
//! sampled jointly at the task's inputs, then observed with Gaussian noise. A
//! share of the inputs sits on a grid common to all tasks so the study has
//! matching data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bo::Objective;
use crate::dataset::{ObjectiveScale, SearchSpace, SubDataset, Trial, TuningDataset};
use crate::error::{Error, Result};
use crate::gp::{Factor, GpParams};
use crate::qmc::Halton;

/// Smallest grid accepted by [`task_max`].
pub const MIN_MAX_RESOLUTION: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub truth: GpParams,
    pub dim: usize,
    /// One entry per task.
    pub points_per_task: Vec<usize>,
    /// Share of `min M_i` placed on the common grid.
    pub matched_fraction: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(
        truth: GpParams,
        dim: usize,
        n_tasks: usize,
        points: usize,
        matched_fraction: f64,
        seed: u64,
    ) -> Self {
        SynthConfig {
            truth,
            dim,
            points_per_task: vec![points; n_tasks],
            matched_fraction,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        self.truth.check_dim(self.dim)?;
        if self.dim == 0 {
            return Err(Error::InvalidInput("dimension must be >= 1".into()));
        }
        if self.points_per_task.is_empty() {
            return Err(Error::InvalidInput("need at least one task".into()));
        }
        if self.points_per_task.contains(&0) {
            return Err(Error::InvalidInput(
                "every task needs at least one point".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.matched_fraction) {
            return Err(Error::Range {
                name: "matched_fraction".into(),
                value: self.matched_fraction,
                low: 0.0,
                high: 1.0,
            });
        }
        Ok(())
    }

    /// Size of the common grid: `round(q · min M_i)`.
    pub fn matched_count(&self) -> usize {
        let m = self.points_per_task.iter().copied().min().unwrap_or(0);
        (self.matched_fraction * m as f64).round() as usize
    }
}

/// One task's function: the truth GP conditioned, without noise, on the task's
/// latent draws. Queries return the conditional mean, which reproduces the
/// stored latent values at the stored inputs.
#[derive(Debug, Clone)]
pub struct TaskFunction {
    truth: GpParams,
    x: DMatrix<f64>,
    latent: DVector<f64>,
    factor: Factor,
    alpha: DVector<f64>,
}

impl TaskFunction {
    pub fn new(truth: GpParams, x: DMatrix<f64>, latent: DVector<f64>) -> Result<Self> {
        if x.nrows() != latent.len() || x.nrows() == 0 {
            return Err(Error::Dimension {
                expected: x.nrows(),
                actual: latent.len(),
            });
        }
        truth.check_dim(x.ncols())?;
        let factor = Factor::new(&truth.kernel.gram_sym(&x)?, truth.kernel.scale())?;
        let alpha = factor.solve(&(&latent - truth.mean.eval(&x)?));
        Ok(TaskFunction {
            truth,
            x,
            latent,
            factor,
            alpha,
        })
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn latent(&self) -> &DVector<f64> {
        &self.latent
    }

    pub fn jitter(&self) -> f64 {
        self.factor.jitter()
    }

    /// Function values at the rows of `xq`.
    pub fn eval_many(&self, xq: &DMatrix<f64>) -> Result<DVector<f64>> {
        let k = self.truth.kernel.gram(xq, &self.x)?;
        Ok(self.truth.mean.eval(xq)? + k * &self.alpha)
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        if let Some(i) = (0..self.x.nrows()).find(|&i| self.x.row(i).iter().eq(x.iter())) {
            return Ok(self.latent[i]);
        }
        let xq = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.eval_many(&xq)?[0])
    }
}

impl Objective for TaskFunction {
    fn dim(&self) -> usize {
        TaskFunction::dim(self)
    }

    fn evaluate(&mut self, x: &[f64]) -> Option<f64> {
        self.eval(x).ok()
    }
}

/// Lower bound on `max_x f(x)`: the best of `resolution` quasi-random points
/// and the stored inputs.
pub fn task_max(f: &TaskFunction, resolution: usize) -> Result<f64> {
    if resolution < MIN_MAX_RESOLUTION {
        return Err(Error::InvalidInput(format!(
            "task_max needs at least {MIN_MAX_RESOLUTION} grid points, got {resolution}"
        )));
    }
    let grid = Halton::new(f.dim(), 0).points(resolution);
    let on_grid = f.eval_many(&grid)?.max();
    Ok(on_grid.max(f.latent.max()))
}

/// Latent draws for one task, as stored in the sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTruth {
    pub task_id: String,
    pub inputs: Vec<Vec<f64>>,
    pub latent: Vec<f64>,
}

/// Everything needed to rebuild the task functions of a synthetic study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub truth: GpParams,
    pub seed: u64,
    pub matched_count: usize,
    pub tasks: Vec<TaskTruth>,
}

impl SynthTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn function(&self, task_id: &str) -> Result<TaskFunction> {
        let task = self
            .tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::InvalidInput(format!("no truth for task `{task_id}`")))?;
        let d = task.inputs.first().map_or(0, Vec::len);
        let x = DMatrix::from_fn(task.inputs.len(), d, |i, j| task.inputs[i][j]);
        TaskFunction::new(
            self.truth.clone(),
            x,
            DVector::from_vec(task.latent.clone()),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SynthStudy {
    pub dataset: TuningDataset,
    pub functions: Vec<TaskFunction>,
    pub truth: SynthTruth,
}

pub fn task_id(i: usize) -> String {
    format!("task-{i:03}")
}

fn uniform_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            m[(i, j)] = rng.random::<f64>();
        }
    }
    m
}

fn sample_task(
    config: &SynthConfig,
    grid: &DMatrix<f64>,
    i: usize,
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(i as u64 + 1);
    let d = config.dim;
    let fresh = uniform_rows(&mut rng, config.points_per_task[i] - grid.nrows(), d);
    let mut x = DMatrix::zeros(config.points_per_task[i], d);
    x.rows_mut(0, grid.nrows()).copy_from(grid);
    x.rows_mut(grid.nrows(), fresh.nrows()).copy_from(&fresh);

    let truth = &config.truth;
    let factor = Factor::new(&truth.kernel.gram_sym(&x)?, truth.kernel.scale())?;
    let z = DVector::from_fn(x.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let latent = truth.mean.eval(&x)? + factor.l() * z;
    let sd = truth.noise_variance().sqrt();
    let y = latent.map(|f| f + sd * rng.sample::<f64, _>(StandardNormal));
    Ok((x, latent, y))
}

/// Draws a study of `N` tasks from the truth GP.
///
/// The common grid uses random stream 0 and task `i` uses stream `i + 1`, so
/// output does not depend on how tasks are scheduled.
pub fn sample_tasks(config: &SynthConfig) -> Result<SynthStudy> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let grid = uniform_rows(&mut rng, config.matched_count(), config.dim);

    let draws: Vec<_> = (0..config.points_per_task.len())
        .into_par_iter()
        .map(|i| sample_task(config, &grid, i))
        .collect::<Result<_>>()?;

    let space = SearchSpace::unit_cube(config.dim)?;
    let names: Vec<String> = space.dims().iter().map(|p| p.name.clone()).collect();
    let mut tasks = Vec::with_capacity(draws.len());
    let mut truths = Vec::with_capacity(draws.len());
    let mut functions = Vec::with_capacity(draws.len());
    for (i, (x, latent, y)) in draws.into_iter().enumerate() {
        let trials = (0..x.nrows())
            .map(|r| {
                let params: BTreeMap<String, f64> = names
                    .iter()
                    .cloned()
                    .zip(x.row(r).iter().copied())
                    .collect();
                Trial::feasible(params, y[r])
            })
            .collect();
        tasks.push(SubDataset {
            task_id: task_id(i),
            trials,
        });
        truths.push(TaskTruth {
            task_id: task_id(i),
            inputs: x.row_iter().map(|r| r.iter().copied().collect()).collect(),
            latent: latent.iter().copied().collect(),
        });
        functions.push(TaskFunction::new(config.truth.clone(), x, latent)?);
    }
    Ok(SynthStudy {
        dataset: TuningDataset::new(space, tasks, ObjectiveScale::Warped)?,
        functions,
        truth: SynthTruth {
            truth: config.truth.clone(),
            seed: config.seed,
            matched_count: config.matched_count(),
            tasks: truths,
        },
    })
}
