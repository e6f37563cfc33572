//! Search spaces, studies and the warpings applied before any GP modelling.
//!
//! All GP math runs in the warped unit cube `[0, 1]^d`. Objective values are
//! warped so that larger is better (`-ln(r + 1e-10)` for error rates), and
//! the online protocol additionally squashes each task's values into
//! `[-2, 2]` with infeasible evaluations pinned at `-2`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Observations;

/// Offset added to error rates before taking logs.
pub const OBJECTIVE_OFFSET: f64 = 1e-10;

/// Default componentwise tolerance for matching inputs across tasks.
pub const DEFAULT_MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub low: f64,
    pub high: f64,
    pub scaling: Scaling,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, low: f64, high: f64, scaling: Scaling) -> Result<Self> {
        let spec = ParamSpec {
            name: name.into(),
            low,
            high,
            scaling,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.low < self.high) {
            return Err(Error::Schema(format!(
                "parameter `{}` needs finite low < high, got [{}, {}]",
                self.name, self.low, self.high
            )));
        }
        if self.scaling == Scaling::Log && self.low <= 0.0 {
            return Err(Error::Schema(format!(
                "log-scaled parameter `{}` needs low > 0, got {}",
                self.name, self.low
            )));
        }
        Ok(())
    }

    /// Maps a native value into `[0, 1]`.
    pub fn warp(&self, value: f64) -> Result<f64> {
        if !(value >= self.low && value <= self.high) {
            return Err(Error::Range {
                name: self.name.clone(),
                value,
                low: self.low,
                high: self.high,
            });
        }
        let u = match self.scaling {
            Scaling::Linear => (value - self.low) / (self.high - self.low),
            Scaling::Log => (value.ln() - self.low.ln()) / (self.high.ln() - self.low.ln()),
        };
        Ok(u.clamp(0.0, 1.0))
    }

    /// Inverse of [`ParamSpec::warp`].
    pub fn unwarp(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self.scaling {
            Scaling::Linear => self.low + u * (self.high - self.low),
            Scaling::Log => (self.low.ln() + u * (self.high.ln() - self.low.ln())).exp(),
        }
    }
}

/// An ordered, hyper-rectangular search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ParamSpec>", into = "Vec<ParamSpec>")]
pub struct SearchSpace {
    dims: Vec<ParamSpec>,
}

impl SearchSpace {
    pub fn new(dims: Vec<ParamSpec>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Schema(
                "search space needs at least one parameter".into(),
            ));
        }
        let mut seen = HashSet::new();
        for spec in &dims {
            spec.validate()?;
            if !seen.insert(spec.name.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate parameter name `{}`",
                    spec.name
                )));
            }
        }
        Ok(SearchSpace { dims })
    }

    /// The unit cube `[0, 1]^d` with parameters named `x0..x{d-1}`.
    pub fn unit_cube(d: usize) -> Result<Self> {
        SearchSpace::new(
            (0..d)
                .map(|i| ParamSpec {
                    name: format!("x{i}"),
                    low: 0.0,
                    high: 1.0,
                    scaling: Scaling::Linear,
                })
                .collect(),
        )
    }

    pub fn dims(&self) -> &[ParamSpec] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    /// Warps a full parameter assignment into `[0, 1]^d`.
    pub fn warp(&self, params: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        self.dims
            .iter()
            .map(|spec| {
                let value = params.get(&spec.name).ok_or_else(|| {
                    Error::Schema(format!("trial is missing parameter `{}`", spec.name))
                })?;
                spec.warp(*value)
            })
            .collect()
    }

    pub fn unwarp(&self, u: &[f64]) -> BTreeMap<String, f64> {
        self.dims
            .iter()
            .zip(u)
            .map(|(spec, &v)| (spec.name.clone(), spec.unwarp(v)))
            .collect()
    }
}

impl TryFrom<Vec<ParamSpec>> for SearchSpace {
    type Error = Error;

    fn try_from(dims: Vec<ParamSpec>) -> Result<Self> {
        SearchSpace::new(dims)
    }
}

impl From<SearchSpace> for Vec<ParamSpec> {
    fn from(space: SearchSpace) -> Self {
        space.dims
    }
}

/// Free-function form of [`SearchSpace::warp`].
pub fn warp_input(space: &SearchSpace, params: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
    space.warp(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub params: BTreeMap<String, f64>,
    pub objective: Option<f64>,
    pub feasible: bool,
}

impl Trial {
    pub fn feasible(params: BTreeMap<String, f64>, objective: f64) -> Self {
        Trial {
            params,
            objective: Some(objective),
            feasible: true,
        }
    }

    /// Feasible trials that actually carry an objective value.
    pub fn usable_objective(&self) -> Option<f64> {
        if self.feasible {
            self.objective.filter(|v| v.is_finite())
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubDataset {
    pub task_id: String,
    pub trials: Vec<Trial>,
}

/// How recorded objective values are turned into maximization targets.
///
/// `error_rate` and `loss` both go through [`warp_objective`]; `warped` marks
/// studies (such as synthetic ones) whose values are already in warped units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveScale {
    #[default]
    ErrorRate,
    Loss,
    Warped,
}

impl ObjectiveScale {
    pub fn warp(self, raw: f64) -> f64 {
        match self {
            ObjectiveScale::ErrorRate | ObjectiveScale::Loss => warp_objective(raw),
            ObjectiveScale::Warped => raw,
        }
    }
}

/// Which output transform to apply when building GP observations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum OutputWarp {
    /// Feasible trials only, warped by the study's [`ObjectiveScale`].
    #[default]
    Standard,
    /// Every trial; per-task softplus squashing into `[-2, 2]`.
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStudy", into = "RawStudy")]
pub struct TuningDataset {
    pub space: SearchSpace,
    pub tasks: Vec<SubDataset>,
    pub objective_kind: ObjectiveScale,
}

#[derive(Serialize, Deserialize)]
struct RawStudy {
    #[serde(default)]
    objective_kind: ObjectiveScale,
    space: SearchSpace,
    tasks: Vec<SubDataset>,
}

impl TryFrom<RawStudy> for TuningDataset {
    type Error = Error;

    fn try_from(raw: RawStudy) -> Result<Self> {
        TuningDataset::new(raw.space, raw.tasks, raw.objective_kind)
    }
}

impl From<TuningDataset> for RawStudy {
    fn from(d: TuningDataset) -> Self {
        RawStudy {
            objective_kind: d.objective_kind,
            space: d.space,
            tasks: d.tasks,
        }
    }
}

impl TuningDataset {
    pub fn new(
        space: SearchSpace,
        tasks: Vec<SubDataset>,
        objective_kind: ObjectiveScale,
    ) -> Result<Self> {
        let dataset = TuningDataset {
            space,
            tasks,
            objective_kind,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Schema("study needs at least one task".into()));
        }
        let mut ids = HashSet::new();
        for task in &self.tasks {
            if !ids.insert(task.task_id.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate task id `{}`",
                    task.task_id
                )));
            }
            if task.trials.is_empty() {
                return Err(Error::Schema(format!(
                    "task `{}` has no trials",
                    task.task_id
                )));
            }
            for (j, trial) in task.trials.iter().enumerate() {
                for name in trial.params.keys() {
                    if !self.space.dims().iter().any(|s| &s.name == name) {
                        return Err(Error::Schema(format!(
                            "task `{}` trial {j} references unknown parameter `{name}`",
                            task.task_id
                        )));
                    }
                }
                self.space.warp(&trial.params).map_err(|e| {
                    Error::Schema(format!("task `{}` trial {j}: {e}", task.task_id))
                })?;
                if trial.feasible && trial.objective.is_none() {
                    return Err(Error::Schema(format!(
                        "task `{}` trial {j} is feasible but has no objective",
                        task.task_id
                    )));
                }
                if let Some(r) = trial.objective {
                    if !r.is_finite() {
                        return Err(Error::Schema(format!(
                            "task `{}` trial {j} has a non-finite objective",
                            task.task_id
                        )));
                    }
                    if trial.feasible && self.objective_kind != ObjectiveScale::Warped && r < 0.0 {
                        return Err(Error::Schema(format!(
                            "task `{}` trial {j}: error rates and losses must be >= 0",
                            task.task_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.space.len()
    }

    pub fn task_index(&self, task_id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.task_id == task_id)
    }

    /// A copy of this study without the named task.
    pub fn without_task(&self, task_id: &str) -> Result<TuningDataset> {
        let tasks: Vec<_> = self
            .tasks
            .iter()
            .filter(|t| t.task_id != task_id)
            .cloned()
            .collect();
        if tasks.len() == self.tasks.len() {
            return Err(Error::InvalidInput(format!("unknown task `{task_id}`")));
        }
        TuningDataset::new(self.space.clone(), tasks, self.objective_kind)
    }

    /// Warped GP observations for one task.
    pub fn task_observations(&self, index: usize, warp: OutputWarp) -> Result<Observations> {
        let task = &self.tasks[index];
        let d = self.dim();
        let mut rows = Vec::new();
        let mut values = Vec::new();
        let mut feasible = Vec::new();
        for trial in &task.trials {
            match (warp, trial.usable_objective()) {
                (_, Some(r)) => {
                    rows.push(self.space.warp(&trial.params)?);
                    values.push(self.objective_kind.warp(r));
                    feasible.push(true);
                }
                (OutputWarp::Online, None) => {
                    rows.push(self.space.warp(&trial.params)?);
                    values.push(f64::NEG_INFINITY);
                    feasible.push(false);
                }
                (OutputWarp::Standard, None) => {}
            }
        }
        let y = match warp {
            OutputWarp::Standard => values,
            OutputWarp::Online => warp_online(&values, &feasible)?,
        };
        let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Ok(Observations::new(x, DVector::from_vec(y)))
    }

    /// The study as an online run's GP sees it: each task's values squashed by
    /// [`warp_online`], infeasible trials kept as feasible at `-2`.
    pub fn online_warped(&self) -> Result<TuningDataset> {
        let tasks = (0..self.tasks.len())
            .map(|i| {
                let obs = self.task_observations(i, OutputWarp::Online)?;
                let trials = self.tasks[i]
                    .trials
                    .iter()
                    .zip(obs.y.iter())
                    .map(|(t, &y)| Trial::feasible(t.params.clone(), y))
                    .collect();
                Ok(SubDataset {
                    task_id: self.tasks[i].task_id.clone(),
                    trials,
                })
            })
            .collect::<Result<_>>()?;
        TuningDataset::new(self.space.clone(), tasks, ObjectiveScale::Warped)
    }

    /// Warped observations for every task, in task order.
    pub fn observations(&self, warp: OutputWarp) -> Result<Vec<Observations>> {
        (0..self.tasks.len())
            .map(|i| self.task_observations(i, warp))
            .collect()
    }
}

/// Reads and validates a study file.
pub fn load_study(path: impl AsRef<Path>) -> Result<TuningDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TuningDataset::from_json_str(&text)
}

/// `-ln(r + 1e-10)`: turns an error rate into a maximization target.
pub fn warp_objective(r: f64) -> f64 {
    -(r + OBJECTIVE_OFFSET).ln()
}

fn softplus(z: f64) -> f64 {
    // ln(1 + e^z) without overflow for large z
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Lower of the two middle elements for even counts.
fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Squashes one task's values into `[-2, 2]`.
///
/// Feasible values map through `softplus(y - median) / softplus(max - median) * 4 - 2`;
/// infeasible entries map to exactly `-2`.
pub fn warp_online(values: &[f64], feasible: &[bool]) -> Result<Vec<f64>> {
    if values.len() != feasible.len() {
        return Err(Error::Dimension {
            expected: values.len(),
            actual: feasible.len(),
        });
    }
    let mut ok: Vec<f64> = values
        .iter()
        .zip(feasible)
        .filter(|(_, &f)| f)
        .map(|(&v, _)| v)
        .collect();
    if ok.is_empty() {
        return Err(Error::InvalidInput(
            "online warping needs at least one feasible value".into(),
        ));
    }
    let y_max = ok.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let median = lower_median(&mut ok);
    let denom = softplus(y_max - median);
    Ok(values
        .iter()
        .zip(feasible)
        .map(|(&v, &f)| {
            if f {
                (softplus(v - median) / denom * 4.0 - 2.0).clamp(-2.0, 2.0)
            } else {
                -2.0
            }
        })
        .collect())
}

/// Inputs evaluated on every task, with the `M x N` value matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingDataset {
    /// `M x d` warped inputs.
    pub inputs: DMatrix<f64>,
    /// `M x N`; row `j` holds the observations of input `j` across tasks.
    pub values: DMatrix<f64>,
}

impl MatchingDataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn n_tasks(&self) -> usize {
        self.values.ncols()
    }
}

fn within(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Finds the inputs present (componentwise within `tol`, in warped
/// coordinates) in every task.
///
/// Anchors are taken from the first task in trial order; within a task the
/// first matching trial supplies the value. Infeasible trials never match.
pub fn extract_matching(dataset: &TuningDataset, tol: f64) -> Result<MatchingDataset> {
    if !(tol >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "tolerance must be >= 0, got {tol}"
        )));
    }
    let d = dataset.dim();
    let warped: Vec<Vec<(Vec<f64>, f64)>> = dataset
        .tasks
        .iter()
        .map(|task| {
            task.trials
                .iter()
                .filter_map(|t| t.usable_objective().map(|r| (t, r)))
                .map(|(t, r)| {
                    Ok((
                        dataset.space.warp(&t.params)?,
                        dataset.objective_kind.warp(r),
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut anchors: Vec<Vec<f64>> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (x, _) in &warped[0] {
        if anchors.iter().any(|a| within(a, x, tol)) {
            continue;
        }
        let row: Option<Vec<f64>> = warped
            .iter()
            .map(|task| {
                task.iter()
                    .find(|(xt, _)| within(xt, x, tol))
                    .map(|(_, y)| *y)
            })
            .collect();
        if let Some(row) = row {
            anchors.push(x.clone());
            rows.push(row);
        }
    }
    let m = anchors.len();
    let n = dataset.tasks.len();
    Ok(MatchingDataset {
        inputs: DMatrix::from_fn(m, d, |i, j| anchors[i][j]),
        values: DMatrix::from_fn(m, n, |i, j| rows[i][j]),
    })
}
