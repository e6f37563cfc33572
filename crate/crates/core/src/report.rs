//! Metrics over completed BO runs, and their CSV storage.
//!
//! Every report is a pure function of the run records: records are grouped
//! and sorted by (method, task, seed) first, so input order never matters.
//! Where several seeds exist for a (method, task) pair, best-so-far curves are
//! averaged over seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bo::{BoTrace, Step};
use crate::dataset::{MatchingDataset, OutputWarp, TuningDataset};
use crate::error::{Error, Result};
use crate::gp::{nll_subdataset, GpParams, Observations};
use crate::objectives::{divergence, moment_estimates, multi_task_nll, DegenerateMode};
use crate::training::{init_params, train_on, TrainConfig};

/// One BO run on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub trace: BoTrace,
    /// Wall time in seconds; NaN when loaded from CSV.
    pub seconds: f64,
}

impl RunRecord {
    pub fn file_name(&self) -> String {
        format!("{}__{}__seed{}.csv", self.method, self.task, self.seed)
    }
}

fn io_err(path: &Path, e: impl Into<io::Error>) -> Error {
    Error::io(path, e.into())
}

/// Writes `record` into `dir` as `{method}__{task}__seed{k}.csv`.
pub fn write_run(dir: &Path, record: &RunRecord) -> Result<PathBuf> {
    let path = dir.join(record.file_name());
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    let d = record.trace.steps.first().map_or(0, |s| s.x.len());
    let mut header = vec!["iteration".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    header.extend(["y", "raw", "best_so_far", "regret"].map(String::from));
    w.write_record(&header).map_err(|e| io_err(&path, e))?;
    let tr = &record.trace;
    for (t, step) in tr.steps.iter().enumerate() {
        let mut row = vec![(t + 1).to_string()];
        row.extend(step.x.iter().map(f64::to_string));
        row.extend([step.y, step.raw, tr.best_so_far[t], tr.regret[t]].map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn parse_name(path: &Path) -> Result<(String, String, u64)> {
    let bad = || Error::InvalidInput(format!("not a run file name: {}", path.display()));
    let stem = path.file_stem().and_then(|s| s.to_str()).ok_or_else(bad)?;
    let (method, rest) = stem.split_once("__").ok_or_else(bad)?;
    let (task, seed) = rest.rsplit_once("__seed").ok_or_else(bad)?;
    Ok((method.into(), task.into(), seed.parse().map_err(|_| bad())?))
}

/// Reads a run written by [`write_run`].
pub fn read_run(path: &Path) -> Result<RunRecord> {
    let (method, task, seed) = parse_name(path)?;
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let headers = r.headers().map_err(|e| io_err(path, e))?.clone();
    let d = headers
        .len()
        .checked_sub(5)
        .ok_or_else(|| Error::Schema(format!("{}: expected at least 5 columns", path.display())))?;
    let mut steps = Vec::new();
    let mut best = Vec::new();
    let mut regret = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| io_err(path, e))?;
        let v: Vec<f64> = row
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        steps.push(Step {
            x: v[1..=d].to_vec(),
            y: v[d + 1],
            raw: v[d + 2],
        });
        best.push(v[d + 3]);
        regret.push(v[d + 4]);
    }
    if steps.is_empty() {
        return Err(Error::Schema(format!("{}: empty run", path.display())));
    }
    let ys: Vec<f64> = steps.iter().map(|s| s.y).collect();
    let recommendation = ys
        .iter()
        .enumerate()
        .fold(0, |b, (i, &y)| if y > ys[b] { i } else { b });
    let trace = BoTrace {
        method: method.clone(),
        seed,
        f_max: regret[0] + best[0],
        steps,
        best_so_far: best,
        regret,
        recommendation,
    };
    Ok(RunRecord {
        method,
        task,
        seed,
        trace,
        seconds: f64::NAN,
    })
}

/// Reads every `*.csv` run in `dir`, sorted by file name.
pub fn read_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_run(p)).collect()
}

/// `p`-quantile of `values` by linear interpolation between order statistics,
/// with the endpoints at the minimum and maximum.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    }
}

/// Seed-averaged best-so-far curves keyed by method, then task.
type Curves = BTreeMap<String, BTreeMap<String, Vec<f64>>>;

fn mean_curves(records: &[RunRecord]) -> Result<Curves> {
    let mut grouped: BTreeMap<(&str, &str), BTreeMap<u64, &[f64]>> = BTreeMap::new();
    for r in records {
        let seeds = grouped.entry((&r.method, &r.task)).or_default();
        if seeds.insert(r.seed, &r.trace.best_so_far).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate run for method {} task {} seed {}",
                r.method, r.task, r.seed
            )));
        }
    }
    let mut out: Curves = BTreeMap::new();
    for ((method, task), seeds) in grouped {
        let len = seeds.values().map(|c| c.len()).min().unwrap_or(0);
        let n = seeds.len() as f64;
        let curve = (0..len)
            .map(|t| seeds.values().map(|c| c[t]).sum::<f64>() / n)
            .collect();
        out.entry(method.into())
            .or_default()
            .insert(task.into(), curve);
    }
    Ok(out)
}

fn check_grid(records: &[RunRecord]) -> Result<()> {
    let mut grid: BTreeMap<&str, BTreeSet<(&str, u64, usize)>> = BTreeMap::new();
    for r in records {
        grid.entry(&r.method)
            .or_default()
            .insert((&r.task, r.seed, r.trace.len()));
    }
    let mut cells = grid.values();
    if let Some(first) = cells.next() {
        if cells.any(|c| c != first) {
            return Err(Error::InvalidInput(
                "methods do not share the same task x seed x iteration grid".into(),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    /// 1-based iteration whose values define the criterion.
    pub criterion_iteration: usize,
    /// Per task: median over all methods (including the profiled one) of the
    /// best value at the criterion iteration.
    pub criterion: BTreeMap<String, f64>,
    /// Per method: fraction of tasks, at each iteration, where the method's
    /// best-so-far is strictly above the criterion.
    pub fractions: BTreeMap<String, Vec<f64>>,
}

pub fn performance_profile(
    records: &[RunRecord],
    criterion_iteration: usize,
) -> Result<ProfileReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no runs to profile".into()));
    }
    check_grid(records)?;
    let curves = mean_curves(records)?;
    let t_max = records[0].trace.len();
    if criterion_iteration == 0 || criterion_iteration > t_max {
        return Err(Error::InvalidInput(format!(
            "criterion iteration must lie in 1..={t_max}"
        )));
    }
    let tasks: Vec<&String> = curves.values().next().unwrap().keys().collect();
    let criterion: BTreeMap<String, f64> = tasks
        .iter()
        .map(|&task| {
            let at: Vec<f64> = curves
                .values()
                .map(|m| m[task][criterion_iteration - 1])
                .collect();
            (task.clone(), percentile(&at, 0.5))
        })
        .collect();
    let fractions = curves
        .iter()
        .map(|(method, per_task)| {
            let series = (0..t_max)
                .map(|t| {
                    let wins = per_task
                        .iter()
                        .filter(|(task, c)| c[t] > criterion[*task])
                        .count();
                    wins as f64 / per_task.len() as f64
                })
                .collect();
            (method.clone(), series)
        })
        .collect();
    Ok(ProfileReport {
        criterion_iteration,
        criterion,
        fractions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p20: Vec<f64>,
    pub p50: Vec<f64>,
    pub p80: Vec<f64>,
}

/// 20th, 50th and 80th percentiles of simple regret over all records, per
/// iteration.
pub fn regret_percentiles(records: &[RunRecord]) -> Result<Percentiles> {
    let Some(t_max) = records.iter().map(|r| r.trace.len()).min() else {
        return Err(Error::InvalidInput("no runs".into()));
    };
    let at = |t: usize| -> Vec<f64> { records.iter().map(|r| r.trace.regret[t]).collect() };
    let series = |p: f64| (0..t_max).map(|t| percentile(&at(t), p)).collect();
    Ok(Percentiles {
        p20: series(0.2),
        p50: series(0.5),
        p80: series(0.8),
    })
}

/// [`regret_percentiles`] for each method separately.
pub fn regret_percentiles_by_method(
    records: &[RunRecord],
) -> Result<BTreeMap<String, Percentiles>> {
    let mut by: BTreeMap<&str, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        by.entry(&r.method).or_default().push(r.clone());
    }
    by.into_iter()
        .map(|(m, rs)| Ok((m.to_string(), regret_percentiles(&rs)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Speedup {
    Ratio(f64),
    /// B never reached A's final best.
    NotReached,
}

fn first_hit(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|&v| v >= target).map(|i| i + 1)
}

/// Per task: iterations B needs to reach A's final best, divided by the
/// iterations A needs to reach it.
pub fn speedup_factor(
    records_a: &[RunRecord],
    records_b: &[RunRecord],
) -> Result<BTreeMap<String, Speedup>> {
    let a = mean_curves(records_a)?;
    let b = mean_curves(records_b)?;
    if a.len() != 1 || b.len() != 1 {
        return Err(Error::InvalidInput(
            "each side of a speedup needs runs of exactly one method".into(),
        ));
    }
    let (a, b) = (a.values().next().unwrap(), b.values().next().unwrap());
    let keys_a: BTreeSet<_> = a.keys().collect();
    let keys_b: BTreeSet<_> = b.keys().collect();
    if keys_a != keys_b {
        return Err(Error::InvalidInput(
            "methods were run on different tasks".into(),
        ));
    }
    Ok(a.iter()
        .map(|(task, ca)| {
            let target = *ca.last().unwrap();
            let hit_a = first_hit(ca, target).expect("the final value reaches itself");
            let s = match first_hit(&b[task], target) {
                Some(hit_b) => Speedup::Ratio(hit_b as f64 / hit_a as f64),
                None => Speedup::NotReached,
            };
            (task.clone(), s)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub model: String,
    pub nll_held_out: Option<f64>,
    pub nll_all: Option<f64>,
    pub divergence: Option<f64>,
}

/// Evaluates each named model on the held-out task, on all tasks and on the
/// matching data. A value the model cannot produce is `None`.
pub fn diagnose_models(
    models: &[(String, GpParams)],
    held_out: &Observations,
    all_tasks: &[Observations],
    matching: Option<&MatchingDataset>,
    mode: DegenerateMode,
) -> Vec<DiagnosticsRow> {
    let est = matching
        .filter(|m| !m.is_empty() && m.n_tasks() >= 2)
        .and_then(|m| moment_estimates(m).ok());
    models
        .iter()
        .map(|(name, gp)| DiagnosticsRow {
            model: name.clone(),
            nll_held_out: nll_subdataset(gp, held_out).ok(),
            nll_all: multi_task_nll(gp, all_tasks).ok(),
            divergence: est.as_ref().and_then(|e| divergence(e, gp, mode).ok()),
        })
        .collect()
}

/// Points of the held-out task used for the single-task baseline fit.
pub const SINGLE_TASK_POINTS: usize = 100;

/// Compares the untrained initialization, a fit to the held-out task alone
/// (on up to 100 of its points) and the multi-task fit, all with the trained
/// structure.
pub fn model_diagnostics(
    trained: &GpParams,
    dataset: &TuningDataset,
    held_out_task: &str,
    matching: Option<&MatchingDataset>,
    config: &TrainConfig,
) -> Result<Vec<DiagnosticsRow>> {
    let i = dataset
        .task_index(held_out_task)
        .ok_or_else(|| Error::InvalidInput(format!("unknown task `{held_out_task}`")))?;
    let all = dataset.observations(OutputWarp::Standard)?;
    let held_out = all[i].clone();
    let d = dataset.dim();
    let structure = trained.structure();
    let init = init_params(structure, d, config.seed, 0);

    let subset: Vec<usize> = {
        use rand::seq::index::sample;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let n = held_out.len();
        let mut idx = sample(&mut rng, n, n.min(SINGLE_TASK_POINTS)).into_vec();
        idx.sort_unstable();
        idx
    };
    let single_config = TrainConfig {
        objective: crate::objectives::ObjectiveKind::Nll,
        mean_family: vec![structure.mean],
        kernel_family: vec![structure.kernel],
        restarts: 1,
        ..config.clone()
    };
    let single = train_on(&[held_out.select(&subset)], None, d, &single_config)?.best;
    let models = vec![
        ("untrained".to_string(), init),
        ("single_task".to_string(), single),
        ("multi_task".to_string(), trained.clone()),
    ];
    let nonempty: Vec<Observations> = all.into_iter().filter(|o| !o.is_empty()).collect();
    Ok(diagnose_models(
        &models,
        &held_out,
        &nonempty,
        matching,
        config.degenerate_mode,
    ))
}

/// Writes `(iteration, series, value)` rows as CSV.
pub fn write_series<W: io::Write>(out: W, rows: &[(usize, String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| Error::io(Path::new("<output>"), e.into());
    w.write_record(["iteration", "series", "value"])
        .map_err(to_err)?;
    for (t, s, v) in rows {
        w.write_record([t.to_string(), s.clone(), v.to_string()])
            .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(Path::new("<output>"), e))?;
    Ok(())
}

impl ProfileReport {
    pub fn rows(&self) -> Vec<(usize, String, f64)> {
        self.fractions
            .iter()
            .flat_map(|(m, f)| {
                f.iter()
                    .enumerate()
                    .map(move |(t, &v)| (t + 1, m.clone(), v))
            })
            .collect()
    }
}

impl Percentiles {
    pub fn rows(&self, prefix: &str) -> Vec<(usize, String, f64)> {
        [("p20", &self.p20), ("p50", &self.p50), ("p80", &self.p80)]
            .into_iter()
            .flat_map(|(name, s)| {
                s.iter()
                    .enumerate()
                    .map(move |(t, &v)| (t + 1, format!("{prefix}{name}"), v))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: &str, task: &str, seed: u64, best: &[f64]) -> RunRecord {
        let steps = best
            .iter()
            .map(|&y| Step {
                x: vec![0.5],
                y,
                raw: y,
            })
            .collect();
        let f_max = 1.0;
        let trace = BoTrace {
            method: method.into(),
            seed,
            steps,
            best_so_far: best.to_vec(),
            regret: best.iter().map(|b| f_max - b).collect(),
            recommendation: 0,
            f_max,
        };
        RunRecord {
            method: method.into(),
            task: task.into(),
            seed,
            trace,
            seconds: 0.0,
        }
    }

    #[test]
    fn percentile_oracle() {
        assert_eq!(percentile(&[0.3, 0.1, 0.2], 0.5), 0.2);
        let v = [5.0, 1.0, 4.0, 2.0, 3.0];
        // sorted 1..5; position p·4
        assert!((percentile(&v, 0.2) - 1.8).abs() < 1e-12);
        assert!((percentile(&v, 0.8) - 4.2).abs() < 1e-12);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 5.0);
    }

    #[test]
    fn profile_toy_table() {
        // two methods, two tasks, three iterations
        let rs = vec![
            record("a", "t1", 0, &[0.1, 0.5, 0.9]),
            record("b", "t1", 0, &[0.2, 0.3, 0.4]),
            record("a", "t2", 0, &[0.0, 0.0, 0.1]),
            record("b", "t2", 0, &[0.3, 0.6, 0.7]),
        ];
        let p = performance_profile(&rs, 3).unwrap();
        // criteria: t1 median(0.9, 0.4) = 0.65; t2 median(0.1, 0.7) = 0.4
        assert!((p.criterion["t1"] - 0.65).abs() < 1e-12);
        assert!((p.criterion["t2"] - 0.4).abs() < 1e-12);
        assert_eq!(p.fractions["a"], vec![0.0, 0.0, 0.5]);
        assert_eq!(p.fractions["b"], vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn profile_counts_and_order_invariance() {
        let mut rs = vec![
            record("a", "t1", 0, &[1.0]),
            record("a", "t2", 0, &[1.0]),
            record("a", "t3", 0, &[0.0]),
            record("b", "t1", 0, &[0.0]),
            record("b", "t2", 0, &[0.0]),
            record("b", "t3", 0, &[0.0]),
            record("c", "t1", 0, &[0.5]),
            record("c", "t2", 0, &[0.5]),
            record("c", "t3", 0, &[0.5]),
        ];
        let p = performance_profile(&rs, 1).unwrap();
        assert!((p.fractions["a"][0] - 2.0 / 3.0).abs() < 1e-12);
        rs.reverse();
        assert_eq!(performance_profile(&rs, 1).unwrap(), p);
    }

    #[test]
    fn profile_rejects_grid_mismatch() {
        let rs = vec![record("a", "t1", 0, &[1.0]), record("b", "t2", 0, &[1.0])];
        assert!(performance_profile(&rs, 1).is_err());
    }

    #[test]
    fn speedup_examples() {
        let a = vec![record("a", "t", 0, &[0.5, 0.9, 0.9])];
        let b = vec![record("b", "t", 0, &[0.5, 0.5, 0.9])];
        assert_eq!(speedup_factor(&a, &b).unwrap()["t"], Speedup::Ratio(1.5));
        assert_eq!(speedup_factor(&a, &a).unwrap()["t"], Speedup::Ratio(1.0));
        let c = vec![record("c", "t", 0, &[0.5, 0.5, 0.6])];
        assert_eq!(speedup_factor(&a, &c).unwrap()["t"], Speedup::NotReached);
    }

    #[test]
    fn single_record_percentiles() {
        let r = record("a", "t", 0, &[0.2, 0.4]);
        let p = regret_percentiles(std::slice::from_ref(&r)).unwrap();
        assert_eq!(p.p20, r.trace.regret);
        assert_eq!(p.p50, r.trace.regret);
        assert_eq!(p.p80, r.trace.regret);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = record("h-nll", "task__a", 3, &[0.125, 0.3, 0.3]);
        r.trace.steps[1].y = f64::NEG_INFINITY;
        r.trace.steps[1].raw = f64::NAN;
        let path = write_run(dir.path(), &r).unwrap();
        assert!(path.ends_with("h-nll__task__a__seed3.csv"));
        let back = read_run(&path).unwrap();
        assert_eq!(back.task, "task__a");
        assert_eq!(back.seed, 3);
        assert!(back.trace.steps[1].raw.is_nan());
        assert_eq!(back.trace.best_so_far, r.trace.best_so_far);
        assert_eq!(back.trace.regret, r.trace.regret);
        assert_eq!(read_runs(dir.path()).unwrap().len(), 1);
    }
}
