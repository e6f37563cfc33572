use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use hyperbo::acquisition::{theoretical_ucb_zeta, Acquisition};
use hyperbo::bo::{run_offline, run_online, BoConfig, Method, Pool};
use hyperbo::dataset::{extract_matching, load_study, TuningDataset};
use hyperbo::gp::GpParams;
use hyperbo::objectives::{ObjectiveKind, DEFAULT_LAMBDA};
use hyperbo::report::{
    model_diagnostics, performance_profile, read_runs, regret_percentiles_by_method,
    speedup_factor, write_run, write_series, RunRecord, Speedup,
};
use hyperbo::synth::{sample_tasks, task_max, SynthConfig, SynthTruth};
use hyperbo::training::{train_gp, TrainConfig, TrainResult};
use hyperbo::{Error, Result};
use rayon::prelude::*;

use crate::{BoArgs, BoOfflineArgs, BoOnlineArgs, FitArgs, ReportCommand, SynthArgs, TrainArgs};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodArg {
    HyperBo(ObjectiveKind),
    Rand,
    Stbo,
    Stboh,
}

impl MethodArg {
    fn id(self) -> String {
        match self {
            MethodArg::HyperBo(ObjectiveKind::Nll) => "h-nll".into(),
            MethodArg::HyperBo(ObjectiveKind::Kl) => "h-kl".into(),
            MethodArg::HyperBo(ObjectiveKind::NllPlusKl { lambda }) if lambda == DEFAULT_LAMBDA => {
                "h-nllkl".into()
            }
            MethodArg::HyperBo(ObjectiveKind::NllPlusKl { lambda }) => format!("h-nllkl:{lambda}"),
            MethodArg::Rand => "rand".into(),
            MethodArg::Stbo => "stbo".into(),
            MethodArg::Stboh => "stboh".into(),
        }
    }
}

impl FromStr for MethodArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rand" => MethodArg::Rand,
            "stbo" => MethodArg::Stbo,
            "stboh" => MethodArg::Stboh,
            _ => match s.strip_prefix("h-") {
                Some(obj) => MethodArg::HyperBo(obj.parse()?),
                None => return Err(Error::InvalidInput(format!("unknown method `{s}`"))),
            },
        })
    }
}

fn train_config(args: &TrainArgs, objective: ObjectiveKind) -> TrainConfig {
    TrainConfig {
        objective,
        steps: args.steps,
        restarts: args.restarts,
        seed: args.train_seed,
        learning_rate: args.lr,
        mean_family: args.means.clone(),
        kernel_family: args.kernels.clone(),
        degenerate_mode: args.degenerate,
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Trains on `dataset`, with matching data only when the objective needs it.
fn train(
    dataset: &TuningDataset,
    args: &TrainArgs,
    objective: ObjectiveKind,
) -> Result<TrainResult> {
    let matching = if objective.needs_matching() {
        let m = extract_matching(dataset, args.match_tol)?;
        if m.is_empty() {
            return Err(Error::InvalidInput(
                "the study has no inputs shared by every task; KL objectives need matching data"
                    .into(),
            ));
        }
        Some(m)
    } else {
        None
    };
    train_gp(dataset, matching.as_ref(), &train_config(args, objective))
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let mut dataset = load_study(&args.study)?;
    if let Some(task) = &args.holdout {
        dataset = dataset.without_task(task)?;
    }
    if args.online_warp {
        dataset = dataset.online_warped()?;
    }
    let result = train(&dataset, &args.train, args.objective)?;
    result.best.save(&args.out)?;
    if let Some(path) = &args.result {
        write_json(path, &result)?;
    }
    eprintln!(
        "fitted {} with objective {:.6} on {} tasks",
        result.structure,
        result.final_objective,
        dataset.tasks.len()
    );
    Ok(())
}

/// Builds the method to run, training a prior on the other tasks if needed.
fn method(bo: &BoArgs, online: bool) -> Result<Method> {
    let MethodArg::HyperBo(objective) = bo.method else {
        return Ok(match bo.method {
            MethodArg::Rand => Method::Random,
            MethodArg::Stbo => Method::Stbo,
            _ => Method::Stboh,
        });
    };
    let dataset = load_study(&bo.study)?;
    let mut training = dataset.without_task(&bo.test_task)?;
    if online {
        training = training.online_warped()?;
    }
    if let Acquisition::UcbTheory { delta } = bo.acq {
        // fail before training if the last iteration is outside the domain
        theoretical_ucb_zeta(training.tasks.len(), bo.iters, delta)?;
    }
    let prior = match &bo.prior {
        Some(path) => GpParams::load(path)?,
        None => train(&training, &bo.train, objective)?.best,
    };
    Ok(Method::HyperBo {
        id: bo.method.id(),
        prior,
        n_tasks: training.tasks.len(),
    })
}

fn write_records(dir: &Path, records: &[RunRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for r in records {
        let path = write_run(dir, r)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn seeds(bo: &BoArgs) -> Vec<u64> {
    (0..bo.seeds).map(|k| bo.seed_base + k).collect()
}

pub fn bo_offline(args: &BoOfflineArgs) -> Result<()> {
    let bo = &args.bo;
    let dataset = load_study(&bo.study)?;
    let pool = Pool::from_task(&dataset, &bo.test_task)?;
    let method = method(bo, false)?;
    let records: Vec<RunRecord> = seeds(bo)
        .into_par_iter()
        .map(|seed| {
            let mut config = BoConfig::new(bo.iters, bo.acq, seed);
            config.dedup = args.dedup;
            let start = Instant::now();
            let trace = run_offline(&pool, &method, &config)?;
            Ok(RunRecord {
                method: method.id().to_string(),
                task: bo.test_task.clone(),
                seed,
                trace,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<_>>()?;
    write_records(&bo.out_dir, &records)
}

pub fn bo_online(args: &BoOnlineArgs) -> Result<()> {
    let bo = &args.bo;
    let dataset = load_study(&bo.study)?;
    let truth = SynthTruth::load(&args.truth)?;
    let function = truth.function(&bo.test_task)?;
    let f_max = task_max(&function, args.max_resolution)?;
    let method = method(bo, true)?;
    let records: Vec<RunRecord> = seeds(bo)
        .into_par_iter()
        .map(|seed| {
            let mut config = BoConfig::new(bo.iters, bo.acq, seed);
            config.candidate_count = args.candidates;
            let mut f = function.clone();
            let start = Instant::now();
            let trace = run_online(&mut f, dataset.objective_kind, &method, &config, f_max)?;
            Ok(RunRecord {
                method: method.id().to_string(),
                task: bo.test_task.clone(),
                seed,
                trace,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<_>>()?;
    write_records(&bo.out_dir, &records)
}

fn sidecar_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("study");
    out.with_file_name(format!("{stem}.truth.json"))
}

pub fn synth_gen(args: &SynthArgs) -> Result<()> {
    let truth = GpParams::load(&args.truth)?;
    let dim = match (args.dim, truth.kernel.dim()) {
        (Some(d), _) | (None, Some(d)) => d,
        (None, None) => {
            return Err(Error::InvalidInput(
                "--dim is required when the truth kernel has no length scales".into(),
            ))
        }
    };
    let config = SynthConfig::new(
        truth,
        dim,
        args.tasks,
        args.points,
        args.matched_frac,
        args.seed,
    );
    let study = sample_tasks(&config)?;
    study.dataset.save(&args.out)?;
    let sidecar = args
        .truth_out
        .clone()
        .unwrap_or_else(|| sidecar_path(&args.out));
    study.truth.save(&sidecar)?;
    println!("{}", args.out.display());
    println!("{}", sidecar.display());
    Ok(())
}

fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(fs::File::create(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?),
        None => Box::new(io::stdout()),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn report(cmd: &ReportCommand) -> Result<()> {
    match cmd {
        ReportCommand::Profile {
            runs,
            criterion_iteration,
            out,
        } => {
            let records = read_runs(runs)?;
            let t = criterion_iteration
                .or_else(|| records.first().map(|r| r.trace.len()))
                .unwrap_or(1);
            let report = performance_profile(&records, t)?;
            write_series(output(out)?, &report.rows())
        }
        ReportCommand::Percentiles { runs, out } => {
            let records = read_runs(runs)?;
            let rows: Vec<_> = regret_percentiles_by_method(&records)?
                .iter()
                .flat_map(|(m, p)| p.rows(&format!("{m}/")))
                .collect();
            write_series(output(out)?, &rows)
        }
        ReportCommand::Speedup { runs, a, b, out } => {
            let records = read_runs(runs)?;
            let pick = |m: &str| -> Vec<RunRecord> {
                records.iter().filter(|r| r.method == m).cloned().collect()
            };
            let table = speedup_factor(&pick(a), &pick(b))?;
            let mut w = output(out)?;
            let io_err = |e| Error::Io {
                path: PathBuf::from("<output>"),
                source: e,
            };
            writeln!(w, "task,ratio").map_err(io_err)?;
            for (task, s) in table {
                let v = match s {
                    Speedup::Ratio(r) => r.to_string(),
                    Speedup::NotReached => "not_reached".into(),
                };
                writeln!(w, "{task},{v}").map_err(io_err)?;
            }
            Ok(())
        }
        ReportCommand::Diagnostics {
            study,
            holdout,
            params,
            out,
            train,
        } => {
            let dataset = load_study(study)?;
            let trained = GpParams::load(params)?;
            let matching = extract_matching(&dataset, train.match_tol)?;
            let config = train_config(train, ObjectiveKind::Nll);
            let rows = model_diagnostics(&trained, &dataset, holdout, Some(&matching), &config)?;
            let mut w = output(out)?;
            let io_err = |e| Error::Io {
                path: PathBuf::from("<output>"),
                source: e,
            };
            writeln!(w, "model,nll_held_out,nll_all,divergence").map_err(io_err)?;
            for r in rows {
                writeln!(
                    w,
                    "{},{},{},{}",
                    r.model,
                    opt(r.nll_held_out),
                    opt(r.nll_all),
                    opt(r.divergence)
                )
                .map_err(io_err)?;
            }
            Ok(())
        }
    }
}
