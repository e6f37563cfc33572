use hyperbo::acquisition::Acquisition;
use hyperbo::bo::{run_offline, BoConfig, Method, Pool};
use hyperbo::dataset::{extract_matching, DEFAULT_MATCH_TOL};
use hyperbo::gp::{GpParams, Kernel, KernelKind, MeanFn, MeanKind};
use hyperbo::objectives::ObjectiveKind;
use hyperbo::report::{
    model_diagnostics, performance_profile, read_runs, regret_percentiles_by_method,
    speedup_factor, write_run, RunRecord,
};
use hyperbo::synth::{sample_tasks, task_id, SynthConfig};
use hyperbo::training::{train_gp, TrainConfig};

fn truth() -> GpParams {
    GpParams {
        mean: MeanFn::Constant { c: 0.5 },
        kernel: Kernel::stationary(KernelKind::SquaredExponential, 0.0, vec![-1.2, -1.2]),
        log_noise_variance: -5.0,
    }
}

fn config() -> TrainConfig {
    TrainConfig {
        objective: ObjectiveKind::Nll,
        steps: 150,
        restarts: 2,
        mean_family: vec![MeanKind::Constant],
        kernel_family: vec![KernelKind::SquaredExponential],
        ..TrainConfig::default()
    }
}

#[test]
fn runs_round_trip_through_csv_into_reports() {
    let study = sample_tasks(&SynthConfig::new(truth(), 2, 4, 40, 0.5, 21)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut written = Vec::new();
    for t in 0..2 {
        let pool = Pool::from_task(&study.dataset, &task_id(t)).unwrap();
        for method in [Method::Random, Method::Stbo] {
            for seed in 0..3 {
                let trace =
                    run_offline(&pool, &method, &BoConfig::new(8, Acquisition::Ei, seed)).unwrap();
                let record = RunRecord {
                    method: method.id().to_string(),
                    task: task_id(t),
                    seed,
                    trace,
                    seconds: 0.0,
                };
                write_run(dir.path(), &record).unwrap();
                written.push(record);
            }
        }
    }
    let read = read_runs(dir.path()).unwrap();
    assert_eq!(read.len(), written.len());
    for r in &read {
        let w = written
            .iter()
            .find(|w| w.method == r.method && w.task == r.task && w.seed == r.seed)
            .unwrap();
        assert!(r.trace.bit_identical(&w.trace));
    }

    let profile = performance_profile(&read, 8).unwrap();
    assert_eq!(profile.criterion.len(), 2);
    for series in profile.fractions.values() {
        assert_eq!(series.len(), 8);
        assert!(series.iter().all(|f| (0.0..=1.0).contains(f)));
    }
    let pct = regret_percentiles_by_method(&read).unwrap();
    for p in pct.values() {
        for t in 0..8 {
            assert!(p.p20[t] <= p.p50[t] && p.p50[t] <= p.p80[t]);
        }
    }
    let pick =
        |m: &str| -> Vec<RunRecord> { read.iter().filter(|r| r.method == m).cloned().collect() };
    assert_eq!(
        speedup_factor(&pick("stbo"), &pick("rand")).unwrap().len(),
        2
    );
}

#[test]
fn diagnostics_rank_the_trained_model_on_training_tasks() {
    let study = sample_tasks(&SynthConfig::new(truth(), 2, 8, 30, 0.5, 22)).unwrap();
    let holdout = task_id(7);
    let training = study.dataset.without_task(&holdout).unwrap();
    let trained = train_gp(&training, None, &config()).unwrap().best;
    let matching = extract_matching(&study.dataset, DEFAULT_MATCH_TOL).unwrap();
    let rows = model_diagnostics(
        &trained,
        &study.dataset,
        &holdout,
        Some(&matching),
        &config(),
    )
    .unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(names, ["untrained", "single_task", "multi_task"]);
    let nll_all = |i: usize| rows[i].nll_all.unwrap();
    // the multi-task fit saw 7 of the 8 tasks; the others saw at most one
    assert!(nll_all(2) < nll_all(0));
    assert!(nll_all(2) < nll_all(1));
    // the single-task fit is trained on the held-out task itself
    assert!(rows[1].nll_held_out.unwrap() < rows[0].nll_held_out.unwrap());
    assert!(rows.iter().all(|r| r.divergence.is_some()));
}
