use std::collections::BTreeMap;

use hyperbo::acquisition::Acquisition;
use hyperbo::bo::{run_offline, run_online, BoConfig, Method, Objective, Pool};
use hyperbo::dataset::{ObjectiveScale, OutputWarp, SearchSpace, SubDataset, Trial, TuningDataset};
use hyperbo::gp::{GpParams, Kernel, KernelKind, MeanFn};
use hyperbo::qmc::Halton;
use nalgebra::DMatrix;

fn bump_prior() -> GpParams {
    GpParams {
        mean: MeanFn::Constant { c: 0.0 },
        kernel: Kernel::stationary(KernelKind::SquaredExponential, 0.0, vec![0.25f64.ln(); 2]),
        log_noise_variance: -6.0,
    }
}

/// 100 quasi-random points on a smooth bump whose top point is raised far
/// above everything else.
fn spike_pool() -> Pool {
    let x = Halton::new(2, 5).points(100);
    let mut y: Vec<f64> = x
        .row_iter()
        .map(|r| (-((r[0] - 0.7).powi(2) + (r[1] - 0.3).powi(2)) / (2.0 * 0.2f64.powi(2))).exp())
        .collect();
    let top = (0..y.len()).max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
    y[top] = 1e6;
    let raw = y.clone();
    Pool::new(x, y, raw).unwrap()
}

fn hitting_time(method: &Method, pool: &Pool, seed: u64, horizon: usize) -> usize {
    let config = BoConfig::new(horizon, Acquisition::Pi { margin: 0.1 }, seed);
    let trace = run_offline(pool, method, &config).unwrap();
    trace
        .best_so_far
        .iter()
        .position(|&b| b == pool.max())
        .map_or(horizon + 1, |i| i + 1)
}

#[test]
fn hyperbo_finds_a_dominant_point_no_later_than_random() {
    let pool = spike_pool();
    let hyper = Method::HyperBo {
        id: "h".into(),
        prior: bump_prior(),
        n_tasks: 10,
    };
    let horizon = 300;
    let mean = |m: &Method| {
        (0..20)
            .map(|s| hitting_time(m, &pool, s, horizon) as f64)
            .sum::<f64>()
            / 20.0
    };
    let h = mean(&hyper);
    // uniform draws with replacement hit one point of 100 after 100 tries on average
    assert!(h <= 100.0, "hyperbo mean hitting time {h}");
    assert!(h <= mean(&Method::Random));
}

#[test]
fn offline_traces_stay_in_the_pool() {
    let pool = spike_pool();
    for method in [Method::Random, Method::Stbo, Method::Stboh] {
        let config = BoConfig::new(12, Acquisition::Ei, 1);
        let trace = run_offline(&pool, &method, &config).unwrap();
        assert_eq!(trace.len(), 12);
        for step in &trace.steps {
            let i = (0..pool.len())
                .find(|&i| pool.x.row(i).iter().copied().eq(step.x.iter().copied()))
                .expect("step is a pool member");
            assert_eq!(pool.y[i], step.y);
        }
        assert!(trace.regret.iter().all(|r| *r >= 0.0));
    }
}

/// Feasible only in the left half of the square.
struct HalfFeasible;

impl Objective for HalfFeasible {
    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&mut self, x: &[f64]) -> Option<f64> {
        (x[0] < 0.5).then(|| x[0] + x[1])
    }
}

#[test]
fn online_runs_survive_infeasible_points() {
    let methods = [
        Method::Random,
        Method::Stbo,
        Method::Stboh,
        Method::HyperBo {
            id: "h".into(),
            prior: bump_prior(),
            n_tasks: 10,
        },
    ];
    for method in &methods {
        let mut config = BoConfig::new(10, Acquisition::Ucb { zeta: 1.8 }, 4);
        config.candidate_count = 400;
        let trace = run_online(
            &mut HalfFeasible,
            ObjectiveScale::Warped,
            method,
            &config,
            1.5,
        )
        .unwrap();
        assert_eq!(trace.len(), 10);
        for s in &trace.steps {
            assert_eq!(s.feasible(), s.x[0] < 0.5);
            assert!(s.x.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

fn study_with_infeasible() -> TuningDataset {
    let space = SearchSpace::unit_cube(1).unwrap();
    let trial = |x: f64, y: Option<f64>| {
        let params = BTreeMap::from([("x0".to_string(), x)]);
        match y {
            Some(v) => Trial::feasible(params, v),
            None => Trial {
                params,
                objective: None,
                feasible: false,
            },
        }
    };
    let tasks = vec![
        SubDataset {
            task_id: "a".into(),
            trials: vec![
                trial(0.1, Some(1.0)),
                trial(0.5, None),
                trial(0.9, Some(3.0)),
            ],
        },
        SubDataset {
            task_id: "b".into(),
            trials: vec![trial(0.2, Some(0.5)), trial(0.4, Some(7.0))],
        },
    ];
    TuningDataset::new(space, tasks, ObjectiveScale::Loss).unwrap()
}

#[test]
fn online_warped_study_matches_the_online_view() {
    let study = study_with_infeasible();
    let warped = study.online_warped().unwrap();
    assert_eq!(warped.objective_kind, ObjectiveScale::Warped);
    for i in 0..study.tasks.len() {
        let online = study.task_observations(i, OutputWarp::Online).unwrap();
        let standard = warped.task_observations(i, OutputWarp::Standard).unwrap();
        assert_eq!(online.x, standard.x);
        assert_eq!(online.y, standard.y);
        assert!(standard.y.iter().all(|v| (-2.0..=2.0).contains(v)));
    }
    // the infeasible trial enters at the floor
    assert_eq!(
        warped.task_observations(0, OutputWarp::Standard).unwrap().y[1],
        -2.0
    );
    assert_eq!(
        warped.task_observations(0, OutputWarp::Standard).unwrap().x,
        DMatrix::from_column_slice(3, 1, &[0.1, 0.5, 0.9])
    );
}
