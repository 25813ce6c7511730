use permon_core::baselines::{lawnmower_plan, run_lawnmower, run_random, run_tsp_loop};
use permon_core::env::{generate_tracks, EnvConfig, TargetTrack};
use permon_core::experiment::{run_episode, run_experiment, write_results, ExperimentConfig, Planner};
use permon_core::geom::Point;
use permon_core::mission::{Mission, MissionConfig, PriorMode};
use permon_core::roadmap::build_roadmap_seeded;
use permon_core::rng::{stream_rng, Stream};

fn mission(n: usize, rv: f64, seed: u64, prior: PriorMode, start: Point) -> Mission {
    let env = EnvConfig::new(n, rv, seed);
    let tracks = generate_tracks(&env, &mut stream_rng(seed, Stream::Tracks));
    let config = MissionConfig {
        prior,
        horizon: 10.0,
        ..Default::default()
    };
    Mission::new(&env, tracks, start, config).unwrap()
}

#[test]
fn cadence_spans_segments() {
    let mut m = mission(1, 0.1, 0, PriorMode::Full, Point::new(0.0, 0.0));
    let mut events = 0;
    for p in [Point::new(0.25, 0.0), Point::new(0.5, 0.0), Point::new(0.5, 0.17)] {
        events += m.travel_to(p).unwrap().len();
    }
    // 0.67 of path: events at 0.1, ..., 0.6.
    assert_eq!(events, 6);
    assert_eq!(m.trace().len(), 6);
    assert!((m.time() - 0.67).abs() < 1e-12);
}

#[test]
fn metrics_stay_in_range_on_a_random_walk() {
    let roadmap = build_roadmap_seeded(80, 10, 3).unwrap();
    let mut m = mission(3, 0.1, 3, PriorMode::Full, roadmap.node(0));
    run_random(&mut m, &roadmap, 0, None, &mut stream_rng(3, Stream::Planner)).unwrap();
    let log = m.into_log("random");
    assert!(log.trace.sigma_bar.iter().flatten().all(|s| (0.0..=1.0).contains(s)));
    assert!(log.rewards.iter().all(|r| (0.0..=3.0).contains(r)));
    assert!(log.trace.jsd.iter().flatten().all(|j| (0.0..=std::f64::consts::LN_2).contains(j)));
    for w in log.nodes.windows(2) {
        assert!(roadmap.neighbors(w[0]).contains(&w[1]));
    }
    assert!((log.path.last().unwrap().time - 10.0).abs() < 1e-9);
}

#[test]
fn priors_set_the_starting_uncertainty() {
    let start = Point::new(0.0, 0.0);
    let full = mission(2, 0.1, 4, PriorMode::Full, start);
    let count = mission(2, 0.1, 4, PriorMode::CountOnly, start);
    let none = mission(2, 0.1, 4, PriorMode::None, start);
    assert!(full.sigma_bar_now().iter().all(|s| *s < 0.75));
    assert!(count.sigma_bar_now().iter().all(|s| (s - 1.0).abs() < 1e-9));
    assert_eq!(none.sigma_bar_now(), vec![1.0, 1.0]);
    assert!(none.known_targets().is_empty());
    assert_eq!(full.known_targets(), vec![0, 1]);
}

#[test]
fn undiscovered_targets_ignore_misses() {
    // A parked target far from the agent is never seen.
    let env = EnvConfig::new(1, 0.0, 0);
    let track = TargetTrack::new(vec![Point::new(0.9, 0.9), Point::new(0.95, 0.9)], 0.0, 0.0);
    let config = MissionConfig {
        prior: PriorMode::None,
        horizon: 2.0,
        ..Default::default()
    };
    let mut m = Mission::new(&env, vec![track], Point::new(0.1, 0.1), config).unwrap();
    m.travel_to(Point::new(0.1, 0.9)).unwrap();
    assert!(m.beliefs()[0].is_none());
    assert!(m.trace().sigma_bar.iter().all(|row| row[0] == 1.0));
    assert_eq!(m.measurements().len(), m.trace().len());
}

#[test]
fn lawnmower_covers_lanes_until_horizon() {
    let plan = lawnmower_plan(0.1);
    assert!(plan.iter().all(|p| p.in_unit_square()));
    let mut m = mission(2, 0.0, 8, PriorMode::Full, plan[0]);
    run_lawnmower(&mut m).unwrap();
    assert!((m.time() - 10.0).abs() < 1e-9);
    let log = m.into_log("lawnmower");
    let xs: Vec<f64> = log.path.iter().map(|w| w.position.x).collect();
    for lane in [0.1, 0.3, 0.5, 0.7, 0.9] {
        assert!(xs.iter().any(|x| (x - lane).abs() < 1e-12));
    }
}

#[test]
fn tsp_loop_revisits_stationary_targets() {
    let env = EnvConfig::new(3, 0.0, 2);
    let tracks = generate_tracks(&env, &mut stream_rng(2, Stream::Tracks));
    let initial: Vec<Point> = tracks.iter().map(|t| t.position()).collect();
    let mut m = Mission::new(&env, tracks, Point::new(0.5, 0.5), MissionConfig::default()).unwrap();
    run_tsp_loop(&mut m, &initial, 0.0, 0.1).unwrap();
    assert!(m.detections().iter().all(|&d| d >= 5), "{:?}", m.detections());
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let mut config = ExperimentConfig::new(2, 0.05);
    config.planners = vec![Planner::Lawnmower, Planner::TspLoop, Planner::Random];
    config.instances = 3;
    config.horizon = 5.0;
    config.nodes = 60;
    let one = run_experiment(&config, None).unwrap();
    config.workers = 3;
    let three = run_experiment(&config, None).unwrap();
    assert_eq!(one.logs.len(), 9);
    for (a, b) in one.logs.iter().zip(&three.logs) {
        assert!(a.same_outcome(b));
    }
    let dir = tempfile::tempdir().unwrap();
    write_results(&config, &one, dir.path()).unwrap();
    let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 10);
    assert!(dir.path().join("episodes/tsp_loop_1.csv").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["planners"].as_array().unwrap().len(), 3);
}

#[test]
fn policy_planner_requires_a_network() {
    let config = ExperimentConfig::new(2, 0.05);
    assert!(run_episode(&config, Planner::Policy, 0, None).is_err());
    let mut none = ExperimentConfig::new(2, 0.05);
    none.prior = PriorMode::None;
    assert!(none.validate().is_err(), "TSP loop without initial positions");
    none.planners = vec![Planner::Random];
    none.validate().unwrap();
}
