#![allow(dead_code)]

use permon_core::env::{generate_tracks, EnvConfig, TimestampedLocation};
use permon_core::geom::Point;
use permon_core::mission::{Mission, MissionConfig};
use permon_core::observation::{build_observation, snapshot, GraphContext, Observation, ObservationConfig, Snapshot};
use permon_core::roadmap::{build_roadmap_seeded, Roadmap};
use permon_core::rng::{stream_rng, Stream};

/// Walks `steps` moves along first neighbours and returns the snapshots,
/// the final node and the known targets.
pub fn walk(
    roadmap: &Roadmap,
    targets: usize,
    steps: usize,
    seed: u64,
    config: &ObservationConfig,
) -> (Vec<Snapshot>, usize, Vec<usize>, f64) {
    let env = EnvConfig::new(targets, 0.05, seed);
    let tracks = generate_tracks(&env, &mut stream_rng(seed, Stream::Tracks));
    let mut current = 0;
    let mut mission = Mission::new(&env, tracks, roadmap.node(current), MissionConfig::default()).unwrap();
    let kernel = mission.config().kernel;
    let mut history = Vec::new();
    for i in 0..steps {
        history.push(snapshot(mission.beliefs(), roadmap, mission.time(), config, &kernel));
        let nb = roadmap.neighbors(current);
        current = nb[(i * 7 + seed as usize) % nb.len()];
        mission.travel_to(roadmap.node(current)).unwrap();
    }
    history.push(snapshot(mission.beliefs(), roadmap, mission.time(), config, &kernel));
    (history, current, mission.known_targets(), mission.time())
}

/// Observation after a short walk on a fresh roadmap.
pub fn observation(nodes: usize, targets: usize, steps: usize, seed: u64, config: &ObservationConfig) -> (Roadmap, Observation) {
    let roadmap = build_roadmap_seeded(nodes, 10, seed).unwrap();
    let ctx = GraphContext::new(&roadmap, config.spectral_dim);
    let (history, current, known, now) = walk(&roadmap, targets, steps, seed, config);
    let kernel = Default::default();
    let obs = build_observation(&history, &known, now, &ctx, &roadmap, current, config, &kernel);
    (roadmap, obs)
}

/// Star around node 0 with `k` leaves, leaves chained so the graph stays connected.
pub fn star(k: usize) -> Roadmap {
    let mut nodes = vec![Point::new(0.5, 0.5)];
    let mut edges = Vec::new();
    for i in 0..k {
        let a = std::f64::consts::TAU * i as f64 / k as f64;
        nodes.push(Point::new(0.5 + 0.3 * a.cos(), 0.5 + 0.3 * a.sin()));
        edges.push([0, i + 1]);
        if i > 0 {
            edges.push([i, i + 1]);
        }
    }
    Roadmap::from_edges(nodes, &edges).unwrap()
}

/// Matérn 3/2 on the scaled distance, written out independently of the crate.
pub fn matern_oracle(a: &TimestampedLocation, b: &TimestampedLocation) -> f64 {
    let r = (((a.x - b.x) / 0.1).powi(2) + ((a.y - b.y) / 0.1).powi(2) + ((a.t - b.t) / 3.0).powi(2)).sqrt();
    let s = 3f64.sqrt() * r;
    (1.0 + s) * (-s).exp()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for j in c..n {
                a[r][j] -= f * a[c][j];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|j| a[r][j] * x[j]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Posterior mean and std by a dense solve with `1e-8` jitter.
pub fn dense_posterior(xs: &[TimestampedLocation], zs: &[f64], q: &TimestampedLocation) -> (f64, f64) {
    let n = xs.len();
    let gram: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| matern_oracle(&xs[i], &xs[j]) + if i == j { 1e-8 } else { 0.0 }).collect())
        .collect();
    let kq: Vec<f64> = xs.iter().map(|x| matern_oracle(x, q)).collect();
    let w = gauss_solve(gram, kq.clone());
    let mean = w.iter().zip(zs).map(|(a, b)| a * b).sum();
    let var = 1.0 - kq.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    (mean, var.max(0.0).sqrt())
}
