//! Policy input: per-decision-step belief snapshots on the roadmap nodes,
//! average-pooled into windows, tagged with the path length travelled
//! since, plus shortest-path distances and positional features.

use permon_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::belief::{KernelParams, TargetBelief};
use crate::env::TimestampedLocation;
use crate::geom::DOMAIN_DIAMETER;
use crate::roadmap::{dijkstra_from, spectral_features, Roadmap};
use crate::Error;

fn default_history() -> usize {
    50
}
fn default_pool() -> usize {
    5
}
fn default_true() -> bool {
    true
}
fn default_future_dt() -> f64 {
    2.0
}
fn default_spectral_dim() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationConfig {
    /// Decision steps of history `T`.
    #[serde(default = "default_history")]
    pub history: usize,
    /// Pooling kernel and stride `s`.
    #[serde(default = "default_pool")]
    pub pool: usize,
    /// Include the belief at `t + future_dt` next to the current one.
    #[serde(default = "default_true")]
    pub future: bool,
    #[serde(default = "default_future_dt")]
    pub future_dt: f64,
    #[serde(default = "default_spectral_dim")]
    pub spectral_dim: usize,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            history: default_history(),
            pool: default_pool(),
            future: true,
            future_dt: default_future_dt(),
            spectral_dim: default_spectral_dim(),
        }
    }
}

impl ObservationConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.history == 0 || self.pool == 0 {
            return Err(Error::Config("history and pool must be >= 1".into()));
        }
        Ok(())
    }

    /// Belief scalars per node and target.
    pub fn features_per_target(&self) -> usize {
        if self.future {
            4
        } else {
            2
        }
    }

    /// Pooled windows `T' = ceil(T / s)`.
    pub fn windows(&self) -> usize {
        self.history.div_ceil(self.pool)
    }
}

/// Belief scalars at every roadmap node for one decision step.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    /// Per target slot, row-major `|V| x F`.
    pub per_target: Vec<Vec<f64>>,
}

/// Prior belief features for one node.
fn prior_features(f: usize, kernel: &KernelParams) -> Vec<f64> {
    let s = kernel.prior_variance.sqrt();
    [kernel.prior_mean, s, kernel.prior_mean, s][..f].to_vec()
}

/// Queries every belief at the node set, now and (optionally) in the
/// future. Undiscovered targets get prior features.
pub fn snapshot(
    beliefs: &[Option<TargetBelief>],
    roadmap: &Roadmap,
    t: f64,
    config: &ObservationConfig,
    kernel: &KernelParams,
) -> Snapshot {
    let f = config.features_per_target();
    let n = roadmap.num_nodes();
    let now: Vec<TimestampedLocation> = roadmap.nodes().iter().map(|p| TimestampedLocation::at(*p, t)).collect();
    let per_target = beliefs
        .iter()
        .map(|b| match b {
            None => prior_features(f, kernel).repeat(n),
            Some(b) => {
                let cur = b.regress(&now);
                let fut = config.future.then(|| b.predict_future(&now, config.future_dt));
                let mut flat = Vec::with_capacity(n * f);
                for j in 0..n {
                    flat.push(cur.mean[j]);
                    flat.push(cur.std[j]);
                    if let Some(fut) = &fut {
                        flat.push(fut.mean[j]);
                        flat.push(fut.std[j]);
                    }
                }
                flat
            }
        })
        .collect();
    Snapshot { time: t, per_target }
}

/// Per-roadmap inputs that do not change during an episode.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub coords: Tensor,
    pub spectral: Tensor,
}

impl GraphContext {
    pub fn new(roadmap: &Roadmap, spectral_dim: usize) -> Self {
        let coords = Tensor::from_rows(&roadmap.nodes().iter().map(|p| vec![p.x, p.y]).collect::<Vec<_>>());
        let spectral = if spectral_dim == 0 {
            Tensor::zeros(roadmap.num_nodes(), 0)
        } else {
            Tensor::from_rows(&spectral_features(roadmap, spectral_dim))
        };
        Self { coords, spectral }
    }
}

/// One pooled window of the history.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Pooled `|V| x F` features per observed target; empty when masked.
    pub targets: Vec<Tensor>,
    pub tag: f64,
    /// `false` when the window lies entirely before the episode start.
    pub valid: bool,
}

#[derive(Clone, Debug)]
pub struct Observation {
    pub coords: Tensor,
    pub spectral: Tensor,
    /// Most recent first.
    pub windows: Vec<Window>,
    /// Shortest-path distance from the current node, over the domain diameter.
    pub dist: Tensor,
    pub current: usize,
    pub neighbors: Vec<usize>,
}

impl Observation {
    pub fn num_nodes(&self) -> usize {
        self.coords.rows()
    }

    pub fn temporal_mask(&self) -> Vec<bool> {
        self.windows.iter().map(|w| w.valid).collect()
    }
}

/// Pools the last `T` snapshots (oldest first in `history`) into windows
/// of `s`, most recent window first. Only steps inside the episode are
/// averaged; a window with none is masked. Each tag is the path length
/// since the oldest pooled step, over the eviction horizon.
///
/// `targets` selects the target slots to expose. With none known, a
/// single prior-valued target is exposed so the network still has input.
#[allow(clippy::too_many_arguments)]
pub fn build_observation(
    history: &[Snapshot],
    targets: &[usize],
    now: f64,
    context: &GraphContext,
    roadmap: &Roadmap,
    current: usize,
    config: &ObservationConfig,
    kernel: &KernelParams,
) -> Observation {
    assert!(!history.is_empty(), "observation needs at least one snapshot");
    let f = config.features_per_target();
    let n = roadmap.num_nodes();
    let horizon = kernel.eviction_horizon();
    let recent: Vec<&Snapshot> = history.iter().rev().take(config.history).collect();
    let phantom = prior_features(f, kernel).repeat(n);
    let windows = (0..config.windows())
        .map(|w| {
            let start = w * config.pool;
            let end = ((w + 1) * config.pool).min(config.history).min(recent.len());
            if start >= end {
                return Window {
                    targets: Vec::new(),
                    tag: 0.0,
                    valid: false,
                };
            }
            let steps = &recent[start..end];
            let pooled = if targets.is_empty() {
                vec![Tensor::from_vec(n, f, phantom.clone())]
            } else {
                targets
                    .iter()
                    .map(|&i| {
                        let mut acc = vec![0.0; n * f];
                        for s in steps {
                            for (a, v) in acc.iter_mut().zip(&s.per_target[i]) {
                                *a += v;
                            }
                        }
                        let inv = 1.0 / steps.len() as f64;
                        acc.iter_mut().for_each(|a| *a *= inv);
                        Tensor::from_vec(n, f, acc)
                    })
                    .collect()
            };
            let oldest = steps.last().expect("non-empty window").time;
            Window {
                targets: pooled,
                tag: (now - oldest) / horizon,
                valid: true,
            }
        })
        .collect();
    let dist = dijkstra_from(roadmap, current)
        .into_iter()
        .map(|d| d / DOMAIN_DIAMETER)
        .collect();
    Observation {
        coords: context.coords.clone(),
        spectral: context.spectral.clone(),
        windows,
        dist: Tensor::from_vec(n, 1, dist),
        current,
        neighbors: roadmap.neighbors(current).to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point;

    fn line() -> Roadmap {
        let nodes = (0..3).map(|i| Point::new(0.1 + 0.3 * i as f64, 0.5)).collect();
        Roadmap::from_edges(nodes, &[[0, 1], [1, 2]]).unwrap()
    }

    fn snap(t: f64, v: f64) -> Snapshot {
        Snapshot {
            time: t,
            per_target: vec![vec![v; 12]],
        }
    }

    #[test]
    fn window_counts_and_masking() {
        let r = line();
        let ctx = GraphContext::new(&r, 2);
        let k = KernelParams::default();
        let config = ObservationConfig {
            history: 100,
            ..Default::default()
        };
        let obs = build_observation(&[snap(0.0, 0.0), snap(0.3, 1.0)], &[0], 0.3, &ctx, &r, 1, &config, &k);
        assert_eq!(obs.windows.len(), 20);
        assert_eq!(obs.temporal_mask().iter().filter(|v| !**v).count(), 19);
        assert!((obs.windows[0].tag - 0.3 / k.eviction_horizon()).abs() < 1e-12);
        // Only the two in-episode steps are averaged.
        assert!(obs.windows[0].targets[0].data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert_eq!(obs.neighbors, vec![0, 2]);
        assert!((obs.dist.get(2, 0) - 0.3 / DOMAIN_DIAMETER).abs() < 1e-12);
    }

    #[test]
    fn single_step_single_window() {
        let r = line();
        let ctx = GraphContext::new(&r, 2);
        let config = ObservationConfig {
            history: 1,
            pool: 1,
            ..Default::default()
        };
        let k = KernelParams::default();
        let obs = build_observation(&[snap(0.0, 0.2), snap(1.0, 0.7)], &[0], 1.0, &ctx, &r, 0, &config, &k);
        assert_eq!(obs.windows.len(), 1);
        assert_eq!(obs.windows[0].tag, 0.0);
        assert!(obs.windows[0].targets[0].data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn no_known_target_exposes_prior_phantom() {
        let r = line();
        let ctx = GraphContext::new(&r, 2);
        let k = KernelParams::default();
        let config = ObservationConfig::default();
        let obs = build_observation(&[snap(0.0, 0.2)], &[], 0.0, &ctx, &r, 0, &config, &k);
        assert_eq!(obs.windows[0].targets.len(), 1);
        assert_eq!(obs.windows[0].targets[0].row(1), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn prior_snapshot_and_pair_toggle() {
        let r = line();
        let k = KernelParams::default();
        let beliefs = vec![Some(TargetBelief::new(k)), None];
        let s = snapshot(&beliefs, &r, 1.0, &ObservationConfig::default(), &k);
        for slot in &s.per_target {
            assert_eq!(slot, &[0.0, 1.0, 0.0, 1.0].repeat(3));
        }
        let pair = ObservationConfig {
            future: false,
            ..Default::default()
        };
        let s = snapshot(&beliefs, &r, 1.0, &pair, &k);
        assert_eq!(s.per_target[0].len(), 6);
    }
}
