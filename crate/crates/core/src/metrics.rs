//! Target-area uncertainty, the reward signal, and the evaluation metrics
//! (Unc, MinOb, JSD). Metrics read ground-truth positions; planners never do.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::belief::TargetBelief;
use crate::env::TimestampedLocation;
use crate::geom::Point;
use crate::Error;

/// Standard deviation of the ground-truth Gaussian around each target.
pub const TRUTH_SIGMA: f64 = 0.1;
/// Mean-field ceiling before normalization.
const MEAN_CEILING: f64 = 1e6;
const MEAN_FLOOR: f64 = 1e-12;
/// σ̄ above which a target counts as lost.
pub const LOST_THRESHOLD: f64 = 0.9;

fn default_grid_side() -> usize {
    30
}
fn default_area_radius() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    #[serde(default = "default_grid_side")]
    pub grid_side: usize,
    /// Radius of each target area; matches the sensor footprint.
    #[serde(default = "default_area_radius")]
    pub area_radius: f64,
    /// JSD needs the posterior mean on the full grid at every instant, which
    /// dominates evaluation cost.
    #[serde(default = "default_true")]
    pub compute_jsd: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            grid_side: default_grid_side(),
            area_radius: default_area_radius(),
            compute_jsd: true,
        }
    }
}

/// Uniform `side x side` lattice over the unit square, corners included.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGrid {
    side: usize,
    points: Vec<Point>,
}

impl EvalGrid {
    pub fn new(side: usize) -> Self {
        assert!(side >= 2, "grid needs at least two points per side");
        let pitch = 1.0 / (side - 1) as f64;
        let points = (0..side)
            .flat_map(|i| (0..side).map(move |j| Point::new(i as f64 * pitch, j as f64 * pitch)))
            .collect();
        Self { side, points }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Grid points within `radius` of `center`.
    pub fn area(&self, center: Point, radius: f64) -> Vec<Point> {
        self.points
            .iter()
            .copied()
            .filter(|p| p.dist(center) <= radius)
            .collect()
    }

    pub fn at_time(&self, t: f64) -> Vec<TimestampedLocation> {
        self.points.iter().map(|p| TimestampedLocation::at(*p, t)).collect()
    }
}

impl Default for EvalGrid {
    fn default() -> Self {
        Self::new(default_grid_side())
    }
}

/// Mean posterior std over the target area around `truth` at time `t`.
/// A target without a belief (not yet discovered) scores the prior value 1.
pub fn target_area_uncertainty(
    belief: Option<&TargetBelief>,
    truth: Point,
    t: f64,
    grid: &EvalGrid,
    radius: f64,
) -> f64 {
    let area = grid.area(truth, radius);
    assert!(!area.is_empty(), "target area at {truth:?} contains no grid points");
    let Some(belief) = belief else {
        return 1.0;
    };
    let queries: Vec<_> = area.iter().map(|p| TimestampedLocation::at(*p, t)).collect();
    let std = belief.std_at(&queries);
    (std.iter().sum::<f64>() / std.len() as f64).clamp(0.0, 1.0)
}

/// Sum of per-target uncertainty decreases; increases are ignored.
pub fn reward(previous: &[f64], current: &[f64]) -> f64 {
    assert_eq!(previous.len(), current.len());
    previous
        .iter()
        .zip(current)
        .map(|(p, c)| (p - c).max(0.0))
        .sum()
}

/// Jensen-Shannon divergence (natural log) of two non-negative weight
/// vectors, each normalized to sum 1 first.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        let a = a / sp;
        let b = b / sq;
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            total += 0.5 * b * (b / m).ln();
        }
    }
    total.clamp(0.0, std::f64::consts::LN_2)
}

/// Unnormalized Gaussian bump with peak 1 at `center`.
pub fn truth_field(grid: &EvalGrid, center: Point) -> Vec<f64> {
    let two_var = 2.0 * TRUTH_SIGMA * TRUTH_SIGMA;
    grid.points()
        .iter()
        .map(|p| (-p.dist_sq(center) / two_var).exp())
        .collect()
}

/// JSD between a belief mean field on the grid and the ground-truth bump.
pub fn belief_jsd(mean: &[f64], grid: &EvalGrid, truth: Point) -> f64 {
    let belief: Vec<f64> = mean
        .iter()
        .map(|m| m.clamp(0.0, MEAN_CEILING).max(MEAN_FLOOR))
        .collect();
    jensen_shannon(&belief, &truth_field(grid, truth))
}

/// Per-instant metric inputs, one row per sense event.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTrace {
    pub times: Vec<f64>,
    /// `sigma_bar[k][i]` for instant k and target i.
    pub sigma_bar: Vec<Vec<f64>>,
    /// Cumulative detections per target.
    pub observations: Vec<Vec<u32>>,
    /// Empty when JSD is disabled.
    pub jsd: Vec<Vec<f64>>,
}

/// Unc with the spread across targets of their time-averaged σ̄.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unc {
    pub mean: f64,
    pub between_target_std: f64,
}

impl MetricTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn num_targets(&self) -> usize {
        self.sigma_bar.first().map_or(0, Vec::len)
    }

    pub fn push(&mut self, time: f64, sigma_bar: Vec<f64>, observations: Vec<u32>, jsd: Option<Vec<f64>>) {
        self.times.push(time);
        self.sigma_bar.push(sigma_bar);
        self.observations.push(observations);
        if let Some(j) = jsd {
            self.jsd.push(j);
        }
    }

    pub fn unc(&self) -> Unc {
        if self.is_empty() {
            return Unc {
                mean: 1.0,
                between_target_std: 0.0,
            };
        }
        let n = self.num_targets();
        let k = self.len() as f64;
        let per_target: Vec<f64> = (0..n)
            .map(|i| self.sigma_bar.iter().map(|row| row[i]).sum::<f64>() / k)
            .collect();
        let mean = per_target.iter().sum::<f64>() / n as f64;
        let var = per_target.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Unc {
            mean,
            between_target_std: var.sqrt(),
        }
    }

    pub fn min_observations(&self) -> u32 {
        self.observations
            .last()
            .and_then(|row| row.iter().copied().min())
            .unwrap_or(0)
    }

    /// Mean JSD over targets and instants; `None` when not recorded.
    pub fn mean_jsd(&self) -> Option<f64> {
        if self.jsd.is_empty() {
            return None;
        }
        let (sum, count) = self
            .jsd
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        Some(sum / count.max(1) as f64)
    }

    /// Writes `time, sigma_bar_<i>..., obs_<i>..., jsd_<i>...` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), Error> {
        let n = self.num_targets();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string()];
        header.extend((0..n).map(|i| format!("sigma_bar_{i}")));
        header.extend((0..n).map(|i| format!("obs_{i}")));
        if !self.jsd.is_empty() {
            header.extend((0..n).map(|i| format!("jsd_{i}")));
        }
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.sigma_bar[k].iter().map(f64::to_string));
            row.extend(self.observations[k].iter().map(u32::to_string));
            if let Some(j) = self.jsd.get(k) {
                row.extend(j.iter().map(f64::to_string));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
