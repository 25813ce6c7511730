//! One monitoring episode: the agent travels, the world is sensed on the
//! global cadence, beliefs are updated and evicted, and metrics are logged
//! at every sense event.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::belief::{KernelParams, TargetBelief};
use crate::env::{step_along_edge, EnvConfig, MeasurementSet, SenseCadence, SenseEvent, TargetTrack, TimestampedLocation};
use crate::geom::Point;
use crate::metrics::{belief_jsd, target_area_uncertainty, EvalGrid, MetricTrace, MetricsConfig, Unc};
use crate::Error;

/// What the agent knows about the targets at the start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Target count and initial positions.
    #[default]
    Full,
    /// Target count only.
    CountOnly,
    /// Nothing; beliefs appear on first sighting.
    None,
}

fn default_horizon() -> f64 {
    30.0
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissionConfig {
    /// Total path length of the mission.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub kernel: KernelParams,
    #[serde(default)]
    pub prior: PriorMode,
    #[serde(default)]
    pub metrics: MetricsConfig,
    /// Per-sense-event metric logging; training turns it off.
    #[serde(default = "default_true")]
    pub record_metrics: bool,
}

impl Default for MissionConfig {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            kernel: KernelParams::default(),
            prior: PriorMode::Full,
            metrics: MetricsConfig::default(),
            record_metrics: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub position: Point,
    pub time: f64,
}

/// Everything recorded about one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub planner: String,
    /// Roadmap node sequence; empty for planners that move freely.
    pub nodes: Vec<usize>,
    pub path: Vec<Waypoint>,
    pub measurements: MeasurementSet,
    pub trace: MetricTrace,
    pub rewards: Vec<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub unc: Unc,
    pub min_obs: u32,
    pub jsd: Option<f64>,
    pub total_reward: f64,
}

impl EpisodeLog {
    pub fn summary(&self) -> EpisodeSummary {
        EpisodeSummary {
            unc: self.trace.unc(),
            min_obs: self.trace.min_observations(),
            jsd: self.trace.mean_jsd(),
            total_reward: self.rewards.iter().sum(),
        }
    }

    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &EpisodeLog) -> bool {
        let mut a = self.clone();
        a.wall_clock_secs = other.wall_clock_secs;
        a == *other
    }
}

pub struct Mission {
    config: MissionConfig,
    seed: u64,
    tracks: Vec<TargetTrack>,
    radius: f64,
    cadence: SenseCadence,
    agent: Point,
    beliefs: Vec<Option<TargetBelief>>,
    measurements: MeasurementSet,
    detections: Vec<u32>,
    trace: MetricTrace,
    grid: EvalGrid,
    path: Vec<Waypoint>,
    nodes: Vec<usize>,
    rewards: Vec<f64>,
    last_sigma: Vec<f64>,
    started: Instant,
}

impl Mission {
    pub fn new(env: &EnvConfig, tracks: Vec<TargetTrack>, start: Point, config: MissionConfig) -> Result<Self, Error> {
        env.validate()?;
        config.kernel.validate()?;
        if !(config.horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {}", config.horizon)));
        }
        if tracks.len() != env.num_targets {
            return Err(Error::Config(format!(
                "{} tracks for {} targets",
                tracks.len(),
                env.num_targets
            )));
        }
        let n = tracks.len();
        let beliefs = match config.prior {
            PriorMode::Full => tracks
                .iter()
                .map(|track| {
                    let mut b = TargetBelief::new(config.kernel);
                    b.add(TimestampedLocation::at(track.position(), 0.0), 1.0)?;
                    Ok(Some(b))
                })
                .collect::<Result<Vec<_>, Error>>()?,
            PriorMode::CountOnly => vec![Some(TargetBelief::new(config.kernel)); n],
            PriorMode::None => vec![None; n],
        };
        let grid = EvalGrid::new(config.metrics.grid_side);
        let mut mission = Self {
            seed: env.seed,
            radius: env.sensor_radius,
            cadence: SenseCadence::new(env.measurement_spacing),
            agent: start,
            beliefs,
            measurements: MeasurementSet::new(n),
            detections: vec![0; n],
            trace: MetricTrace::default(),
            grid,
            path: vec![Waypoint {
                position: start,
                time: 0.0,
            }],
            nodes: Vec::new(),
            rewards: Vec::new(),
            last_sigma: Vec::new(),
            started: Instant::now(),
            tracks,
            config,
        };
        mission.last_sigma = mission.sigma_bar_now();
        Ok(mission)
    }

    pub fn config(&self) -> &MissionConfig {
        &self.config
    }

    pub fn time(&self) -> f64 {
        self.cadence.travelled()
    }

    pub fn agent(&self) -> Point {
        self.agent
    }

    pub fn num_targets(&self) -> usize {
        self.tracks.len()
    }

    pub fn sensor_radius(&self) -> f64 {
        self.radius
    }

    pub fn done(&self) -> bool {
        self.time() >= self.config.horizon - 1e-9
    }

    /// Belief per target slot; `None` for targets not yet discovered.
    pub fn beliefs(&self) -> &[Option<TargetBelief>] {
        &self.beliefs
    }

    pub fn known_targets(&self) -> Vec<usize> {
        (0..self.beliefs.len()).filter(|&i| self.beliefs[i].is_some()).collect()
    }

    pub fn measurements(&self) -> &MeasurementSet {
        &self.measurements
    }

    pub fn detections(&self) -> &[u32] {
        &self.detections
    }

    pub fn trace(&self) -> &MetricTrace {
        &self.trace
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Ground-truth positions. Only for metrics and tests; planners must not read them.
    pub fn true_positions(&self) -> Vec<Point> {
        self.tracks.iter().map(TargetTrack::position).collect()
    }

    /// Moves straight toward `dest`, stopping early at the horizon. Returns
    /// the sense events fired on the way.
    pub fn travel_to(&mut self, dest: Point) -> Result<Vec<SenseEvent>, Error> {
        let remaining = self.config.horizon - self.time();
        if remaining <= 1e-9 {
            return Ok(Vec::new());
        }
        let length = self.agent.dist(dest);
        let dest = if length > remaining {
            self.agent.lerp(dest, remaining / length)
        } else {
            dest
        };
        let events = step_along_edge(self.agent, dest, &mut self.cadence, &mut self.tracks, self.radius);
        self.agent = dest;
        for ev in &events {
            self.process(ev)?;
        }
        self.path.push(Waypoint {
            position: dest,
            time: self.time(),
        });
        Ok(events)
    }

    /// Records a roadmap node visit.
    pub fn record_node(&mut self, node: usize) {
        self.nodes.push(node);
    }

    /// Reward for the uncertainty drop since the previous call, logged.
    pub fn arrival_reward(&mut self) -> f64 {
        let now = self.sigma_bar_now();
        let r = crate::metrics::reward(&self.last_sigma, &now);
        self.last_sigma = now;
        self.rewards.push(r);
        r
    }

    /// σ̄ per target at the current time and true positions.
    pub fn sigma_bar_now(&self) -> Vec<f64> {
        self.sigma_bar_at(&self.true_positions(), self.time())
    }

    fn sigma_bar_at(&self, truth: &[Point], t: f64) -> Vec<f64> {
        self.beliefs
            .iter()
            .zip(truth)
            .map(|(b, y)| target_area_uncertainty(b.as_ref(), *y, t, &self.grid, self.config.metrics.area_radius))
            .collect()
    }

    fn process(&mut self, ev: &SenseEvent) -> Result<(), Error> {
        for m in &ev.measurements {
            if m.detected {
                self.detections[m.target] += 1;
            }
            self.measurements.push(*m);
            let slot = &mut self.beliefs[m.target];
            if slot.is_none() && m.detected {
                *slot = Some(TargetBelief::new(self.config.kernel));
            }
            if let Some(b) = slot {
                b.update([(m.location, m.value())], ev.time)?;
            }
        }
        if !self.config.record_metrics {
            return Ok(());
        }
        let sigma = self.sigma_bar_at(&ev.target_positions, ev.time);
        let jsd = self.config.metrics.compute_jsd.then(|| {
            let queries = self.grid.at_time(ev.time);
            self.beliefs
                .iter()
                .zip(&ev.target_positions)
                .map(|(b, y)| {
                    let mean = match b {
                        Some(b) => b.mean_at(&queries),
                        None => vec![0.0; queries.len()],
                    };
                    belief_jsd(&mean, &self.grid, *y)
                })
                .collect()
        });
        self.trace.push(ev.time, sigma, self.detections.clone(), jsd);
        Ok(())
    }

    pub fn into_log(self, planner: &str) -> EpisodeLog {
        EpisodeLog {
            seed: self.seed,
            planner: planner.to_string(),
            nodes: self.nodes,
            path: self.path,
            measurements: self.measurements,
            trace: self.trace,
            rewards: self.rewards,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parked(prior: PriorMode) -> Mission {
        let env = EnvConfig::new(1, 0.0, 1);
        let track = TargetTrack::new(vec![Point::new(0.5, 0.5), Point::new(0.6, 0.5)], 0.0, 0.0);
        Mission::new(&env, vec![track], Point::new(0.5, 0.5), MissionConfig { prior, ..Default::default() }).unwrap()
    }

    #[test]
    fn full_prior_starts_confident() {
        let m = parked(PriorMode::Full);
        assert!(m.sigma_bar_now()[0] < 0.7);
        assert_eq!(parked(PriorMode::CountOnly).sigma_bar_now(), vec![1.0]);
        assert!(parked(PriorMode::None).beliefs()[0].is_none());
    }

    #[test]
    fn horizon_truncates_travel() {
        let env = EnvConfig::new(1, 0.1, 2);
        let track = TargetTrack::new(vec![Point::new(0.9, 0.9), Point::new(0.8, 0.9)], 0.0, 0.1);
        let config = MissionConfig {
            horizon: 0.35,
            ..Default::default()
        };
        let mut m = Mission::new(&env, vec![track], Point::new(0.0, 0.0), config).unwrap();
        let events = m.travel_to(Point::new(1.0, 0.0)).unwrap();
        assert_eq!(events.len(), 3);
        assert!(m.done());
        assert!((m.agent().x - 0.35).abs() < 1e-12);
        assert!(m.travel_to(Point::new(0.0, 0.0)).unwrap().is_empty());
        assert_eq!(m.trace().len(), 3);
    }

    #[test]
    fn no_prior_discovers_on_sighting() {
        let env = EnvConfig::new(1, 0.0, 3);
        let track = TargetTrack::new(vec![Point::new(0.5, 0.5), Point::new(0.6, 0.5)], 0.0, 0.0);
        let config = MissionConfig {
            prior: PriorMode::None,
            ..Default::default()
        };
        let mut m = Mission::new(&env, vec![track], Point::new(0.1, 0.5), config).unwrap();
        m.travel_to(Point::new(0.25, 0.5)).unwrap();
        assert!(m.known_targets().is_empty());
        assert_eq!(m.trace().sigma_bar[0], vec![1.0]);
        m.travel_to(Point::new(0.5, 0.5)).unwrap();
        assert_eq!(m.known_targets(), vec![0]);
        // Only the detection made it into the belief.
        assert!(m.beliefs()[0].as_ref().unwrap().active().all(|(_, z)| z == 1.0));
    }
}
