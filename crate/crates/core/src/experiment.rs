//! Batch evaluation of planners over seeded scenarios.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::run_policy;
use crate::baselines::{lawnmower_start, run_lawnmower, run_random, run_tsp_loop};
use crate::belief::KernelParams;
use crate::env::{EnvConfig, Scenario};
use crate::geom::Point;
use crate::metrics::MetricsConfig;
use crate::mission::{EpisodeLog, EpisodeSummary, Mission, MissionConfig, PriorMode};
use crate::observation::{GraphContext, ObservationConfig};
use crate::policy::{ActionMode, PolicyNet};
use crate::roadmap::{build_roadmap_seeded, Roadmap};
use crate::rng::{stream_rng, Stream};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Planner {
    Policy,
    Lawnmower,
    TspLoop,
    Random,
}

impl Planner {
    pub const ALL: [Planner; 4] = [Planner::Policy, Planner::Lawnmower, Planner::TspLoop, Planner::Random];

    pub fn name(self) -> &'static str {
        match self {
            Planner::Policy => "policy",
            Planner::Lawnmower => "lawnmower",
            Planner::TspLoop => "tsp_loop",
            Planner::Random => "random",
        }
    }
}

fn default_planners() -> Vec<Planner> {
    Planner::ALL.to_vec()
}
fn default_nodes() -> usize {
    200
}
fn default_k() -> usize {
    10
}
fn default_horizon() -> f64 {
    30.0
}
fn default_instances() -> usize {
    20
}
fn default_workers() -> usize {
    1
}
fn default_step() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

/// Evaluation configuration (JSON).
///
/// ```json
/// {
///   "planners": ["policy", "lawnmower", "tsp_loop", "random"],
///   "num_targets": 2,
///   "speed_ratio": 0.0333,
///   "nodes": 200, "roadmap_k": 10,
///   "horizon": 30.0,
///   "prior": "full",
///   "instances": 20, "seed": 0,
///   "workers": 1,
///   "checkpoint": null,
///   "observation": { "history": 50, "pool": 5, "future": true },
///   "metrics": { "grid_side": 30, "area_radius": 0.1, "compute_jsd": true },
///   "tsp_step": 0.1,
///   "write_episodes": true
/// }
/// ```
///
/// Instance `i` uses scenario seed `seed + i`. Graph planners start at the
/// roadmap node closest to the centre, the TSP loop at that node's
/// position and the lawnmower at its first lane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_planners")]
    pub planners: Vec<Planner>,
    pub num_targets: usize,
    pub speed_ratio: f64,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_k")]
    pub roadmap_k: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub prior: PriorMode,
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub kernel: KernelParams,
    #[serde(default)]
    pub observation: ObservationConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    /// Longest straight move of the TSP loop between replans.
    #[serde(default = "default_step")]
    pub tsp_step: f64,
    /// Write one metric trace per episode under `episodes/`.
    #[serde(default = "default_true")]
    pub write_episodes: bool,
}

impl ExperimentConfig {
    pub fn new(num_targets: usize, speed_ratio: f64) -> Self {
        serde_json::from_value(serde_json::json!({ "num_targets": num_targets, "speed_ratio": speed_ratio }))
            .expect("all other fields have defaults")
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.planners.is_empty() || self.instances == 0 {
            return Err(Error::Config("need at least one planner and one instance".into()));
        }
        if self.planners.contains(&Planner::TspLoop) && self.prior != PriorMode::Full {
            return Err(Error::Config("the TSP loop needs initial target positions (prior = full)".into()));
        }
        if !(self.tsp_step > 0.0) {
            return Err(Error::Config("tsp_step must be positive".into()));
        }
        self.observation.validate()?;
        self.kernel.validate()?;
        self.env(self.seed).validate()
    }

    pub fn env(&self, seed: u64) -> EnvConfig {
        EnvConfig::new(self.num_targets, self.speed_ratio, seed)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.instances as u64).map(|i| self.seed + i).collect()
    }

    fn mission_config(&self) -> MissionConfig {
        MissionConfig {
            horizon: self.horizon,
            kernel: self.kernel,
            prior: self.prior,
            metrics: self.metrics.clone(),
            record_metrics: true,
        }
    }
}

/// Start node for graph planners.
pub fn eval_start(roadmap: &Roadmap) -> usize {
    roadmap.nearest_node(Point::new(0.5, 0.5))
}

/// Runs one planner on the scenario with seed `seed`.
pub fn run_episode(
    config: &ExperimentConfig,
    planner: Planner,
    seed: u64,
    policy: Option<&PolicyNet>,
) -> Result<EpisodeLog, Error> {
    let scenario = Scenario::generate(config.env(seed), config.nodes, config.roadmap_k)?;
    let tracks = scenario.build_tracks()?;
    let roadmap = build_roadmap_seeded(config.nodes, config.roadmap_k, seed)?;
    let start = eval_start(&roadmap);
    let start_point = match planner {
        Planner::Lawnmower => lawnmower_start(scenario.env.sensor_radius),
        _ => roadmap.node(start),
    };
    let initial: Vec<Point> = tracks.iter().map(|t| t.position()).collect();
    let mut mission = Mission::new(&scenario.env, tracks, start_point, config.mission_config())?;
    let mut rng = stream_rng(seed, Stream::Planner);
    match planner {
        Planner::Lawnmower => run_lawnmower(&mut mission)?,
        Planner::TspLoop => run_tsp_loop(&mut mission, &initial, config.speed_ratio, config.tsp_step)?,
        Planner::Random => run_random(&mut mission, &roadmap, start, None, &mut rng)?,
        Planner::Policy => {
            let policy = policy.ok_or_else(|| Error::Config("the policy planner needs a checkpoint".into()))?;
            let context = GraphContext::new(&roadmap, config.observation.spectral_dim);
            run_policy(
                &mut mission,
                &roadmap,
                &context,
                start,
                policy,
                &config.observation,
                ActionMode::Greedy,
                None,
                &mut rng,
            )?;
        }
    }
    Ok(mission.into_log(planner.name()))
}

/// Aggregate over the instances of one planner.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlannerSummary {
    pub planner: Planner,
    pub episodes: usize,
    pub unc_mean: f64,
    pub unc_between_target_std: f64,
    /// Standard deviation of the episode means.
    pub unc_episode_std: f64,
    pub min_obs_mean: f64,
    pub min_obs_min: u32,
    pub jsd_mean: Option<f64>,
    pub reward_mean: f64,
    pub wall_clock_secs_mean: f64,
}

/// One line of `table.csv`.
#[derive(Clone, Debug, Serialize)]
pub struct EpisodeRow {
    pub planner: String,
    pub seed: u64,
    pub unc_mean: f64,
    pub unc_between_target_std: f64,
    pub min_obs: u32,
    pub jsd: Option<f64>,
    pub reward: f64,
    pub wall_clock_secs: f64,
}

impl EpisodeRow {
    pub fn new(log: &EpisodeLog) -> Self {
        let s = log.summary();
        Self {
            planner: log.planner.clone(),
            seed: log.seed,
            unc_mean: s.unc.mean,
            unc_between_target_std: s.unc.between_target_std,
            min_obs: s.min_obs,
            jsd: s.jsd,
            reward: s.total_reward,
            wall_clock_secs: log.wall_clock_secs,
        }
    }
}

pub struct ExperimentResult {
    pub logs: Vec<EpisodeLog>,
    pub summaries: Vec<PlannerSummary>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn summarize(planner: Planner, logs: &[&EpisodeLog]) -> PlannerSummary {
    let sums: Vec<EpisodeSummary> = logs.iter().map(|l| l.summary()).collect();
    let unc_mean = mean(sums.iter().map(|s| s.unc.mean));
    let var = mean(sums.iter().map(|s| (s.unc.mean - unc_mean).powi(2)));
    let jsd: Vec<f64> = sums.iter().filter_map(|s| s.jsd).collect();
    PlannerSummary {
        planner,
        episodes: logs.len(),
        unc_mean,
        unc_between_target_std: mean(sums.iter().map(|s| s.unc.between_target_std)),
        unc_episode_std: var.sqrt(),
        min_obs_mean: mean(sums.iter().map(|s| s.min_obs as f64)),
        min_obs_min: sums.iter().map(|s| s.min_obs).min().unwrap_or(0),
        jsd_mean: (!jsd.is_empty()).then(|| mean(jsd.iter().copied())),
        reward_mean: mean(sums.iter().map(|s| s.total_reward)),
        wall_clock_secs_mean: mean(logs.iter().map(|l| l.wall_clock_secs)),
    }
}

/// Runs every planner on every instance. Results come back in
/// planner-then-seed order regardless of the worker count.
pub fn run_experiment(config: &ExperimentConfig, policy: Option<&PolicyNet>) -> Result<ExperimentResult, Error> {
    config.validate()?;
    let jobs: Vec<(Planner, u64)> = config
        .planners
        .iter()
        .flat_map(|&p| config.seeds().into_iter().map(move |s| (p, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let logs = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, s)| run_episode(config, p, s, policy))
            .collect::<Result<Vec<_>, Error>>()
    })?;
    let summaries = config
        .planners
        .iter()
        .map(|&p| {
            let mine: Vec<&EpisodeLog> = logs.iter().filter(|l| l.planner == p.name()).collect();
            summarize(p, &mine)
        })
        .collect();
    Ok(ExperimentResult { logs, summaries })
}

/// Writes `summary.json`, `table.csv` and, if enabled, `episodes/<planner>_<seed>.csv`.
pub fn write_results(config: &ExperimentConfig, result: &ExperimentResult, out: &Path) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    let summary = serde_json::json!({ "config": config, "planners": result.summaries });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let mut table = csv::Writer::from_path(out.join("table.csv"))?;
    for log in &result.logs {
        table.serialize(EpisodeRow::new(log))?;
    }
    table.flush()?;
    if config.write_episodes {
        let dir = out.join("episodes");
        fs::create_dir_all(&dir)?;
        for log in &result.logs {
            let f = fs::File::create(dir.join(format!("{}_{}.csv", log.planner, log.seed)))?;
            log.trace.write_csv(f)?;
        }
    }
    Ok(())
}
