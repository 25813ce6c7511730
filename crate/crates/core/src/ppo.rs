//! PPO training of the attention policy with randomized scenarios.
//!
//! Rollouts keep one belief snapshot per decision step; observations are
//! rebuilt from them during the update. Each sample gets its own tape and
//! the per-sample gradients are summed in sample order, so the result does
//! not depend on the worker count.

use std::fs;
use std::path::{Path, PathBuf};

use permon_nn::{Adam, Gradients, Tape};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{run_policy, start_node, PolicyRollout};
use crate::baselines::run_random;
use crate::belief::KernelParams;
use crate::env::{generate_tracks, EnvConfig};
use crate::mission::{Mission, MissionConfig, PriorMode};
use crate::observation::{GraphContext, Observation, ObservationConfig};
use crate::policy::{ActionMode, PolicyConfig, PolicyNet};
use crate::roadmap::{build_roadmap_seeded, Roadmap};
use crate::rng::{stream_rng, Stream};
use crate::Error;

fn default_gamma() -> f64 {
    0.99
}
fn default_clip() -> f64 {
    0.2
}
fn default_value_coef() -> f64 {
    0.5
}
fn default_cap() -> usize {
    256
}
fn default_episodes() -> usize {
    1000
}
fn default_batch_episodes() -> usize {
    8
}
fn default_epochs() -> usize {
    4
}
fn default_minibatch() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-4
}
fn default_lr_decay() -> f64 {
    0.96
}
fn default_lr_decay_every() -> usize {
    64
}
fn default_curriculum() -> usize {
    10_000
}
fn default_max_speed() -> f64 {
    0.1
}
fn default_nodes() -> [usize; 2] {
    [100, 200]
}
fn default_history() -> [usize; 2] {
    [50, 100]
}
fn default_targets() -> [usize; 2] {
    [2, 5]
}
fn default_k() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_workers() -> usize {
    1
}

/// Training configuration (JSON).
///
/// ```json
/// {
///   "seed": 0,
///   "episodes": 1000,
///   "batch_episodes": 8,
///   "epochs": 4,
///   "minibatch": 256,
///   "lr": 1e-4, "lr_decay": 0.96, "lr_decay_every": 64,
///   "gamma": 0.99, "clip_eps": 0.2, "value_coef": 0.5,
///   "normalize_advantages": true,
///   "track_epoch_losses": false,
///   "episode_cap": 256,
///   "curriculum_episodes": 10000, "max_speed_ratio": 0.1,
///   "speed_ratio": null,
///   "nodes": [100, 200], "history": [50, 100], "targets": [2, 5],
///   "roadmap_k": 10,
///   "workers": 1,
///   "checkpoint_every": null,
///   "policy": { "dim": 128, "heads": 4 },
///   "observation": { "pool": 5, "future": true }
/// }
/// ```
///
/// Ranges are inclusive. `speed_ratio` pins the target speed and disables
/// the curriculum. `observation.history` is overwritten per batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Episodes collected per update.
    #[serde(default = "default_batch_episodes")]
    pub batch_episodes: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Samples per gradient step.
    #[serde(default = "default_minibatch")]
    pub minibatch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_lr_decay_every")]
    pub lr_decay_every: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_clip")]
    pub clip_eps: f64,
    #[serde(default = "default_value_coef")]
    pub value_coef: f64,
    #[serde(default = "default_true")]
    pub normalize_advantages: bool,
    /// Re-evaluate the whole batch loss before and after every epoch.
    #[serde(default)]
    pub track_epoch_losses: bool,
    #[serde(default = "default_cap")]
    pub episode_cap: usize,
    #[serde(default = "default_curriculum")]
    pub curriculum_episodes: usize,
    #[serde(default = "default_max_speed")]
    pub max_speed_ratio: f64,
    #[serde(default)]
    pub speed_ratio: Option<f64>,
    #[serde(default = "default_nodes")]
    pub nodes: [usize; 2],
    #[serde(default = "default_history")]
    pub history: [usize; 2],
    #[serde(default = "default_targets")]
    pub targets: [usize; 2],
    #[serde(default = "default_k")]
    pub roadmap_k: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub kernel: KernelParams,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub observation: ObservationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        for (name, r) in [("nodes", self.nodes), ("history", self.history), ("targets", self.targets)] {
            if r[0] > r[1] || r[0] == 0 {
                return Err(Error::Config(format!("{name} range must satisfy 1 <= min <= max")));
            }
        }
        if self.batch_episodes == 0 || self.epochs == 0 || self.minibatch == 0 || self.episode_cap == 0 {
            return bad("batch_episodes, epochs, minibatch and episode_cap must be >= 1");
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.gamma) || !(self.clip_eps > 0.0) {
            return bad("need lr > 0, gamma in [0, 1], clip_eps > 0");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be >= 1");
        }
        if self.policy.features_per_target != self.observation.features_per_target()
            || self.policy.spectral_dim != self.observation.spectral_dim
        {
            return bad("policy and observation feature sizes disagree");
        }
        self.observation.validate()?;
        self.kernel.validate()
    }

    /// Step-decayed learning rate after `episodes_done` episodes.
    pub fn learning_rate(&self, episodes_done: usize) -> f64 {
        self.lr * self.lr_decay.powi((episodes_done / self.lr_decay_every) as i32)
    }

    /// Upper bound of the sampled target speed ratio.
    pub fn speed_cap(&self, episodes_done: usize) -> f64 {
        if let Some(v) = self.speed_ratio {
            return v;
        }
        let ramp = if self.curriculum_episodes == 0 {
            1.0
        } else {
            (episodes_done as f64 / self.curriculum_episodes as f64).min(1.0)
        };
        self.max_speed_ratio * ramp
    }
}

/// Discounted returns, restarting at the end of the list.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

/// Rescales to zero mean and unit variance. Constant inputs map to zero.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in values.iter_mut() {
        *v = if sd > 1e-12 { (*v - mean) / sd } else { 0.0 };
    }
}

/// Scenario sizes drawn for one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BatchSetting {
    pub nodes: usize,
    pub history: usize,
    pub targets: usize,
    pub speed_ratio: f64,
}

impl BatchSetting {
    pub fn sample<R: Rng + ?Sized>(config: &TrainConfig, episodes_done: usize, rng: &mut R) -> Self {
        let cap = config.speed_cap(episodes_done);
        Self {
            nodes: rng.gen_range(config.nodes[0]..=config.nodes[1]),
            history: rng.gen_range(config.history[0]..=config.history[1]),
            targets: rng.gen_range(config.targets[0]..=config.targets[1]),
            speed_ratio: if config.speed_ratio.is_some() || cap == 0.0 {
                cap
            } else {
                rng.gen_range(0.0..cap)
            },
        }
    }
}

/// One finished training episode with what is needed to replay its observations.
pub struct Episode {
    pub seed: u64,
    pub roadmap: Roadmap,
    pub context: GraphContext,
    pub observation: ObservationConfig,
    pub rollout: PolicyRollout,
}

impl Episode {
    pub fn observation(&self, step: usize, kernel: &KernelParams) -> Observation {
        self.rollout
            .observation(step, &self.roadmap, &self.context, &self.observation, kernel)
    }
}

/// Roadmap and mission of one training scenario, before any move.
pub struct EpisodeSetup {
    pub roadmap: Roadmap,
    pub context: GraphContext,
    pub observation: ObservationConfig,
    pub start: usize,
    pub mission: Mission,
}

/// Builds the scenario for `seed`: full prior, no time horizon.
pub fn setup_episode(setting: &BatchSetting, seed: u64, config: &TrainConfig) -> Result<EpisodeSetup, Error> {
    let env = EnvConfig::new(setting.targets, setting.speed_ratio, seed);
    let tracks = generate_tracks(&env, &mut stream_rng(seed, Stream::Tracks));
    let roadmap = build_roadmap_seeded(setting.nodes, config.roadmap_k, seed)?;
    let context = GraphContext::new(&roadmap, config.observation.spectral_dim);
    let observation = ObservationConfig {
        history: setting.history,
        ..config.observation.clone()
    };
    let start = start_node(&roadmap, seed);
    let mission_config = MissionConfig {
        horizon: f64::INFINITY,
        kernel: config.kernel,
        prior: PriorMode::Full,
        record_metrics: false,
        ..Default::default()
    };
    let mission = Mission::new(&env, tracks, roadmap.node(start), mission_config)?;
    Ok(EpisodeSetup {
        roadmap,
        context,
        observation,
        start,
        mission,
    })
}

/// Runs the policy on the scenario for `seed`, for at most `episode_cap` decisions.
pub fn rollout_episode(
    policy: &PolicyNet,
    setting: &BatchSetting,
    seed: u64,
    config: &TrainConfig,
    mode: ActionMode,
) -> Result<Episode, Error> {
    let EpisodeSetup {
        roadmap,
        context,
        observation,
        start,
        mut mission,
    } = setup_episode(setting, seed, config)?;
    let mut rng = stream_rng(seed, Stream::Planner);
    let rollout = run_policy(
        &mut mission,
        &roadmap,
        &context,
        start,
        policy,
        &observation,
        mode,
        Some(config.episode_cap),
        &mut rng,
    )?;
    Ok(Episode {
        seed,
        roadmap,
        context,
        observation,
        rollout,
    })
}

/// Episodic reward of the uniform random walk on the same scenario.
pub fn random_episode_reward(setting: &BatchSetting, seed: u64, config: &TrainConfig) -> Result<f64, Error> {
    let mut e = setup_episode(setting, seed, config)?;
    let mut rng = stream_rng(seed, Stream::Planner);
    run_random(&mut e.mission, &e.roadmap, e.start, Some(config.episode_cap), &mut rng)?;
    Ok(e.mission.rewards().iter().sum())
}

/// A single decision step prepared for the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub episode: usize,
    pub step: usize,
    pub action: usize,
    pub old_log_prob: f64,
    pub ret: f64,
    pub advantage: f64,
}

/// Flattens a batch into samples with returns and advantages.
pub fn prepare_samples(episodes: &[Episode], gamma: f64, normalize_advantages: bool) -> Vec<Sample> {
    let mut samples = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        let rewards: Vec<f64> = ep.rollout.steps.iter().map(|s| s.reward).collect();
        let returns = discounted_returns(&rewards, gamma);
        for (i, (s, g)) in ep.rollout.steps.iter().zip(returns).enumerate() {
            samples.push(Sample {
                episode: e,
                step: i,
                action: s.action,
                old_log_prob: s.log_prob,
                ret: g,
                advantage: g - s.value,
            });
        }
    }
    if normalize_advantages {
        let mut adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
        normalize(&mut adv);
        for (s, a) in samples.iter_mut().zip(adv) {
            s.advantage = a;
        }
    }
    samples
}

/// Loss terms of one sample or averaged over several.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
}

/// Negated clipped surrogate plus `value_coef * (V - R)^2`, with gradients
/// added into `grads` when given.
pub fn sample_loss(
    policy: &PolicyNet,
    obs: &Observation,
    sample: &Sample,
    clip_eps: f64,
    value_coef: f64,
    grads: Option<&mut Gradients>,
) -> Result<LossTerms, Error> {
    let mut tape = Tape::new(policy.params());
    let fp = policy.forward(&mut tape, obs)?;
    let logp = tape.pick(fp.log_probs, 0, sample.action);
    let surrogate = tape.ppo_clip(logp, sample.old_log_prob, sample.advantage, clip_eps);
    let target = tape.constant(permon_nn::Tensor::scalar(sample.ret));
    let err = tape.sub(fp.value, target);
    let sq = tape.square(err);
    let value = tape.scale(sq, value_coef);
    let total = tape.add(surrogate, value);
    if let Some(g) = grads {
        tape.backward(total, g);
    }
    Ok(LossTerms {
        total: tape.value(total).item(),
        policy: tape.value(surrogate).item(),
        value: tape.value(value).item(),
    })
}

/// Mean loss over `samples` and, optionally, the matching mean gradient.
pub fn batch_loss(
    policy: &PolicyNet,
    episodes: &[Episode],
    samples: &[Sample],
    config: &TrainConfig,
    with_grads: bool,
) -> Result<(LossTerms, Option<Gradients>), Error> {
    let results: Vec<Result<(LossTerms, Option<Gradients>), Error>> = samples
        .par_iter()
        .map(|s| {
            let obs = episodes[s.episode].observation(s.step, &config.kernel);
            let mut g = with_grads.then(|| policy.params().zero_grads());
            let terms = sample_loss(policy, &obs, s, config.clip_eps, config.value_coef, g.as_mut())?;
            Ok((terms, g))
        })
        .collect();
    let mut sum = LossTerms::default();
    let mut grads = with_grads.then(|| policy.params().zero_grads());
    for r in results {
        let (t, g) = r?;
        sum.total += t.total;
        sum.policy += t.policy;
        sum.value += t.value;
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.accumulate(&g);
        }
    }
    let inv = 1.0 / samples.len().max(1) as f64;
    sum.total *= inv;
    sum.policy *= inv;
    sum.value *= inv;
    if let Some(g) = grads.as_mut() {
        g.scale(inv);
    }
    Ok((sum, grads))
}

/// Statistics of one update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpdateStats {
    pub update: usize,
    pub episodes_done: usize,
    pub mean_reward: f64,
    pub samples: usize,
    pub lr: f64,
    pub speed_cap: f64,
    pub nodes: usize,
    pub history: usize,
    pub targets: usize,
    /// Mean minibatch loss of the last epoch.
    pub loss: LossTerms,
    /// Loss on the frozen batch before the first epoch and after each
    /// epoch; empty unless tracking is on.
    pub epoch_losses: Vec<LossTerms>,
}

/// Owns the policy and optimizer state across updates.
pub struct Trainer {
    pub config: TrainConfig,
    pub policy: PolicyNet,
    adam: Adam,
    rng: rand_chacha::ChaCha8Rng,
    episodes_done: usize,
    updates: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, Error> {
        config.validate()?;
        let policy = PolicyNet::new(config.policy.clone(), config.seed)?;
        let adam = Adam::new(policy.params());
        let rng = stream_rng(config.seed, Stream::Training);
        Ok(Self {
            config,
            policy,
            adam,
            rng,
            episodes_done: 0,
            updates: 0,
        })
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }

    /// Collects one batch of episodes with the current policy.
    pub fn collect(&mut self) -> Result<(BatchSetting, Vec<Episode>), Error> {
        let setting = BatchSetting::sample(&self.config, self.episodes_done, &mut self.rng);
        let count = self
            .config
            .batch_episodes
            .min(self.config.episodes.saturating_sub(self.episodes_done))
            .max(1);
        let seeds: Vec<u64> = (0..count).map(|_| self.rng.gen()).collect();
        let policy = &self.policy;
        let config = &self.config;
        let episodes = seeds
            .par_iter()
            .map(|&s| rollout_episode(policy, &setting, s, config, ActionMode::Sample))
            .collect::<Result<Vec<_>, Error>>()?;
        Ok((setting, episodes))
    }

    /// Runs the epochs of one PPO update on a collected batch.
    pub fn update(&mut self, setting: &BatchSetting, episodes: &[Episode]) -> Result<UpdateStats, Error> {
        let samples = prepare_samples(episodes, self.config.gamma, self.config.normalize_advantages);
        let lr = self.config.learning_rate(self.episodes_done);
        let track = self.config.track_epoch_losses;
        let mut epoch_losses = Vec::new();
        if track {
            epoch_losses.push(batch_loss(&self.policy, episodes, &samples, &self.config, false)?.0);
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut loss = LossTerms::default();
        for _ in 0..self.config.epochs {
            order.shuffle(&mut self.rng);
            loss = LossTerms::default();
            for chunk in order.chunks(self.config.minibatch) {
                let mb: Vec<Sample> = chunk.iter().map(|&i| samples[i]).collect();
                let (terms, grads) = batch_loss(&self.policy, episodes, &mb, &self.config, true)?;
                let grads = grads.expect("requested");
                if !terms.total.is_finite() || !grads.all_finite() {
                    return Err(Error::NonFiniteLoss {
                        update: self.updates,
                        detail: format!("loss {:?}", terms),
                    });
                }
                self.adam.step(self.policy.params_mut(), &grads, lr);
                let w = mb.len() as f64 / samples.len() as f64;
                loss.total += w * terms.total;
                loss.policy += w * terms.policy;
                loss.value += w * terms.value;
            }
            if track {
                epoch_losses.push(batch_loss(&self.policy, episodes, &samples, &self.config, false)?.0);
            }
        }
        let mean_reward = episodes.iter().map(|e| e.rollout.total_reward()).sum::<f64>() / episodes.len() as f64;
        let stats = UpdateStats {
            update: self.updates,
            episodes_done: self.episodes_done + episodes.len(),
            mean_reward,
            samples: samples.len(),
            lr,
            speed_cap: self.config.speed_cap(self.episodes_done),
            nodes: setting.nodes,
            history: setting.history,
            targets: setting.targets,
            loss,
            epoch_losses,
        };
        self.episodes_done += episodes.len();
        self.updates += 1;
        Ok(stats)
    }

    /// One collect-and-update round.
    pub fn step(&mut self) -> Result<UpdateStats, Error> {
        let (setting, episodes) = self.collect()?;
        self.update(&setting, &episodes)
    }

    pub fn finished(&self) -> bool {
        self.episodes_done >= self.config.episodes
    }
}

#[derive(Serialize)]
struct CurveRow {
    update: usize,
    episodes: usize,
    mean_reward: f64,
    loss: f64,
    policy_loss: f64,
    value_loss: f64,
    lr: f64,
    speed_cap: f64,
    nodes: usize,
    history: usize,
    targets: usize,
}

/// Trains to completion, writing `curve.csv`, periodic checkpoints and
/// `policy` (the final checkpoint) under `out`.
pub fn train(config: TrainConfig, out: &Path) -> Result<(PolicyNet, Vec<UpdateStats>), Error> {
    fs::create_dir_all(out)?;
    fs::write(out.join("train_config.json"), serde_json::to_string_pretty(&config)?)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut trainer = Trainer::new(config)?;
    let mut csv = csv::Writer::from_path(out.join("curve.csv"))?;
    let mut history = Vec::new();
    let every = trainer.config.checkpoint_every.unwrap_or(0);
    let mut next_checkpoint = every;
    while !trainer.finished() {
        let stats = pool.install(|| trainer.step())?;
        let last = stats.loss;
        csv.serialize(CurveRow {
            update: stats.update,
            episodes: stats.episodes_done,
            mean_reward: stats.mean_reward,
            loss: last.total,
            policy_loss: last.policy,
            value_loss: last.value,
            lr: stats.lr,
            speed_cap: stats.speed_cap,
            nodes: stats.nodes,
            history: stats.history,
            targets: stats.targets,
        })?;
        csv.flush()?;
        if every > 0 && stats.episodes_done >= next_checkpoint {
            let path = checkpoint_path(out, stats.episodes_done);
            trainer.policy.save(&path, serde_json::json!({ "episodes": stats.episodes_done }))?;
            next_checkpoint += every;
        }
        history.push(stats);
    }
    trainer
        .policy
        .save(&out.join("policy"), serde_json::json!({ "episodes": trainer.episodes_done }))?;
    Ok((trainer.policy, history))
}

pub fn checkpoint_path(out: &Path, episodes: usize) -> PathBuf {
    out.join(format!("policy_ep{episodes:06}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_discount_returns_rewards() {
        assert_eq!(discounted_returns(&[1.0, 2.0, 3.0], 0.0), vec![1.0, 2.0, 3.0]);
        assert_eq!(discounted_returns(&[0.0; 4], 0.99), vec![0.0; 4]);
        let g = discounted_returns(&[1.0, 1.0], 0.5);
        assert_eq!(g, vec![1.5, 1.0]);
    }

    #[test]
    fn schedules() {
        let c = TrainConfig::default();
        assert!((c.learning_rate(128) - 1e-4 * 0.96 * 0.96).abs() < 1e-18);
        assert_eq!(c.learning_rate(63), 1e-4);
        assert!((c.speed_cap(5000) - 0.05).abs() < 1e-15);
        assert_eq!(c.speed_cap(20_000), 0.1);
        let pinned = TrainConfig {
            speed_ratio: Some(0.05),
            ..Default::default()
        };
        assert_eq!(pinned.speed_cap(0), 0.05);
    }

    #[test]
    fn normalize_handles_constant() {
        let mut v = vec![2.0; 3];
        normalize(&mut v);
        assert_eq!(v, vec![0.0; 3]);
        let mut v = vec![1.0, 3.0];
        normalize(&mut v);
        assert_eq!(v, vec![-1.0, 1.0]);
    }

    #[test]
    fn default_config_validates() {
        TrainConfig::default().validate().unwrap();
    }
}
