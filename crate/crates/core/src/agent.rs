//! Drives a mission with the attention policy on the roadmap.

use rand::Rng;

use crate::mission::Mission;
use crate::observation::{build_observation, snapshot, GraphContext, Observation, ObservationConfig, Snapshot};
use crate::policy::{ActionMode, PolicyNet};
use crate::roadmap::Roadmap;
use crate::rng::{stream_rng, Stream};
use crate::Error;

/// What the policy saw and did at one decision step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Index of this step's snapshot.
    pub snapshot: usize,
    pub time: f64,
    pub known: Vec<usize>,
    pub current: usize,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PolicyRollout {
    pub snapshots: Vec<Snapshot>,
    pub steps: Vec<StepRecord>,
}

impl PolicyRollout {
    /// Rebuilds the observation of step `i`.
    pub fn observation(
        &self,
        i: usize,
        roadmap: &Roadmap,
        context: &GraphContext,
        config: &ObservationConfig,
        kernel: &crate::belief::KernelParams,
    ) -> Observation {
        let s = &self.steps[i];
        build_observation(
            &self.snapshots[..=s.snapshot],
            &s.known,
            s.time,
            context,
            roadmap,
            s.current,
            config,
            kernel,
        )
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Uniformly drawn start node, fixed per scenario seed.
pub fn start_node(roadmap: &Roadmap, seed: u64) -> usize {
    stream_rng(seed, Stream::Start).gen_range(0..roadmap.num_nodes())
}

/// Runs the policy until the mission horizon or `max_steps` decisions.
#[allow(clippy::too_many_arguments)]
pub fn run_policy<R: Rng + ?Sized>(
    mission: &mut Mission,
    roadmap: &Roadmap,
    context: &GraphContext,
    start: usize,
    policy: &PolicyNet,
    config: &ObservationConfig,
    mode: ActionMode,
    max_steps: Option<usize>,
    rng: &mut R,
) -> Result<PolicyRollout, Error> {
    let kernel = mission.config().kernel;
    let mut rollout = PolicyRollout::default();
    let mut current = start;
    mission.record_node(current);
    while !mission.done() && max_steps.map_or(true, |m| rollout.steps.len() < m) {
        let t = mission.time();
        rollout
            .snapshots
            .push(snapshot(mission.beliefs(), roadmap, t, config, &kernel));
        let known = mission.known_targets();
        let obs = build_observation(
            &rollout.snapshots,
            &known,
            t,
            context,
            roadmap,
            current,
            config,
            &kernel,
        );
        let (idx, out) = policy.act(&obs, mode, rng)?;
        let next = obs.neighbors[idx];
        mission.travel_to(roadmap.node(next))?;
        mission.record_node(next);
        let reward = mission.arrival_reward();
        rollout.steps.push(StepRecord {
            snapshot: rollout.snapshots.len() - 1,
            time: t,
            known,
            current,
            action: idx,
            log_prob: out.log_probs[idx],
            value: out.value,
            reward,
        });
        current = next;
    }
    Ok(rollout)
}
