//! Persistent monitoring of mobile targets with a single agent.
//!
//! The crate holds the simulator ([`env`]), per-target GP beliefs
//! ([`belief`]), the probabilistic roadmap ([`roadmap`]), the policy
//! observation ([`observation`]), the attention policy ([`policy`]) and its
//! PPO trainer ([`ppo`]), non-learned planners ([`baselines`]), metrics
//! ([`metrics`]) and the experiment harness ([`experiment`]).

pub mod agent;
pub mod baselines;
pub mod belief;
pub mod env;
pub mod experiment;
pub mod geom;
pub mod metrics;
pub mod mission;
pub mod observation;
pub mod policy;
pub mod ppo;
pub mod roadmap;
pub mod rng;
pub mod tsp;

pub use geom::Point;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("Gram matrix of size {size} is not positive definite after jitter escalation")]
    FactorizationFailure { size: usize },
    #[error("roadmap stayed disconnected after {attempts} attempts ({nodes} nodes, k = {k})")]
    ConnectivityFailure { attempts: usize, nodes: usize, k: usize },
    #[error("current node has no neighbors")]
    EmptyNeighborSet,
    #[error("checkpoint not found: {0}")]
    CheckpointMissing(String),
    #[error("non-finite loss at update {update}: {detail}")]
    NonFiniteLoss { update: usize, detail: String },
    #[error(transparent)]
    Nn(#[from] permon_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
