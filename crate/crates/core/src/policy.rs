//! Spatio-temporal attention policy.
//!
//! Coordinates query the per-target belief features of each pooled window
//! (target encoder); the most recent window queries all windows with the
//! path-length tags added (temporal encoder); nodes then attend to each
//! other with Laplacian features added (spatial encoder). A single-head
//! pointer decoder scores the current node's neighbours and a dense head
//! reads the state value off the current node.

use std::path::Path;

use permon_nn::{checkpoint, EncoderBlock, Linear, ParamId, ParamStore, Tape, Tensor, Var};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::observation::Observation;
use crate::rng::{stream_rng, Stream};
use crate::Error;

fn default_dim() -> usize {
    128
}
fn default_heads() -> usize {
    4
}
fn default_spectral_dim() -> usize {
    8
}
fn default_features() -> usize {
    4
}
fn default_decoder_gain() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_spectral_dim")]
    pub spectral_dim: usize,
    /// Belief scalars per node and target (4 with future prediction, 2 without).
    #[serde(default = "default_features")]
    pub features_per_target: usize,
    /// Initial scale of the decoder query/key projections; small values
    /// start the policy close to uniform.
    #[serde(default = "default_decoder_gain")]
    pub decoder_gain: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            dim: default_dim(),
            heads: default_heads(),
            spectral_dim: default_spectral_dim(),
            features_per_target: default_features(),
            decoder_gain: default_decoder_gain(),
        }
    }
}

/// Greedy for evaluation, sampled for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Greedy,
    Sample,
}

pub struct PolicyNet {
    config: PolicyConfig,
    params: ParamStore,
    coord: Linear,
    target_embed: Linear,
    target_block: EncoderBlock,
    tag_embed: Linear,
    temporal_block: EncoderBlock,
    spectral_embed: Option<Linear>,
    spatial_block: EncoderBlock,
    decoder_proj: Linear,
    decoder_q: ParamId,
    decoder_k: ParamId,
    value_head: Linear,
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass {
    /// `1 x k` log-probabilities over the neighbours.
    pub log_probs: Var,
    /// `1 x 1` state value.
    pub value: Var,
    /// Target-encoder attention per window (`None` when masked).
    pub target_scores: Vec<Option<Var>>,
    pub temporal_scores: Var,
    pub spatial_scores: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub action_probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub value: f64,
}

/// Raw attention weights of one decision, for offline inspection.
///
/// Layouts: `target[w]` is `[node][head][target]`, `temporal` is
/// `[node][head][window]`, `spatial` is `[head][query node][key node]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub current: usize,
    pub neighbors: Vec<usize>,
    pub heads: usize,
    pub target: Vec<Option<Vec<f64>>>,
    pub temporal: Vec<f64>,
    pub spatial: Vec<f64>,
    pub decoder: Vec<f64>,
}

impl PolicyNet {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self, Error> {
        let mut rng = stream_rng(seed, Stream::Network);
        let mut p = ParamStore::new();
        let d = config.dim;
        let heads = config.heads;
        let coord = Linear::new(&mut p, "coord", 2, d, &mut rng);
        let target_embed = Linear::new(&mut p, "target.embed", config.features_per_target, d, &mut rng);
        let target_block = EncoderBlock::new(&mut p, "target", d, heads, &mut rng)?;
        let tag_embed = Linear::new(&mut p, "temporal.tag", 1, d, &mut rng);
        let temporal_block = EncoderBlock::new(&mut p, "temporal", d, heads, &mut rng)?;
        let spectral_embed =
            (config.spectral_dim > 0).then(|| Linear::new(&mut p, "spatial.pe", config.spectral_dim, d, &mut rng));
        let spatial_block = EncoderBlock::new(&mut p, "spatial", d, heads, &mut rng)?;
        let decoder_proj = Linear::new(&mut p, "decoder.proj", d + 1, d, &mut rng);
        let decoder_q = p.add_uniform("decoder.w_q", d, d, config.decoder_gain, &mut rng);
        let decoder_k = p.add_uniform("decoder.w_k", d, d, config.decoder_gain, &mut rng);
        let value_head = Linear::new(&mut p, "value", d, 1, &mut rng);
        Ok(Self {
            config,
            params: p,
            coord,
            target_embed,
            target_block,
            tag_embed,
            temporal_block,
            spectral_embed,
            spatial_block,
            decoder_proj,
            decoder_q,
            decoder_k,
            value_head,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check(&self, obs: &Observation) -> Result<(), Error> {
        if obs.neighbors.is_empty() {
            return Err(Error::EmptyNeighborSet);
        }
        if obs.spectral.cols() != self.config.spectral_dim {
            return Err(Error::Config(format!(
                "observation has {} spectral features, policy expects {}",
                obs.spectral.cols(),
                self.config.spectral_dim
            )));
        }
        if !obs.windows.first().is_some_and(|w| w.valid) {
            return Err(Error::Config("most recent window must be valid".into()));
        }
        for w in obs.windows.iter().filter(|w| w.valid) {
            if w.targets.iter().any(|t| t.cols() != self.config.features_per_target) {
                return Err(Error::Config(format!(
                    "policy expects {} belief features per target",
                    self.config.features_per_target
                )));
            }
        }
        Ok(())
    }

    /// Records the full network on `tape`.
    pub fn forward(&self, tape: &mut Tape<'_>, obs: &Observation) -> Result<ForwardPass, Error> {
        self.check(obs)?;
        let coords = tape.constant(obs.coords.clone());
        let h_c = self.coord.forward(tape, coords);

        // Target encoder, then the path-length tag, per window.
        let mut tagged = Vec::with_capacity(obs.windows.len());
        let mut target_scores = Vec::with_capacity(obs.windows.len());
        for w in &obs.windows {
            if !w.valid {
                // Never read: the temporal mask drops this item.
                tagged.push(h_c);
                target_scores.push(None);
                continue;
            }
            let items: Vec<Var> = w
                .targets
                .iter()
                .map(|t| {
                    let x = tape.constant(t.clone());
                    self.target_embed.forward(tape, x)
                })
                .collect();
            let enc = self.target_block.forward_grouped(tape, h_c, &items, None)?;
            let tag = tape.constant(Tensor::scalar(w.tag));
            let tag = self.tag_embed.forward(tape, tag);
            tagged.push(tape.add_row(enc.output, tag));
            target_scores.push(Some(enc.scores));
        }

        let mask = obs.temporal_mask();
        let temporal = self.temporal_block.forward_grouped(tape, tagged[0], &tagged, Some(&mask))?;

        let mut h = temporal.output;
        if let Some(pe) = &self.spectral_embed {
            let s = tape.constant(obs.spectral.clone());
            let s = pe.forward(tape, s);
            h = tape.add(h, s);
        }
        let spatial = self.spatial_block.forward(tape, h, h, None)?;

        let dist = tape.constant(obs.dist.clone());
        let cat = tape.concat_cols(&[spatial.output, dist]);
        let h_dec = self.decoder_proj.forward(tape, cat);
        let current = tape.gather_rows(h_dec, &[obs.current]);
        let neighbors = tape.gather_rows(h_dec, &obs.neighbors);
        let wq = tape.param(self.decoder_q);
        let wk = tape.param(self.decoder_k);
        let q = tape.matmul(current, wq);
        let k = tape.matmul(neighbors, wk);
        let logits = tape.matmul_t(q, k);
        let logits = tape.scale(logits, 1.0 / (self.config.dim as f64).sqrt());
        let log_probs = tape.log_softmax_rows(logits);
        let value = self.value_head.forward(tape, current);

        Ok(ForwardPass {
            log_probs,
            value,
            target_scores,
            temporal_scores: temporal.scores,
            spatial_scores: spatial.scores,
        })
    }

    pub fn evaluate(&self, obs: &Observation) -> Result<PolicyOutput, Error> {
        let mut tape = Tape::new(&self.params);
        let fp = self.forward(&mut tape, obs)?;
        let log_probs = tape.value(fp.log_probs).data().to_vec();
        Ok(PolicyOutput {
            action_probs: log_probs.iter().map(|l| l.exp()).collect(),
            log_probs,
            value: tape.value(fp.value).item(),
        })
    }

    /// Picks a neighbour index (into `obs.neighbors`).
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &Observation,
        mode: ActionMode,
        rng: &mut R,
    ) -> Result<(usize, PolicyOutput), Error> {
        let out = self.evaluate(obs)?;
        let idx = match mode {
            ActionMode::Greedy => out
                .action_probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("non-empty neighbours"),
            ActionMode::Sample => WeightedIndex::new(&out.action_probs)
                .map_err(|e| Error::Config(format!("invalid action distribution: {e}")))?
                .sample(rng),
        };
        Ok((idx, out))
    }

    pub fn attention_trace(&self, obs: &Observation) -> Result<AttentionTrace, Error> {
        let mut tape = Tape::new(&self.params);
        let fp = self.forward(&mut tape, obs)?;
        let weights = |v: Var| tape.attention_weights(v).map(<[f64]>::to_vec).unwrap_or_default();
        Ok(AttentionTrace {
            current: obs.current,
            neighbors: obs.neighbors.clone(),
            heads: self.config.heads,
            target: fp.target_scores.iter().map(|s| s.map(weights)).collect(),
            temporal: weights(fp.temporal_scores),
            spatial: weights(fp.spatial_scores),
            decoder: tape.value(fp.log_probs).data().iter().map(|l| l.exp()).collect(),
        })
    }

    /// Writes a checkpoint; the policy configuration goes into the manifest metadata.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), Error> {
        let metadata = serde_json::json!({ "policy": self.config, "extra": extra });
        checkpoint::save(path, &self.params, metadata)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let (manifest_path, _) = checkpoint::checkpoint_paths(path);
        if !manifest_path.exists() {
            return Err(Error::CheckpointMissing(manifest_path.display().to_string()));
        }
        let manifest = checkpoint::read_manifest(path)?;
        let config: PolicyConfig = serde_json::from_value(manifest.metadata["policy"].clone())?;
        let mut net = Self::new(config, 0)?;
        checkpoint::load_into(path, &mut net.params)?;
        Ok(net)
    }
}
