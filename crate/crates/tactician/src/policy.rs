//! The tunable dialogue policy: hashed sparse features over the conversation
//! so far, a linear softmax over the domain's strategy set, cross-entropy
//! supervised training, discounted returns, and the REINFORCE update.
//!
//! The policy is deliberately small and exactly differentiable so that every
//! gradient can be checked against finite differences in tests. It stands
//! behind the same interfaces a neural planner would use: extract features
//! from a `DialogueState`, produce an `ActionDistribution`, update from
//! labeled turns or from sampled trajectories and returns.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::StrategyCatalog;
use crate::domain::{DialogueState, DomainKind, Speaker};

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Default hashed feature space size.
pub const DEFAULT_FEATURE_DIM: u32 = 1 << 18;

/// Default number of most recent turns whose text is featurized.
pub const DEFAULT_WINDOW: usize = 4;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("feature dimension mismatch: params expect {expected}, features have {got}")]
    DimensionMismatch { expected: u32, got: u32 },
    #[error("action id {id} out of range for {num_actions} actions")]
    InvalidAction { id: usize, num_actions: usize },
    #[error("trajectory has {trajectory} steps but {returns} returns")]
    LengthMismatch { trajectory: usize, returns: usize },
    #[error("non-finite value in {0}; parameters are corrupt or inputs invalid")]
    NonFinite(String),
    #[error("rewards list is empty")]
    EmptyRewards,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format version {got} unsupported (expected {expected})")]
    VersionMismatch { expected: u32, got: u32 },
    #[error("checkpoint domain {got} does not match expected domain {expected}")]
    DomainMismatch { expected: DomainKind, got: DomainKind },
    #[error("checkpoint action names do not match the {domain} catalog: {detail}")]
    CatalogDrift { domain: DomainKind, detail: String },
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Sparse feature vector with sorted, deduplicated indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
    pub dim: u32,
}

impl FeatureVector {
    pub fn pairs(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Feature extraction knobs. The hashed dimension is part of the parameter
/// shape, so changing it invalidates checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default = "default_feature_dim")]
    pub feature_dim: u32,
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_feature_dim() -> u32 {
    DEFAULT_FEATURE_DIM
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { feature_dim: DEFAULT_FEATURE_DIM, window: DEFAULT_WINDOW }
    }
}

/// Which suffix-sum weighting `compute_returns` uses. The default weights the
/// final reward by gamma^0 and earlier rewards by increasing powers; the
/// alternative is the usual gamma^(t'-t) discounting from the current step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReturnConvention {
    #[default]
    Paper,
    Standard,
}

/// Training hyperparameters shared by supervised and reinforcement phases.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_sft_lr")]
    pub sft_learning_rate: f64,
    #[serde(default = "default_rl_lr")]
    pub rl_learning_rate: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_sft_epochs")]
    pub sft_epochs: u32,
    #[serde(default = "default_rl_episodes")]
    pub rl_episodes: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub baseline_enabled: bool,
    #[serde(default)]
    pub return_convention: ReturnConvention,
}

fn default_sft_lr() -> f64 {
    0.1
}

fn default_rl_lr() -> f64 {
    0.01
}

fn default_gamma() -> f64 {
    0.999
}

fn default_sft_epochs() -> u32 {
    10
}

fn default_rl_episodes() -> u32 {
    1000
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sft_learning_rate: default_sft_lr(),
            rl_learning_rate: default_rl_lr(),
            gamma: default_gamma(),
            sft_epochs: default_sft_epochs(),
            rl_episodes: default_rl_episodes(),
            seed: 0,
            baseline_enabled: false,
            return_convention: ReturnConvention::Paper,
        }
    }
}

/// Softmax output over the domain's actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub probabilities: Vec<f64>,
}

impl ActionDistribution {
    /// Argmax with ties broken toward the lowest action id.
    pub fn greedy(&self) -> usize {
        let mut best = 0usize;
        for (i, &p) in self.probabilities.iter().enumerate().skip(1) {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }

    /// One draw from the distribution using the supplied generator.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let draw: f64 = rng.gen();
        let mut cumulative = 0.0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            cumulative += p;
            if draw < cumulative {
                return i;
            }
        }
        self.probabilities.len() - 1
    }
}

/// How an action is chosen from a distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    Sample(u64),
    Greedy,
}

/// Picks an action id: greedy argmax, or one seeded draw.
pub fn select_action(dist: &ActionDistribution, mode: SelectMode) -> usize {
    match mode {
        SelectMode::Greedy => dist.greedy(),
        SelectMode::Sample(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            dist.sample(&mut rng)
        }
    }
}

/// FNV-1a 64-bit hash. Hand-rolled so feature indices are stable across
/// platforms and releases, unlike the stdlib's unspecified default hasher.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn bucket_of(term: &str, dim: u32) -> u32 {
    (fnv1a64(term.as_bytes()) % u64::from(dim)) as u32
}

/// Deterministic sparse featurization of a dialogue state: hashed lowercase
/// word unigrams and bigrams of the last `window` turns (speaker-prefixed),
/// the ids of up to three most recent system strategies, the current turn
/// count, and a constant bias term. Repeated terms accumulate counts.
pub fn extract_features(state: &DialogueState, window: usize, feature_dim: u32) -> FeatureVector {
    let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
    let mut add = |term: &str| {
        *acc.entry(bucket_of(term, feature_dim)).or_insert(0.0) += 1.0;
    };

    add("bias");
    add(&format!("turn_bucket:{}", state.turn_count));

    let start = state.turns.len().saturating_sub(window);
    for turn in &state.turns[start..] {
        let prefix = match turn.speaker {
            Speaker::System => "sys",
            Speaker::User => "usr",
        };
        let lowered = turn.text.to_lowercase();
        let words: Vec<&str> = lowered.split_whitespace().collect();
        for w in &words {
            add(&format!("u:{prefix}:{w}"));
        }
        for pair in words.windows(2) {
            add(&format!("b:{prefix}:{}_{}", pair[0], pair[1]));
        }
    }

    let mut slot = 0usize;
    for turn in state.turns.iter().rev() {
        if turn.speaker == Speaker::System {
            if let Some(action) = &turn.strategy {
                slot += 1;
                add(&format!("prev_act:{slot}:{}", action.id));
                if slot == 3 {
                    break;
                }
            }
        }
    }

    let (indices, values): (Vec<u32>, Vec<f64>) = acc.into_iter().unzip();
    FeatureVector { indices, values, dim: feature_dim }
}

/// Linear softmax parameters: one weight row and one bias per action.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    pub domain: DomainKind,
    pub feature_dim: u32,
    pub action_names: Vec<String>,
    pub bias: Vec<f64>,
    /// Row-major, action-major: `weights[a * feature_dim + j]`.
    pub weights: Vec<f64>,
    pub version: u32,
}

impl PolicyParameters {
    /// Zero-initialized parameters for a domain's catalog.
    pub fn new(catalog: &StrategyCatalog, feature_dim: u32) -> Self {
        let action_names = catalog.action_names();
        let num_actions = action_names.len();
        PolicyParameters {
            domain: catalog.domain(),
            feature_dim,
            action_names,
            bias: vec![0.0; num_actions],
            weights: vec![0.0; num_actions * feature_dim as usize],
            version: CHECKPOINT_VERSION,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.action_names.len()
    }

    fn logits(&self, features: &FeatureVector) -> Result<Vec<f64>, PolicyError> {
        if features.dim != self.feature_dim {
            return Err(PolicyError::DimensionMismatch {
                expected: self.feature_dim,
                got: features.dim,
            });
        }
        let dim = self.feature_dim as usize;
        let mut z = self.bias.clone();
        for (action, logit) in z.iter_mut().enumerate() {
            let row = &self.weights[action * dim..(action + 1) * dim];
            for (idx, val) in features.pairs() {
                *logit += row[idx as usize] * val;
            }
        }
        Ok(z)
    }

    /// Softmax over logits, numerically stabilized by max-subtraction.
    pub fn predict(&self, features: &FeatureVector) -> Result<ActionDistribution, PolicyError> {
        let z = self.logits(features)?;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(PolicyError::NonFinite("logits".into()));
        }
        let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probabilities = exps.into_iter().map(|e| e / total).collect();
        Ok(ActionDistribution { probabilities })
    }

    /// One cross-entropy gradient step toward a labeled action. Returns the
    /// loss at the pre-update parameters, computed stably as logZ - z_gold.
    pub fn sft_step(
        &mut self,
        features: &FeatureVector,
        gold_action_id: usize,
        lr: f64,
    ) -> Result<f64, PolicyError> {
        if gold_action_id >= self.num_actions() {
            return Err(PolicyError::InvalidAction {
                id: gold_action_id,
                num_actions: self.num_actions(),
            });
        }
        let z = self.logits(features)?;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let loss = log_z - z[gold_action_id];
        if !loss.is_finite() {
            return Err(PolicyError::NonFinite("sft loss".into()));
        }
        let probs: Vec<f64> = z.iter().map(|&v| (v - log_z).exp()).collect();
        let dim = self.feature_dim as usize;
        for (action, &p) in probs.iter().enumerate() {
            let g = p - if action == gold_action_id { 1.0 } else { 0.0 };
            self.bias[action] -= lr * g;
            let row = &mut self.weights[action * dim..(action + 1) * dim];
            for (idx, val) in features.pairs() {
                row[idx as usize] -= lr * g * val;
            }
        }
        Ok(loss)
    }

    /// REINFORCE ascent on sum over steps of log pi(a_t | s_t) * R_t. All
    /// step gradients are evaluated at the entry parameters, then applied in
    /// step order, so the net update is exactly the learning rate times the
    /// gradient of that objective. With the baseline enabled, each return has
    /// the running mean of returns seen so far subtracted before weighting.
    pub fn reinforce_update(
        &mut self,
        trajectory: &[(FeatureVector, usize)],
        returns: &[f64],
        lr: f64,
        baseline_enabled: bool,
    ) -> Result<(), PolicyError> {
        if trajectory.len() != returns.len() {
            return Err(PolicyError::LengthMismatch {
                trajectory: trajectory.len(),
                returns: returns.len(),
            });
        }
        let mut step_probs = Vec::with_capacity(trajectory.len());
        for (features, action_id) in trajectory {
            if *action_id >= self.num_actions() {
                return Err(PolicyError::InvalidAction {
                    id: *action_id,
                    num_actions: self.num_actions(),
                });
            }
            let dist = self.predict(features)?;
            if dist.probabilities.iter().any(|p| !p.is_finite()) {
                return Err(PolicyError::NonFinite("policy gradient".into()));
            }
            step_probs.push(dist.probabilities);
        }
        if returns.iter().any(|r| !r.is_finite()) {
            return Err(PolicyError::NonFinite("returns".into()));
        }

        let mut running_sum = 0.0;
        let dim = self.feature_dim as usize;
        for (t, ((features, action_id), probs)) in
            trajectory.iter().zip(step_probs.iter()).enumerate()
        {
            running_sum += returns[t];
            let weight = if baseline_enabled {
                returns[t] - running_sum / (t + 1) as f64
            } else {
                returns[t]
            };
            for (action, &p) in probs.iter().enumerate() {
                let indicator = if action == *action_id { 1.0 } else { 0.0 };
                let g = (indicator - p) * weight;
                self.bias[action] += lr * g;
                let row = &mut self.weights[action * dim..(action + 1) * dim];
                for (idx, val) in features.pairs() {
                    row[idx as usize] += lr * g * val;
                }
            }
        }
        Ok(())
    }
}

/// Discounted suffix sums of the reward sequence under the default
/// convention; see [`ReturnConvention`].
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Result<Vec<f64>, PolicyError> {
    compute_returns_with(rewards, gamma, ReturnConvention::Paper)
}

/// Discounted suffix sums under an explicit convention, in one backward pass.
pub fn compute_returns_with(
    rewards: &[f64],
    gamma: f64,
    convention: ReturnConvention,
) -> Result<Vec<f64>, PolicyError> {
    if rewards.is_empty() {
        return Err(PolicyError::EmptyRewards);
    }
    let n = rewards.len();
    let mut returns = vec![0.0; n];
    match convention {
        ReturnConvention::Paper => {
            // R_t = sum over t' >= t of gamma^(T - t') * r_t', so the final
            // reward carries gamma^0 and earlier rewards higher powers.
            let mut power = 1.0;
            let mut suffix = 0.0;
            for t in (0..n).rev() {
                suffix += power * rewards[t];
                returns[t] = suffix;
                power *= gamma;
            }
        }
        ReturnConvention::Standard => {
            let mut suffix = 0.0;
            for t in (0..n).rev() {
                suffix = rewards[t] + gamma * suffix;
                returns[t] = suffix;
            }
        }
    }
    Ok(returns)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    domain: DomainKind,
    feature_dim: u32,
    action_names: Vec<String>,
    bias: Vec<f64>,
    weights: Vec<f64>,
}

/// Writes parameters as a single JSON document. Round-trips bit-exactly:
/// floats are encoded as shortest round-trip decimal.
pub fn save_checkpoint(params: &PolicyParameters, path: &Path) -> Result<(), PolicyError> {
    let file = CheckpointFile {
        format_version: params.version,
        domain: params.domain,
        feature_dim: params.feature_dim,
        action_names: params.action_names.clone(),
        bias: params.bias.clone(),
        weights: params.weights.clone(),
    };
    let mut bytes = serde_json::to_vec(&file)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint and validates it against the catalog the run is using:
/// format version, domain, action names (order-sensitive), shape, finiteness.
pub fn load_checkpoint(
    path: &Path,
    catalog: &StrategyCatalog,
) -> Result<PolicyParameters, PolicyError> {
    let file: CheckpointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(PolicyError::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            got: file.format_version,
        });
    }
    if file.domain != catalog.domain() {
        return Err(PolicyError::DomainMismatch { expected: catalog.domain(), got: file.domain });
    }
    let expected_names = catalog.action_names();
    if file.action_names != expected_names {
        return Err(PolicyError::CatalogDrift {
            domain: file.domain,
            detail: format!(
                "checkpoint lists {:?}, catalog lists {:?}",
                file.action_names, expected_names
            ),
        });
    }
    if file.bias.len() != file.action_names.len() {
        return Err(PolicyError::BadCheckpoint(format!(
            "{} bias entries for {} actions",
            file.bias.len(),
            file.action_names.len()
        )));
    }
    let expected_len = file.action_names.len() * file.feature_dim as usize;
    if file.weights.len() != expected_len {
        return Err(PolicyError::BadCheckpoint(format!(
            "weight matrix has {} entries, expected {}",
            file.weights.len(),
            expected_len
        )));
    }
    if file.bias.iter().chain(file.weights.iter()).any(|v| !v.is_finite()) {
        return Err(PolicyError::NonFinite("checkpoint parameters".into()));
    }
    Ok(PolicyParameters {
        domain: file.domain,
        feature_dim: file.feature_dim,
        action_names: file.action_names,
        bias: file.bias,
        weights: file.weights,
        version: file.format_version,
    })
}
