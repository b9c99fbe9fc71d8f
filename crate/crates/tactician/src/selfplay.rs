//! Episode orchestration and the two training drivers.
//!
//! `run_episode` plays one case end to end: the planner picks a strategy for
//! the current state, the assistant and user simulators each produce a turn,
//! and the judge scores the new state, terminating on goal completion or at
//! the turn cap. `rl_train` repeats that over uniformly sampled cases and
//! applies a policy-gradient update per valid episode; `sft_train` fits the
//! policy to strategy-annotated dialogues and keeps the epoch checkpoint
//! with the best dev accuracy. Both drivers are fully seeded: identical
//! seeds and scripted backends reproduce identical logs and parameters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::StrategyCatalog;
use crate::corpus::{CorpusRecord, Split};
use crate::domain::{
    CaseProfile, DialogueState, DomainKind, EpisodeRecord, EpisodeStatus, EpisodeStep, Speaker,
    StrategyAction,
};
use crate::gateway::{Gateway, DEFAULT_MAX_NEW_TOKENS};
use crate::policy::{
    compute_returns_with, extract_features, select_action, FeatureVector, PolicyConfig,
    PolicyError, PolicyParameters, SelectMode, TrainConfig,
};
use crate::reward::{judge, RewardConfig};
use crate::roleplay::{generate_assistant_turn, generate_user_turn, opening_exchange, TemplateSet};

#[derive(Debug, Error)]
pub enum SelfplayError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("training sink failed: {0}")]
    Sink(#[from] std::io::Error),
    #[error("{invalid} of {total} episodes were invalid, more than 10%; aborting the run")]
    TooManyInvalid { invalid: u32, total: u32 },
    #[error("corpus contains no strategy-labeled system turns to fit on")]
    NoLabeledTurns,
    #[error("no cases available to sample episodes from")]
    NoCases,
    #[error("a planned step is missing its strategy action")]
    UnplannedStep,
}

/// How the next system strategy is chosen. `Standard` is the no-planner
/// sentinel: prompts carry no strategy instruction and nothing is trainable,
/// so it only makes sense as an evaluation baseline.
#[derive(Clone, Copy)]
pub enum Planner<'a> {
    Learned(&'a PolicyParameters),
    Standard,
}

/// Train samples actions from the policy distribution (seeded); Eval takes
/// the greedy argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeMode {
    Train { seed: u64 },
    Eval,
}

/// Everything an episode needs besides the planner and the case: the three
/// model endpoints, feature/reward settings, and the domain assets.
pub struct EpisodeContext<'a> {
    pub gateway_sys: &'a Gateway,
    pub gateway_usr: &'a Gateway,
    pub gateway_rwd: &'a Gateway,
    pub policy: &'a PolicyConfig,
    pub reward: &'a RewardConfig,
    pub catalog: &'a StrategyCatalog,
    pub templates: &'a TemplateSet,
    /// Completion-length cap for the assistant and user simulators.
    pub gen_max_new_tokens: u32,
}

impl<'a> EpisodeContext<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        gateway_sys: &'a Gateway,
        gateway_usr: &'a Gateway,
        gateway_rwd: &'a Gateway,
        policy: &'a PolicyConfig,
        reward: &'a RewardConfig,
        catalog: &'a StrategyCatalog,
        templates: &'a TemplateSet,
    ) -> Self {
        EpisodeContext {
            gateway_sys,
            gateway_usr,
            gateway_rwd,
            policy,
            reward,
            catalog,
            templates,
            gen_max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

/// Plays one episode: seeds the scripted opening, then repeats
/// plan → assistant turn → user turn → judge until the goal completes or the
/// turn cap fails the episode. Any gateway or judge failure aborts with a
/// partial record whose `invalid` field carries the reason; such records are
/// excluded from training updates and metrics.
pub fn run_episode(
    planner: &Planner,
    ctx: &EpisodeContext,
    case: &CaseProfile,
    mode: EpisodeMode,
) -> EpisodeRecord {
    let seed = match mode {
        EpisodeMode::Train { seed } => Some(seed),
        EpisodeMode::Eval => None,
    };
    let mut record = EpisodeRecord {
        case_id: case.id.clone(),
        seed,
        turns: Vec::new(),
        steps: Vec::new(),
        final_status: EpisodeStatus::OnGoing,
        completion_turn: None,
        sl_ratio: None,
        invalid: None,
    };
    if let Err(reason) = drive_episode(planner, ctx, case, mode, &mut record) {
        record.invalid = Some(reason);
    }
    record
}

fn drive_episode(
    planner: &Planner,
    ctx: &EpisodeContext,
    case: &CaseProfile,
    mode: EpisodeMode,
    record: &mut EpisodeRecord,
) -> Result<(), String> {
    let opening =
        opening_exchange(case, ctx.templates).map_err(|e| format!("opening failed: {e}"))?;
    let mut state = DialogueState::with_opening(case.clone(), opening);
    record.turns = state.turns.clone();

    let mut step_seeder = ChaCha8Rng::seed_from_u64(match mode {
        EpisodeMode::Train { seed } => seed,
        EpisodeMode::Eval => 0,
    });

    while state.status == EpisodeStatus::OnGoing && state.turn_count < ctx.reward.max_turns {
        let features = match planner {
            Planner::Learned(_) => {
                extract_features(&state, ctx.policy.window, ctx.policy.feature_dim)
            }
            Planner::Standard => FeatureVector::default(),
        };
        let action: Option<StrategyAction> = match planner {
            Planner::Learned(params) => {
                let dist = params.predict(&features).map_err(|e| format!("planning failed: {e}"))?;
                let chosen = match mode {
                    EpisodeMode::Train { .. } => {
                        select_action(&dist, SelectMode::Sample(step_seeder.gen()))
                    }
                    EpisodeMode::Eval => select_action(&dist, SelectMode::Greedy),
                };
                let action = ctx
                    .catalog
                    .action(chosen)
                    .ok_or_else(|| format!("policy chose action {chosen} outside the catalog"))?;
                Some(action.clone())
            }
            Planner::Standard => None,
        };

        let snapshot = (state.turn_count, state.turns.len() as u32);
        let sys_turn = generate_assistant_turn(
            ctx.gateway_sys,
            case,
            action.as_ref(),
            &state,
            ctx.templates,
            ctx.catalog.speakers(),
            ctx.gen_max_new_tokens,
        )
        .map_err(|e| format!("assistant turn failed: {e}"))?;

        // The user simulator must see the system turn it is replying to, so
        // it reads a preview state; the real state advances one full
        // exchange at a time.
        let mut preview = state.clone();
        let mut preview_sys = sys_turn.clone();
        preview_sys.index = preview.turns.len() as u32;
        preview.turns.push(preview_sys);
        let usr_turn = generate_user_turn(
            ctx.gateway_usr,
            case,
            &preview,
            ctx.templates,
            ctx.catalog.speakers(),
            ctx.gen_max_new_tokens,
        )
        .map_err(|e| format!("user turn failed: {e}"))?;

        state
            .advance(sys_turn, usr_turn)
            .map_err(|e| format!("state update failed: {e}"))?;

        let outcome = judge(ctx.gateway_rwd, ctx.reward, case, &state, ctx.catalog, ctx.templates)
            .map_err(|e| format!("judge failed: {e}"))?;
        state.status = outcome.status;

        let exchange = &state.turns[state.turns.len() - 2..];
        record.steps.push(EpisodeStep {
            state_snapshot: snapshot,
            features,
            action,
            system_text: exchange[0].text.clone(),
            user_text: exchange[1].text.clone(),
            v: Some(outcome.v),
            reward: outcome.reward,
            status: outcome.status,
        });
        record.turns = state.turns.clone();

        if outcome.status == EpisodeStatus::GoalCompleted {
            record.completion_turn = Some(state.turn_count);
            if case.domain() == DomainKind::Negotiation {
                record.sl_ratio = Some(outcome.reward);
            }
        }
    }

    record.final_status = state.status;
    Ok(())
}

/// One line of the per-episode training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLogRow {
    pub episode: u32,
    pub case_id: String,
    pub status: EpisodeStatus,
    pub total_reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_turn: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid: Option<String>,
}

/// Receives training progress: one row per episode and the parameters at
/// every checkpoint interval. File-writing sinks live in the run-layout
/// module; tests use in-memory collectors.
pub trait TrainSink {
    fn on_episode(&mut self, _row: &EpisodeLogRow) -> std::io::Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _episode: u32, _params: &PolicyParameters) -> std::io::Result<()> {
        Ok(())
    }
}

/// Discards all training progress callbacks.
pub struct NullSink;

impl TrainSink for NullSink {}

/// Episodes between periodic parameter checkpoints.
pub const CHECKPOINT_INTERVAL: u32 = 100;

/// Policy-gradient training: uniformly samples a case (seeded, with
/// replacement), plays a Train-mode episode, converts its rewards to
/// returns, and applies one update per valid episode. Invalid episodes are
/// logged and skipped rather than zero-filled, and the run aborts once more
/// than 10% of at least ten episodes have failed. With `rl_episodes` 0 the
/// parameters are returned untouched.
pub fn rl_train(
    params: &mut PolicyParameters,
    ctx: &EpisodeContext,
    cases: &[CaseProfile],
    train: &TrainConfig,
    sink: &mut dyn TrainSink,
) -> Result<Vec<EpisodeLogRow>, SelfplayError> {
    if train.rl_episodes == 0 {
        return Ok(Vec::new());
    }
    if cases.is_empty() {
        return Err(SelfplayError::NoCases);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut rows = Vec::with_capacity(train.rl_episodes as usize);
    let mut invalid_count = 0u32;

    for episode in 1..=train.rl_episodes {
        let case = &cases[rng.gen_range(0..cases.len())];
        let episode_seed = rng.gen::<u64>();
        let mut record =
            run_episode(&Planner::Learned(params), ctx, case, EpisodeMode::Train { seed: episode_seed });

        let total_reward = record.total_reward();
        if record.invalid.is_none() {
            let rewards = record.rewards();
            let returns = compute_returns_with(&rewards, train.gamma, train.return_convention)?;
            let mut trajectory = Vec::with_capacity(record.steps.len());
            for step in record.steps.drain(..) {
                let action = step.action.ok_or(SelfplayError::UnplannedStep)?;
                trajectory.push((step.features, action.id));
            }
            params.reinforce_update(
                &trajectory,
                &returns,
                train.rl_learning_rate,
                train.baseline_enabled,
            )?;
        } else {
            invalid_count += 1;
        }

        let row = EpisodeLogRow {
            episode,
            case_id: record.case_id.clone(),
            status: record.final_status,
            total_reward,
            completion_turn: record.completion_turn,
            invalid: record.invalid.clone(),
        };
        sink.on_episode(&row)?;
        rows.push(row);

        if episode % CHECKPOINT_INTERVAL == 0 {
            sink.on_checkpoint(episode, params)?;
        }
        if episode >= 10 && invalid_count * 10 > episode {
            return Err(SelfplayError::TooManyInvalid { invalid: invalid_count, total: episode });
        }
    }

    Ok(rows)
}

/// Accuracy and loss for one supervised epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftEpochReport {
    pub epoch: u32,
    /// Streaming loss: per-dialogue mean of per-decision losses, averaged
    /// over dialogues.
    pub mean_loss: f64,
    pub train_accuracy: f64,
    /// Equal to the train accuracy when the corpus has no dev split.
    pub dev_accuracy: f64,
}

/// Result of supervised fitting: per-epoch reports plus which epoch's
/// parameters were kept.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftOutcome {
    pub reports: Vec<SftEpochReport>,
    pub best_epoch: u32,
    pub best_dev_accuracy: f64,
    /// Unlabeled system turns encountered (scripted openings included).
    pub skipped_unlabeled: usize,
}

fn dialogue_pairs(
    record: &CorpusRecord,
    policy: &PolicyConfig,
    skipped: &mut usize,
) -> Vec<(FeatureVector, usize)> {
    let mut pairs = Vec::new();
    for (i, turn) in record.dialogue.iter().enumerate() {
        if turn.speaker != Speaker::System {
            continue;
        }
        match &turn.strategy {
            Some(action) => {
                let prefix = DialogueState::with_history(
                    record.case.clone(),
                    record.dialogue[..i].to_vec(),
                );
                pairs.push((
                    extract_features(&prefix, policy.window, policy.feature_dim),
                    action.id,
                ));
            }
            None => *skipped += 1,
        }
    }
    pairs
}

fn greedy_accuracy(
    params: &PolicyParameters,
    pairs: &[(FeatureVector, usize)],
) -> Result<Option<f64>, PolicyError> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for (features, gold) in pairs {
        let dist = params.predict(features)?;
        if select_action(&dist, SelectMode::Greedy) == *gold {
            hits += 1;
        }
    }
    Ok(Some(hits as f64 / pairs.len() as f64))
}

/// Fits the policy to the corpus's train split for `sft_epochs` passes,
/// shuffling dialogue order each epoch (seeded), scoring train and dev
/// accuracy after each pass, and restoring the parameters from the epoch
/// with the best dev accuracy. Unlabeled system turns are skipped and
/// counted. The per-epoch loss averages each dialogue's decisions first so
/// long dialogues don't dominate.
pub fn sft_train(
    params: &mut PolicyParameters,
    corpus: &[CorpusRecord],
    policy: &PolicyConfig,
    train: &TrainConfig,
) -> Result<SftOutcome, SelfplayError> {
    let mut skipped = 0usize;
    let mut train_groups: Vec<Vec<(FeatureVector, usize)>> = Vec::new();
    let mut dev_pairs: Vec<(FeatureVector, usize)> = Vec::new();
    for record in corpus {
        match record.split {
            Split::Train => {
                let pairs = dialogue_pairs(record, policy, &mut skipped);
                if !pairs.is_empty() {
                    train_groups.push(pairs);
                }
            }
            Split::Dev => {
                let mut ignored = 0;
                dev_pairs.extend(dialogue_pairs(record, policy, &mut ignored));
            }
            Split::Test => {}
        }
    }
    if train_groups.is_empty() {
        return Err(SelfplayError::NoLabeledTurns);
    }
    let train_pairs: Vec<&(FeatureVector, usize)> = train_groups.iter().flatten().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut reports = Vec::with_capacity(train.sft_epochs as usize);
    let mut best: Option<(f64, u32, PolicyParameters)> = None;

    for epoch in 1..=train.sft_epochs {
        let mut order: Vec<usize> = (0..train_groups.len()).collect();
        order.shuffle(&mut rng);

        let mut dialogue_losses = Vec::with_capacity(order.len());
        for &group in &order {
            let pairs = &train_groups[group];
            let mut loss_sum = 0.0;
            for (features, gold) in pairs {
                loss_sum += params.sft_step(features, *gold, train.sft_learning_rate)?;
            }
            dialogue_losses.push(loss_sum / pairs.len() as f64);
        }
        let mean_loss = dialogue_losses.iter().sum::<f64>() / dialogue_losses.len() as f64;

        let mut hits = 0usize;
        for (features, gold) in train_pairs.iter().copied() {
            let dist = params.predict(features)?;
            if select_action(&dist, SelectMode::Greedy) == *gold {
                hits += 1;
            }
        }
        let train_accuracy = hits as f64 / train_pairs.len() as f64;
        let dev_accuracy = greedy_accuracy(params, &dev_pairs)?.unwrap_or(train_accuracy);

        if best.as_ref().map(|(score, _, _)| dev_accuracy > *score).unwrap_or(true) {
            best = Some((dev_accuracy, epoch, params.clone()));
        }
        reports.push(SftEpochReport { epoch, mean_loss, train_accuracy, dev_accuracy });
    }

    // With zero epochs the parameters pass through untouched.
    let (best_dev_accuracy, best_epoch) = match best {
        Some((score, epoch, best_params)) => {
            *params = best_params;
            (score, epoch)
        }
        None => (0.0, 0),
    };
    Ok(SftOutcome { reports, best_epoch, best_dev_accuracy, skipped_unlabeled: skipped })
}
