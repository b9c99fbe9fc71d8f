//! Core domain types shared by every other module: case profiles, turns,
//! dialogue state, strategy actions, episode status and records.

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::FeatureVector;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("system turn expected first in an exchange, got {0:?}")]
    SpeakerMismatch(Speaker),
    #[error("exchange must end with a user turn, got {0:?}")]
    UserTurnExpected(Speaker),
    #[error("cannot append to a dialogue whose episode status is {0}")]
    EpisodeOver(EpisodeStatus),
    #[error("turns must alternate; last turn was already a system turn")]
    AlternationViolated,
    #[error("invalid case profile: {0}")]
    InvalidCase(String),
}

/// The three built-in conversation settings. Each fixes the strategy-set size:
/// Negotiation 11, EmotionalSupport 8, Tutoring 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Negotiation,
    EmotionalSupport,
    Tutoring,
}

impl DomainKind {
    pub const ALL: [DomainKind; 3] = [
        DomainKind::Negotiation,
        DomainKind::EmotionalSupport,
        DomainKind::Tutoring,
    ];

    pub fn action_count(self) -> usize {
        match self {
            DomainKind::Negotiation => 11,
            DomainKind::EmotionalSupport => 8,
            DomainKind::Tutoring => 5,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            DomainKind::Negotiation => "negotiation",
            DomainKind::EmotionalSupport => "emotional_support",
            DomainKind::Tutoring => "tutoring",
        }
    }
}

impl std::fmt::Display for DomainKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for DomainKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "negotiation" => Ok(DomainKind::Negotiation),
            "emotional_support" => Ok(DomainKind::EmotionalSupport),
            "tutoring" => Ok(DomainKind::Tutoring),
            other => Err(format!("unknown domain {other:?}")),
        }
    }
}

/// Who produced a turn: the strategy-steered agent (System) or the simulated
/// human side (User).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    System,
    User,
}

/// Per-case background driving every prompt. Exactly the variant matching the
/// domain is populated; prices are exact decimals so ratio metrics stay stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseProfile {
    pub id: String,
    #[serde(flatten)]
    pub details: CaseDetails,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "domain", rename_all = "snake_case")]
pub enum CaseDetails {
    Negotiation {
        item_name: String,
        item_description: String,
        buyer_target_price: Decimal,
        seller_target_price: Decimal,
    },
    EmotionalSupport {
        emotion_type: String,
        problem_type: String,
        situation: String,
    },
    Tutoring {
        exercise: String,
        situation: String,
    },
}

impl CaseProfile {
    pub fn domain(&self) -> DomainKind {
        match self.details {
            CaseDetails::Negotiation { .. } => DomainKind::Negotiation,
            CaseDetails::EmotionalSupport { .. } => DomainKind::EmotionalSupport,
            CaseDetails::Tutoring { .. } => DomainKind::Tutoring,
        }
    }

    /// Buyer wants a lower price than the listed one; both must be positive.
    pub fn validate(&self) -> Result<(), CoreError> {
        if let CaseDetails::Negotiation {
            buyer_target_price,
            seller_target_price,
            ..
        } = &self.details
        {
            if *buyer_target_price <= Decimal::ZERO || *seller_target_price <= Decimal::ZERO {
                return Err(CoreError::InvalidCase(format!(
                    "case {}: target prices must be positive",
                    self.id
                )));
            }
            if buyer_target_price >= seller_target_price {
                return Err(CoreError::InvalidCase(format!(
                    "case {}: buyer target {} must be below seller target {}",
                    self.id, buyer_target_price, seller_target_price
                )));
            }
        }
        Ok(())
    }
}

/// One strategy of a domain's fixed action set, carrying the natural-language
/// instruction inserted into the agent prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyAction {
    pub domain: DomainKind,
    pub id: usize,
    pub name: String,
    pub instruction: String,
}

/// A single utterance. System turns carry the strategy that produced them
/// when a policy chose one; scripted opening turns and user turns do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyAction>,
    pub index: u32,
}

impl Turn {
    pub fn system(text: impl Into<String>, strategy: Option<StrategyAction>) -> Self {
        Turn { speaker: Speaker::System, text: text.into(), strategy, index: 0 }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Turn { speaker: Speaker::User, text: text.into(), strategy: None, index: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    OnGoing,
    GoalCompleted,
    GoalFailed,
}

impl std::fmt::Display for EpisodeStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EpisodeStatus::OnGoing => "ongoing",
            EpisodeStatus::GoalCompleted => "goal_completed",
            EpisodeStatus::GoalFailed => "goal_failed",
        })
    }
}

/// Ordered turn history plus the case it belongs to. `turn_count` counts
/// completed system-user exchanges; scripted opening turns are part of the
/// history but do not count toward it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DialogueState {
    pub case: CaseProfile,
    pub turns: Vec<Turn>,
    pub turn_count: u32,
    pub status: EpisodeStatus,
}

impl DialogueState {
    pub fn new(case: CaseProfile) -> Self {
        DialogueState { case, turns: Vec::new(), turn_count: 0, status: EpisodeStatus::OnGoing }
    }

    /// Seeds the scripted opening exchange. Opening turns get indices but do
    /// not advance `turn_count`.
    pub fn with_opening(case: CaseProfile, opening: Vec<Turn>) -> Self {
        let mut state = DialogueState::new(case);
        for mut turn in opening {
            turn.index = state.turns.len() as u32;
            state.turns.push(turn);
        }
        state
    }

    /// Builds a state over an annotated corpus prefix. Corpus dialogues may
    /// break strict alternation (real transcripts do), so `turn_count` is the
    /// number of user turns that directly answer a system turn.
    pub fn with_history(case: CaseProfile, turns: Vec<Turn>) -> Self {
        let mut state = DialogueState::new(case);
        for (i, mut turn) in turns.into_iter().enumerate() {
            turn.index = i as u32;
            if turn.speaker == Speaker::User
                && state.turns.last().map(|t| t.speaker) == Some(Speaker::System)
            {
                state.turn_count += 1;
            }
            state.turns.push(turn);
        }
        state
    }

    /// Appends one completed exchange and bumps the exchange counter.
    /// Rejects speaker mismatches, broken alternation, and terminal states.
    pub fn advance(&mut self, sys_turn: Turn, usr_turn: Turn) -> Result<(), CoreError> {
        if self.status != EpisodeStatus::OnGoing {
            return Err(CoreError::EpisodeOver(self.status));
        }
        if sys_turn.speaker != Speaker::System {
            return Err(CoreError::SpeakerMismatch(sys_turn.speaker));
        }
        if usr_turn.speaker != Speaker::User {
            return Err(CoreError::UserTurnExpected(usr_turn.speaker));
        }
        if self.turns.last().map(|t| t.speaker) == Some(Speaker::System) {
            return Err(CoreError::AlternationViolated);
        }
        let mut sys_turn = sys_turn;
        sys_turn.index = self.turns.len() as u32;
        self.turns.push(sys_turn);
        let mut usr_turn = usr_turn;
        usr_turn.index = self.turns.len() as u32;
        self.turns.push(usr_turn);
        self.turn_count += 1;
        Ok(())
    }
}

/// One policy decision plus everything observed before the next one.
/// `state_snapshot` is the turn-index range that was visible when the action
/// was picked; `v` is the judge's averaged verdict after the exchange.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub state_snapshot: (u32, u32),
    #[serde(skip)]
    pub features: FeatureVector,
    pub action: Option<StrategyAction>,
    pub system_text: String,
    pub user_text: String,
    pub v: Option<f64>,
    pub reward: f64,
    pub status: EpisodeStatus,
}

/// Full trajectory of one self-play episode: turns, decisions, rewards, judge
/// scores, terminal status, and the seed that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub case_id: String,
    pub seed: Option<u64>,
    pub turns: Vec<Turn>,
    pub steps: Vec<EpisodeStep>,
    pub final_status: EpisodeStatus,
    pub completion_turn: Option<u32>,
    pub sl_ratio: Option<f64>,
    /// Present when a gateway or judge failure aborted the episode; such
    /// records are excluded from training updates and metrics.
    pub invalid: Option<String>,
}

impl EpisodeRecord {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}
