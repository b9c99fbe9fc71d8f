//! Goal-oriented feedback from an LLM judge, turned into scalar rewards.
//!
//! After every completed exchange the judge receives the serialized
//! conversation and must answer with one of the domain's canonical
//! sentences. Each of the `l` sampled answers maps to a scalar in [-1, 1];
//! their mean `v` decides goal completion against the threshold epsilon and
//! becomes the terminal reward. Non-terminal steps earn a small negative
//! step penalty. Negotiation is special: its terminal reward is the
//! sale-to-list ratio of the extracted deal price rather than the raw score,
//! since that ratio is the quantity the training is meant to improve.

use std::sync::OnceLock;

use regex::Regex;
use rust_decimal::prelude::ToPrimitive;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{SpeakerLabels, StrategyCatalog};
use crate::domain::{CaseProfile, DialogueState, DomainKind, EpisodeStatus, Speaker};
use crate::gateway::{ChatMessage, CompletionRequest, Gateway, GatewayError, DEFAULT_MAX_NEW_TOKENS};
use crate::roleplay::{case_values, substitute, RoleplayError, TemplateSet};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] RoleplayError),
    #[error("all {count} judge samples were unparseable; the judge prompt is broken (first sample: {example:?})")]
    AllUnparsed { count: usize, example: String },
    #[error("sale-to-list ratio is undefined when buyer and seller targets are equal")]
    EqualTargets,
}

/// What a failed negotiation episode pays: the assigned no-deal ratio of 0,
/// or the judge score itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FailedDealReward {
    #[default]
    Zero,
    Score,
}

/// Judge sampling and episode-termination parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Number of judge samples per assessment.
    #[serde(default = "default_l")]
    pub l: usize,
    /// Judge sampling temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Goal-completion threshold; when absent the domain catalog's value
    /// applies (negotiation 1.0, emotional support 0.5, tutoring 1.0).
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "default_step_penalty")]
    pub step_penalty: f64,
    /// Episode length cap in completed exchanges.
    #[serde(default = "default_max_turns")]
    pub max_turns: u32,
    /// Complete only on v strictly greater than epsilon instead of v >= epsilon.
    #[serde(default)]
    pub strict_threshold: bool,
    #[serde(default)]
    pub failed_deal_reward: FailedDealReward,
}

fn default_l() -> usize {
    10
}

fn default_tau() -> f64 {
    1.1
}

fn default_step_penalty() -> f64 {
    -0.1
}

fn default_max_turns() -> u32 {
    8
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            l: default_l(),
            tau: default_tau(),
            epsilon: None,
            step_penalty: default_step_penalty(),
            max_turns: default_max_turns(),
            strict_threshold: false,
            failed_deal_reward: FailedDealReward::Zero,
        }
    }
}

impl RewardConfig {
    pub fn effective_epsilon(&self, catalog: &StrategyCatalog) -> f64 {
        self.epsilon.unwrap_or(catalog.feedback().epsilon)
    }

    /// Structural problems with this config, empty when valid.
    pub fn problems(&self, catalog: &StrategyCatalog) -> Vec<String> {
        let mut problems = Vec::new();
        if self.l == 0 {
            problems.push("reward.l must be at least 1".into());
        }
        if !self.tau.is_finite() || self.tau < 0.0 {
            problems.push(format!("reward.tau must be finite and nonnegative, got {}", self.tau));
        }
        if self.l >= 2 && self.tau == 0.0 {
            problems.push("reward.l >= 2 requires reward.tau > 0".into());
        }
        let epsilon = self.effective_epsilon(catalog);
        if !(-1.0..=1.0).contains(&epsilon) {
            problems.push(format!("reward.epsilon must lie in [-1, 1], got {epsilon}"));
        }
        if self.max_turns == 0 {
            problems.push("reward.max_turns must be at least 1".into());
        }
        if !self.step_penalty.is_finite() {
            problems.push("reward.step_penalty must be finite".into());
        }
        problems
    }
}

/// One parsed judge sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerbalFeedback {
    pub domain: DomainKind,
    /// Canonical option label from the domain catalog.
    pub label: String,
    /// The option's scalar score.
    pub score: f64,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deal_price: Option<Decimal>,
    /// True when the raw text matched no canonical option and fell back to
    /// the most negative one.
    #[serde(default)]
    pub unparsed: bool,
}

/// The judge's verdict for one dialogue state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeOutcome {
    /// Mean of the mapped sample scores.
    pub v: f64,
    pub samples: Vec<VerbalFeedback>,
    pub status: EpisodeStatus,
    pub reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deal_price: Option<Decimal>,
}

fn normalize(text: &str) -> String {
    text.to_lowercase().replace('\u{2019}', "'")
}

/// The canonical sentence truncated at its first placeholder, normalized.
fn option_key(text: &str) -> String {
    let cut = text.find('[').map(|i| &text[..i]).unwrap_or(text);
    normalize(cut.trim_end())
}

/// Looser variant without the leading yes/no clause, so answers that skip it
/// still match.
fn relaxed_key(key: &str) -> Option<String> {
    for prefix in ["yes, ", "no, but ", "no, "] {
        if let Some(rest) = key.strip_prefix(prefix) {
            return Some(rest.to_string());
        }
    }
    None
}

fn price_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| {
        Regex::new(r"(?i)deal at \$?\s*([0-9][0-9,]*(?:\.[0-9]+)?)").expect("valid price pattern")
    })
}

/// Extracts the currency amount from a deal sentence, tolerating a dollar
/// sign and thousands separators.
pub fn extract_deal_price(text: &str) -> Option<Decimal> {
    let captures = price_pattern().captures(text)?;
    captures[1].replace(',', "").parse().ok()
}

/// Matches a raw judge reply against the domain's canonical options,
/// case-insensitively, preferring the most specific match. Replies matching
/// nothing fall back to the most negative option with `unparsed` set; a deal
/// reply without an extractable price counts as unparsed too, since no
/// sale-to-list ratio could be computed from it.
pub fn parse_feedback(catalog: &StrategyCatalog, text: &str) -> VerbalFeedback {
    let normalized = normalize(text);
    let mut best: Option<(&crate::catalog::FeedbackOption, usize)> = None;
    for option in &catalog.feedback().options {
        let full = option_key(&option.text);
        let mut candidates = vec![full.clone()];
        if let Some(relaxed) = relaxed_key(&full) {
            candidates.push(relaxed);
        }
        for key in candidates {
            if !key.is_empty() && normalized.contains(&key) {
                if best.map(|(_, len)| key.len() > len).unwrap_or(true) {
                    best = Some((option, key.len()));
                }
            }
        }
    }

    if let Some((option, _)) = best {
        let deal_price = if option.extracts_price { extract_deal_price(text) } else { None };
        if !option.extracts_price || deal_price.is_some() {
            return VerbalFeedback {
                domain: catalog.domain(),
                label: option.label.clone(),
                score: option.score,
                raw_text: text.to_string(),
                deal_price,
                unparsed: false,
            };
        }
    }

    let fallback = catalog.most_negative_option();
    VerbalFeedback {
        domain: catalog.domain(),
        label: fallback.label.clone(),
        score: fallback.score,
        raw_text: text.to_string(),
        deal_price: None,
        unparsed: true,
    }
}

/// The option table score carried by the parsed sample.
pub fn map_verbal_to_scalar(feedback: &VerbalFeedback) -> f64 {
    feedback.score
}

/// Arithmetic mean of the sampled scores.
pub fn aggregate_samples(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// (deal - seller_target) / (buyer_target - seller_target), unclamped.
/// 0 means a deal at the listing price, 1 a deal at the buyer's target.
pub fn sale_to_list_ratio(
    deal_price: Decimal,
    seller_target: Decimal,
    buyer_target: Decimal,
) -> Result<f64, RewardError> {
    if buyer_target == seller_target {
        return Err(RewardError::EqualTargets);
    }
    let numerator = (deal_price - seller_target).to_f64().unwrap_or(f64::NAN);
    let denominator = (buyer_target - seller_target).to_f64().unwrap_or(f64::NAN);
    Ok(numerator / denominator)
}

/// The conversation as the judge sees it: speaker-labeled utterances joined
/// inline, matching the few-shot exemplars in the judge templates.
pub fn conversation_text(state: &DialogueState, speakers: &SpeakerLabels) -> String {
    state
        .turns
        .iter()
        .map(|turn| {
            let label = match turn.speaker {
                Speaker::System => &speakers.system,
                Speaker::User => &speakers.user,
            };
            format!("{label}: {}", turn.text)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// The judge prompt: domain template with case fields and the serialized
/// conversation substituted.
pub fn build_reward_prompt(
    case: &CaseProfile,
    state: &DialogueState,
    templates: &TemplateSet,
    speakers: &SpeakerLabels,
) -> Result<Vec<ChatMessage>, RoleplayError> {
    let mut values = case_values(case);
    values.insert("conversation", conversation_text(state, speakers));
    let template = &templates.reward;
    let mut messages = Vec::with_capacity(template.messages.len());
    for message in &template.messages {
        let content = substitute(&template.name, &message.body, &values)?;
        messages.push(ChatMessage { role: message.role, content });
    }
    Ok(messages)
}

fn median(mut prices: Vec<Decimal>) -> Decimal {
    prices.sort();
    let mid = prices.len() / 2;
    if prices.len() % 2 == 1 {
        prices[mid]
    } else {
        (prices[mid - 1] + prices[mid]) / Decimal::from(2)
    }
}

/// Samples the judge once (temperature tau, l samples), aggregates the
/// mapped scores into v, and resolves episode status and reward:
/// completion when v clears the threshold, failure when the state has
/// reached the turn cap, otherwise an ongoing step penalty.
pub fn judge(
    gateway: &Gateway,
    config: &RewardConfig,
    case: &CaseProfile,
    state: &DialogueState,
    catalog: &StrategyCatalog,
    templates: &TemplateSet,
) -> Result<JudgeOutcome, RewardError> {
    let messages = build_reward_prompt(case, state, templates, catalog.speakers())?;
    let request = CompletionRequest {
        messages,
        temperature: config.tau,
        max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        n_samples: config.l,
        seed: None,
    };
    let outputs = gateway.complete(&request)?;
    let samples: Vec<VerbalFeedback> =
        outputs.iter().map(|text| parse_feedback(catalog, text)).collect();
    if samples.iter().all(|s| s.unparsed) {
        return Err(RewardError::AllUnparsed {
            count: samples.len(),
            example: samples.first().map(|s| s.raw_text.clone()).unwrap_or_default(),
        });
    }

    let scores: Vec<f64> = samples.iter().map(map_verbal_to_scalar).collect();
    let v = aggregate_samples(&scores);
    let epsilon = config.effective_epsilon(catalog);
    let completed = if config.strict_threshold { v > epsilon } else { v >= epsilon };
    let status = if completed {
        EpisodeStatus::GoalCompleted
    } else if state.turn_count >= config.max_turns {
        EpisodeStatus::GoalFailed
    } else {
        EpisodeStatus::OnGoing
    };

    let is_negotiation = catalog.domain() == DomainKind::Negotiation;
    let mut deal_price = None;
    let reward = match status {
        EpisodeStatus::OnGoing => config.step_penalty,
        EpisodeStatus::GoalCompleted if is_negotiation => {
            let prices: Vec<Decimal> = samples.iter().filter_map(|s| s.deal_price).collect();
            if prices.is_empty() {
                tracing::warn!(
                    case = %case.id,
                    "negotiation completed without any extracted deal price; assigning ratio 0"
                );
                0.0
            } else {
                let price = median(prices);
                deal_price = Some(price);
                negotiation_ratio(case, price)?
            }
        }
        EpisodeStatus::GoalCompleted => v,
        EpisodeStatus::GoalFailed if is_negotiation => match config.failed_deal_reward {
            FailedDealReward::Zero => 0.0,
            FailedDealReward::Score => v,
        },
        EpisodeStatus::GoalFailed => v,
    };

    Ok(JudgeOutcome { v, samples, status, reward, deal_price })
}

fn negotiation_ratio(case: &CaseProfile, deal: Decimal) -> Result<f64, RewardError> {
    match &case.details {
        crate::domain::CaseDetails::Negotiation {
            buyer_target_price, seller_target_price, ..
        } => sale_to_list_ratio(deal, *seller_target_price, *buyer_target_price),
        _ => unreachable!("negotiation reward computed for a negotiation case"),
    }
}
