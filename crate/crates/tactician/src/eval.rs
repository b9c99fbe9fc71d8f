//! Interactive evaluation harness and metric computation.
//!
//! Evaluation replays the self-play loop in greedy mode over held-out cases
//! and reduces the episode records to three headline numbers — success rate
//! (SR), average turns (AT), and mean sale-to-list ratio (SL%) — plus the
//! per-turn SR@t and SL%@t curves and relative-to-baseline curves that the
//! plot-ready CSV report carries. Invalid episodes (aborted by a gateway
//! failure) are excluded from every metric and reported separately.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Split;
use crate::domain::{CaseProfile, EpisodeRecord, EpisodeStatus};
use crate::selfplay::{run_episode, EpisodeContext, EpisodeMode, Planner};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("failed to write report {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to serialize report: {0}")]
    Json(#[from] serde_json::Error),
}

/// How failed episodes enter the average-turns metric: as the full turn cap
/// (keeps AT finite and bounded by the cap) or excluded from the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AtFailureConvention {
    #[default]
    MaxTurn,
    Exclude,
}

/// Evaluation-harness settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub at_failure_convention: AtFailureConvention,
    /// Which corpus split `evaluate` runs on.
    #[serde(default = "default_eval_split")]
    pub split: Split,
}

fn default_eval_split() -> Split {
    Split::Test
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { at_failure_convention: AtFailureConvention::default(), split: Split::Test }
    }
}

/// One case's evaluation outcome. `success` holds exactly when
/// `completion_turn` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub case_id: String,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_turn: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sl_ratio: Option<f64>,
    pub invalid: bool,
}

/// Reduces a finished episode to its evaluation outcome.
pub fn eval_record(episode: &EpisodeRecord) -> EvalRecord {
    EvalRecord {
        case_id: episode.case_id.clone(),
        success: episode.final_status == EpisodeStatus::GoalCompleted,
        completion_turn: episode.completion_turn,
        sl_ratio: episode.sl_ratio,
        invalid: episode.invalid.is_some(),
    }
}

/// Evaluation output: per-case metrics plus the full episode transcripts.
pub struct EvalRun {
    pub records: Vec<EvalRecord>,
    pub episodes: Vec<EpisodeRecord>,
}

/// Plays every case once in greedy mode. Deterministic given scripted
/// backends; gateway failures flag the affected record invalid instead of
/// aborting the sweep.
pub fn evaluate_policy(
    planner: &Planner,
    ctx: &EpisodeContext,
    cases: &[CaseProfile],
) -> EvalRun {
    let mut records = Vec::with_capacity(cases.len());
    let mut episodes = Vec::with_capacity(cases.len());
    for case in cases {
        let episode = run_episode(planner, ctx, case, EpisodeMode::Eval);
        records.push(eval_record(&episode));
        episodes.push(episode);
    }
    EvalRun { records, episodes }
}

fn valid(records: &[EvalRecord]) -> impl Iterator<Item = &EvalRecord> {
    records.iter().filter(|r| !r.invalid)
}

/// Fraction of valid records whose goal completed within `t` turns.
/// Zero at t = 0 and over empty record sets.
pub fn success_rate_at(records: &[EvalRecord], t: u32) -> f64 {
    let mut total = 0usize;
    let mut hits = 0usize;
    for record in valid(records) {
        total += 1;
        if record.completion_turn.map(|turn| turn <= t).unwrap_or(false) {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Mean sale-to-list ratio counting only completions within `t` turns;
/// later completions and failures contribute 0.
pub fn sl_ratio_at(records: &[EvalRecord], t: u32) -> f64 {
    let mut total = 0usize;
    let mut sum = 0.0;
    for record in valid(records) {
        total += 1;
        if record.completion_turn.map(|turn| turn <= t).unwrap_or(false) {
            sum += record.sl_ratio.unwrap_or(0.0);
        }
    }
    if total == 0 {
        0.0
    } else {
        sum / total as f64
    }
}

/// Mean turns to completion. Failures contribute `max_turns` under the
/// default convention or drop out under `Exclude`; with nothing to average
/// the result is `max_turns`.
pub fn average_turns(
    records: &[EvalRecord],
    max_turns: u32,
    convention: AtFailureConvention,
) -> f64 {
    let mut total = 0usize;
    let mut sum = 0.0;
    for record in valid(records) {
        match (record.completion_turn, convention) {
            (Some(turn), _) => {
                total += 1;
                sum += turn as f64;
            }
            (None, AtFailureConvention::MaxTurn) => {
                total += 1;
                sum += max_turns as f64;
            }
            (None, AtFailureConvention::Exclude) => {}
        }
    }
    if total == 0 {
        max_turns as f64
    } else {
        sum / total as f64
    }
}

/// Mean sale-to-list ratio over valid records, failures contributing 0.
pub fn average_sl_ratio(records: &[EvalRecord]) -> f64 {
    let mut total = 0usize;
    let mut sum = 0.0;
    for record in valid(records) {
        total += 1;
        if record.success {
            sum += record.sl_ratio.unwrap_or(0.0);
        }
    }
    if total == 0 {
        0.0
    } else {
        sum / total as f64
    }
}

/// Which per-turn curve a relative comparison subtracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMetric {
    Sr,
    Sl,
}

impl std::fmt::Display for CurveMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CurveMetric::Sr => "sr",
            CurveMetric::Sl => "sl",
        })
    }
}

/// Per-turn metric difference against a baseline method, for t in
/// 1..=max_turns.
pub fn relative_curve(
    records: &[EvalRecord],
    baseline: &[EvalRecord],
    metric: CurveMetric,
    max_turns: u32,
) -> Vec<(u32, f64)> {
    let at = |set: &[EvalRecord], t: u32| match metric {
        CurveMetric::Sr => success_rate_at(set, t),
        CurveMetric::Sl => sl_ratio_at(set, t),
    };
    (1..=max_turns).map(|t| (t, at(records, t) - at(baseline, t))).collect()
}

/// A named relative curve destined for the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelativeCurve {
    pub metric: CurveMetric,
    pub baseline: String,
    pub points: Vec<(u32, f64)>,
}

/// Headline metrics plus the per-turn curves (index 0 holds t = 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub sr: f64,
    pub at: f64,
    pub sl: f64,
    pub n_cases: usize,
    pub n_invalid: usize,
    pub sr_at: Vec<f64>,
    pub sl_at: Vec<f64>,
}

/// Aggregates records into the summary: SR and SL at the cap, AT under the
/// chosen failure convention, and both curves over t = 1..=max_turns.
pub fn summarize(
    records: &[EvalRecord],
    max_turns: u32,
    convention: AtFailureConvention,
) -> Summary {
    Summary {
        sr: success_rate_at(records, max_turns),
        at: average_turns(records, max_turns, convention),
        sl: average_sl_ratio(records),
        n_cases: records.len(),
        n_invalid: records.iter().filter(|r| r.invalid).count(),
        sr_at: (1..=max_turns).map(|t| success_rate_at(records, t)).collect(),
        sl_at: (1..=max_turns).map(|t| sl_ratio_at(records, t)).collect(),
    }
}

/// Report encodings: plot-ready long-format CSV or the summary JSON.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// The long-format CSV: header `method,t,metric,value`, then the method's
/// sr and sl curves, its at value (reported at the cap), and any relative
/// curves as `relative_sr`/`relative_sl` rows. Row order is deterministic.
pub fn report_csv(
    method: &str,
    summary: &Summary,
    curves: &[RelativeCurve],
    max_turns: u32,
) -> String {
    let mut out = String::from("method,t,metric,value\n");
    for (i, value) in summary.sr_at.iter().enumerate() {
        out.push_str(&format!("{method},{},sr,{value}\n", i as u32 + 1));
    }
    for (i, value) in summary.sl_at.iter().enumerate() {
        out.push_str(&format!("{method},{},sl,{value}\n", i as u32 + 1));
    }
    out.push_str(&format!("{method},{max_turns},at,{}\n", summary.at));
    for curve in curves {
        for (t, delta) in &curve.points {
            out.push_str(&format!("{method},{t},relative_{},{delta}\n", curve.metric));
        }
    }
    out
}

/// Writes the report file: JSON carries the summary document, CSV the
/// long-format table from `report_csv`.
pub fn emit_report(
    method: &str,
    summary: &Summary,
    curves: &[RelativeCurve],
    max_turns: u32,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<(), EvalError> {
    let path = path.as_ref();
    let body = match format {
        ReportFormat::Json => {
            let mut text = serde_json::to_string_pretty(summary)?;
            text.push('\n');
            text
        }
        ReportFormat::Csv => report_csv(method, summary, curves, max_turns),
    };
    fs::write(path, body).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}
