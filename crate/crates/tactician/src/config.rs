//! Run configuration: one JSON document covering the three model endpoints,
//! the policy and its training, judging, and evaluation.
//!
//! Every field except the domain has a default, so a minimal config is just
//! `{"domain": "tutoring"}`. Validation never stops at the first mistake —
//! it collects every problem across all sections so one round-trip fixes
//! them all. Unknown fields are parse errors by design: credentials live in
//! the environment variable named by each backend's `api_key_env`, never in
//! the file, and silent typos are worse than loud ones.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::builtin_catalog;
use crate::domain::DomainKind;
use crate::eval::EvalConfig;
use crate::gateway::{BackendConfig, DEFAULT_MAX_NEW_TOKENS};
use crate::policy::{PolicyConfig, TrainConfig};
use crate::reward::RewardConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("config is invalid:\n  {}", problems.join("\n  "))]
    Invalid { problems: Vec<String> },
}

/// The complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Which dialogue problem this run plays. The only required field.
    pub domain: DomainKind,
    /// Normalized corpus (JSONL) the run draws cases from. Required by every
    /// command that needs cases; the CLI enforces presence per command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    #[serde(default)]
    pub backend_sys: BackendConfig,
    #[serde(default)]
    pub backend_usr: BackendConfig,
    #[serde(default)]
    pub backend_rwd: BackendConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Completion-length cap for the two role-playing endpoints.
    #[serde(default = "default_gen_max_new_tokens")]
    pub gen_max_new_tokens: u32,
}

fn default_gen_max_new_tokens() -> u32 {
    DEFAULT_MAX_NEW_TOKENS
}

impl RunConfig {
    /// A default configuration for one domain (scripted-friendly; backend
    /// fields must still be filled in or overridden for live endpoints).
    pub fn for_domain(domain: DomainKind) -> Self {
        RunConfig {
            domain,
            corpus: None,
            backend_sys: BackendConfig::default(),
            backend_usr: BackendConfig::default(),
            backend_rwd: BackendConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            reward: RewardConfig::default(),
            eval: EvalConfig::default(),
            gen_max_new_tokens: default_gen_max_new_tokens(),
        }
    }

    /// Reads and parses a config file; call `validate` afterwards.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    /// Every structural problem in the document, across all sections.
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        problems.extend(self.backend_sys.problems("backend_sys"));
        problems.extend(self.backend_usr.problems("backend_usr"));
        problems.extend(self.backend_rwd.problems("backend_rwd"));
        problems.extend(self.offline_problems());
        problems
    }

    /// Problems in the sections that matter even when no completion
    /// endpoint is contacted (supervised fitting, report formatting).
    pub fn offline_problems(&self) -> Vec<String> {
        let mut problems = Vec::new();

        if self.policy.feature_dim == 0 {
            problems.push("policy.feature_dim must be positive".into());
        }
        if self.policy.window == 0 {
            problems.push("policy.window must be at least 1".into());
        }

        if !(self.train.sft_learning_rate.is_finite() && self.train.sft_learning_rate > 0.0) {
            problems.push(format!(
                "train.sft_learning_rate must be positive, got {}",
                self.train.sft_learning_rate
            ));
        }
        if !(self.train.rl_learning_rate.is_finite() && self.train.rl_learning_rate > 0.0) {
            problems.push(format!(
                "train.rl_learning_rate must be positive, got {}",
                self.train.rl_learning_rate
            ));
        }
        if !(self.train.gamma.is_finite() && self.train.gamma > 0.0 && self.train.gamma <= 1.0) {
            problems.push(format!("train.gamma must lie in (0, 1], got {}", self.train.gamma));
        }

        problems.extend(self.reward.problems(builtin_catalog(self.domain)));

        if self.gen_max_new_tokens == 0 {
            problems.push("gen_max_new_tokens must be at least 1".into());
        }
        problems
    }

    /// Errors with every problem at once, or passes.
    pub fn validate(&self) -> Result<(), ConfigError> {
        Self::check(self.problems())
    }

    /// Like `validate`, but ignores the backend sections; for commands that
    /// never contact a completion endpoint.
    pub fn validate_offline(&self) -> Result<(), ConfigError> {
        Self::check(self.offline_problems())
    }

    fn check(problems: Vec<String>) -> Result<(), ConfigError> {
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid { problems })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::BackendKind;

    #[test]
    fn minimal_document_parses_with_paper_defaults() {
        let config: RunConfig = serde_json::from_str(r#"{"domain":"emotional_support"}"#).unwrap();
        assert_eq!(config.domain, DomainKind::EmotionalSupport);
        assert_eq!(config.train.sft_learning_rate, 0.1);
        assert_eq!(config.train.rl_learning_rate, 0.01);
        assert_eq!(config.train.gamma, 0.999);
        assert_eq!(config.train.sft_epochs, 10);
        assert_eq!(config.train.rl_episodes, 1000);
        assert_eq!(config.reward.l, 10);
        assert_eq!(config.reward.tau, 1.1);
        assert_eq!(config.reward.step_penalty, -0.1);
        assert_eq!(config.reward.max_turns, 8);
        assert_eq!(config.reward.epsilon, None, "threshold defaults to the domain catalog");
        assert_eq!(config.gen_max_new_tokens, 32);
        assert_eq!(config.backend_sys.kind, BackendKind::HttpChat);
    }

    #[test]
    fn domain_is_required() {
        assert!(serde_json::from_str::<RunConfig>("{}").is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(
            r#"{"domain":"tutoring","api_key":"sk-123"}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("api_key"));

        let err = serde_json::from_str::<RunConfig>(
            r#"{"domain":"tutoring","backend_sys":{"kind":"http_chat","api_key":"sk-123"}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("api_key"));
    }

    #[test]
    fn validation_collects_every_problem_at_once() {
        let mut config = RunConfig::for_domain(DomainKind::Tutoring);
        config.backend_sys.kind = BackendKind::Scripted; // missing script_path
        config.policy.window = 0;
        config.train.gamma = 1.5;
        config.train.rl_learning_rate = -0.1;
        config.reward.l = 0;
        config.reward.epsilon = Some(2.0);

        let err = config.validate().unwrap_err();
        let ConfigError::Invalid { problems } = err else { panic!("expected Invalid") };
        assert!(problems.len() >= 6, "got {problems:#?}");
        assert!(problems.iter().any(|p| p.contains("backend_sys")));
        assert!(problems.iter().any(|p| p.contains("policy.window")));
        assert!(problems.iter().any(|p| p.contains("train.gamma")));
        assert!(problems.iter().any(|p| p.contains("rl_learning_rate")));
        assert!(problems.iter().any(|p| p.contains("reward.l")));
        assert!(problems.iter().any(|p| p.contains("reward.epsilon")));
    }

    #[test]
    fn scripted_backends_validate_and_round_trip() {
        let mut config = RunConfig::for_domain(DomainKind::Negotiation);
        config.backend_sys = BackendConfig::scripted("fixtures/sys.jsonl");
        config.backend_usr = BackendConfig::scripted("fixtures/usr.jsonl");
        config.backend_rwd = BackendConfig::scripted("fixtures/rwd.jsonl");
        config.corpus = Some("data/cb.jsonl".into());
        config.validate().unwrap();

        let text = serde_json::to_string_pretty(&config).unwrap();
        let reparsed: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&reparsed).unwrap(), serde_json::to_string(&config).unwrap());
    }

    #[test]
    fn loading_from_disk_reports_the_path_on_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        let err = RunConfig::from_path(&missing).unwrap_err();
        assert!(matches!(err, ConfigError::Io { .. }));

        let broken = dir.path().join("broken.json");
        fs::write(&broken, "{").unwrap();
        let err = RunConfig::from_path(&broken).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));

        let good = dir.path().join("good.json");
        let script = r#""kind":"scripted","script_path":"s.jsonl""#;
        fs::write(
            &good,
            format!(
                r#"{{"domain":"tutoring","backend_sys":{{{script}}},"backend_usr":{{{script}}},"backend_rwd":{{{script}}}}}"#
            ),
        )
        .unwrap();
        let config = RunConfig::from_path(&good).unwrap();
        config.validate().unwrap();

        // A minimal document parses but fails validation on the empty
        // http endpoints, naming each backend section.
        let minimal = RunConfig::for_domain(DomainKind::Tutoring);
        let ConfigError::Invalid { problems } = minimal.validate().unwrap_err() else {
            panic!("expected Invalid");
        };
        assert!(problems.iter().any(|p| p.contains("backend_rwd") && p.contains("base_url")));
    }
}
