//! Strategy catalogs: the per-domain action sets with their natural-language
//! instructions, plus the judge's canonical feedback options and speaker
//! labels. Catalogs are data files so new domains ship as files, not code.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainKind, StrategyAction};

pub const NEGOTIATION_CATALOG: &str = include_str!("../assets/catalogs/negotiation.json");
pub const EMOTIONAL_SUPPORT_CATALOG: &str =
    include_str!("../assets/catalogs/emotional_support.json");
pub const TUTORING_CATALOG: &str = include_str!("../assets/catalogs/tutoring.json");

/// Embedded catalog sources in fixed order, used for the run-manifest content
/// fingerprint.
pub const EMBEDDED: [(&str, &str); 3] = [
    ("catalogs/negotiation.json", NEGOTIATION_CATALOG),
    ("catalogs/emotional_support.json", EMOTIONAL_SUPPORT_CATALOG),
    ("catalogs/tutoring.json", TUTORING_CATALOG),
];

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("catalog for {domain} must list actions with ids 0..{expected}, got {got}")]
    BadActionList { domain: DomainKind, expected: usize, got: usize },
    #[error("catalog action {index} has id {id}, expected {index}")]
    NonContiguousIds { index: usize, id: usize },
    #[error("catalog feedback for {0} needs at least one option")]
    EmptyFeedback(DomainKind),
    #[error("io error reading catalog: {0}")]
    Io(#[from] std::io::Error),
}

/// Labels used when a conversation is serialized as text for the judge, and
/// when stripping echoed role prefixes from generated turns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerLabels {
    pub system: String,
    pub user: String,
}

/// One canonical judge verdict: the sentence the judge is allowed to reply
/// with, its scalar score, and whether a deal price is embedded in it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackOption {
    pub label: String,
    pub text: String,
    pub score: f64,
    #[serde(default)]
    pub extracts_price: bool,
}

/// The domain's judge option table plus its goal-completion threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackSpec {
    pub epsilon: f64,
    pub options: Vec<FeedbackOption>,
}

#[derive(Debug, Clone, Deserialize)]
struct CatalogFile {
    domain: DomainKind,
    speakers: SpeakerLabels,
    actions: Vec<CatalogAction>,
    feedback: FeedbackSpec,
}

#[derive(Debug, Clone, Deserialize)]
struct CatalogAction {
    id: usize,
    name: String,
    instruction: String,
}

#[derive(Debug, Clone)]
pub struct StrategyCatalog {
    domain: DomainKind,
    speakers: SpeakerLabels,
    actions: Vec<StrategyAction>,
    by_name: HashMap<String, usize>,
    feedback: FeedbackSpec,
}

impl StrategyCatalog {
    pub fn from_json(json: &str) -> Result<Self, CatalogError> {
        let file: CatalogFile = serde_json::from_str(json)?;
        let expected = file.domain.action_count();
        if file.actions.len() != expected {
            return Err(CatalogError::BadActionList {
                domain: file.domain,
                expected,
                got: file.actions.len(),
            });
        }
        for (index, action) in file.actions.iter().enumerate() {
            if action.id != index {
                return Err(CatalogError::NonContiguousIds { index, id: action.id });
            }
        }
        if file.feedback.options.is_empty() {
            return Err(CatalogError::EmptyFeedback(file.domain));
        }
        let actions: Vec<StrategyAction> = file
            .actions
            .into_iter()
            .map(|a| StrategyAction {
                domain: file.domain,
                id: a.id,
                name: a.name,
                instruction: a.instruction,
            })
            .collect();
        let by_name = actions.iter().map(|a| (a.name.clone(), a.id)).collect();
        Ok(StrategyCatalog {
            domain: file.domain,
            speakers: file.speakers,
            actions,
            by_name,
            feedback: file.feedback,
        })
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, CatalogError> {
        StrategyCatalog::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn domain(&self) -> DomainKind {
        self.domain
    }

    pub fn speakers(&self) -> &SpeakerLabels {
        &self.speakers
    }

    pub fn actions(&self) -> &[StrategyAction] {
        &self.actions
    }

    pub fn action(&self, id: usize) -> Option<&StrategyAction> {
        self.actions.get(id)
    }

    pub fn action_by_name(&self, name: &str) -> Option<&StrategyAction> {
        self.by_name.get(name).map(|&id| &self.actions[id])
    }

    pub fn action_names(&self) -> Vec<String> {
        self.actions.iter().map(|a| a.name.clone()).collect()
    }

    pub fn feedback(&self) -> &FeedbackSpec {
        &self.feedback
    }

    /// Fallback option for unparseable judge output: the lowest-scoring one.
    pub fn most_negative_option(&self) -> &FeedbackOption {
        self.feedback
            .options
            .iter()
            .min_by(|a, b| a.score.total_cmp(&b.score))
            .expect("catalog validated non-empty")
    }
}

/// The built-in catalog for a domain, parsed once from the embedded data.
pub fn builtin_catalog(domain: DomainKind) -> &'static StrategyCatalog {
    static CATALOGS: OnceLock<[StrategyCatalog; 3]> = OnceLock::new();
    let all = CATALOGS.get_or_init(|| {
        [
            StrategyCatalog::from_json(NEGOTIATION_CATALOG).expect("embedded negotiation catalog"),
            StrategyCatalog::from_json(EMOTIONAL_SUPPORT_CATALOG)
                .expect("embedded emotional_support catalog"),
            StrategyCatalog::from_json(TUTORING_CATALOG).expect("embedded tutoring catalog"),
        ]
    });
    match domain {
        DomainKind::Negotiation => &all[0],
        DomainKind::EmotionalSupport => &all[1],
        DomainKind::Tutoring => &all[2],
    }
}

/// The full ordered strategy list for a domain, instructions verbatim.
pub fn builtin_strategy_set(domain: DomainKind) -> &'static [StrategyAction] {
    builtin_catalog(domain).actions()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_set_sizes() {
        assert_eq!(builtin_strategy_set(DomainKind::Negotiation).len(), 11);
        assert_eq!(builtin_strategy_set(DomainKind::EmotionalSupport).len(), 8);
        assert_eq!(builtin_strategy_set(DomainKind::Tutoring).len(), 5);
    }

    #[test]
    fn negotiation_first_action() {
        let actions = builtin_strategy_set(DomainKind::Negotiation);
        assert_eq!(actions[0].name, "Greetings");
        assert_eq!(actions[0].instruction, "Please say hello or chat randomly.");
    }

    #[test]
    fn support_question_instruction() {
        let catalog = builtin_catalog(DomainKind::EmotionalSupport);
        let q = catalog.action_by_name("Question").unwrap();
        assert_eq!(
            q.instruction,
            "The Therapist asks the Patient to elaborate on the situation they just described."
        );
    }

    #[test]
    fn tutoring_hint_instruction() {
        let catalog = builtin_catalog(DomainKind::Tutoring);
        let hint = catalog.action_by_name("Hint").unwrap();
        assert_eq!(hint.instruction, "The Teacher provides knowledge to the Student via a hint.");
    }

    #[test]
    fn ids_are_positional() {
        for domain in DomainKind::ALL {
            for (i, action) in builtin_strategy_set(domain).iter().enumerate() {
                assert_eq!(action.id, i);
                assert_eq!(action.domain, domain);
            }
        }
    }

    #[test]
    fn most_negative_options() {
        assert_eq!(
            builtin_catalog(DomainKind::Negotiation).most_negative_option().label,
            "no_deal"
        );
        assert_eq!(
            builtin_catalog(DomainKind::EmotionalSupport).most_negative_option().label,
            "feels_worse"
        );
        assert_eq!(
            builtin_catalog(DomainKind::Tutoring).most_negative_option().label,
            "incorrect_translation"
        );
    }

    #[test]
    fn epsilon_defaults_per_domain() {
        assert_eq!(builtin_catalog(DomainKind::Negotiation).feedback().epsilon, 1.0);
        assert_eq!(builtin_catalog(DomainKind::EmotionalSupport).feedback().epsilon, 0.5);
        assert_eq!(builtin_catalog(DomainKind::Tutoring).feedback().epsilon, 1.0);
    }
}
