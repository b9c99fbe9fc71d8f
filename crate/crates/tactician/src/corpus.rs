//! Normalized dialogue-corpus ingestion.
//!
//! The three public source datasets ship in heterogeneous formats, so the
//! framework consumes a single normalized JSONL schema instead: one record
//! per line holding the case profile, its split, and the annotated dialogue
//! with strategy labels (by name) on system turns. Loading resolves labels
//! against the built-in strategy catalog and reports every schema problem at
//! once, with line numbers.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::builtin_catalog;
use crate::domain::{CaseProfile, DomainKind, Speaker, Turn};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus {path} is invalid:\n  {}", problems.join("\n  "))]
    Invalid { path: String, problems: Vec<String> },
    #[error("failed to write corpus: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Which partition a case belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        };
        f.write_str(name)
    }
}

/// One annotated dialogue: the case it plays out, its split assignment, and
/// the turns with resolved strategy actions on labeled system turns.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub case: CaseProfile,
    pub split: Split,
    pub dialogue: Vec<Turn>,
}

/// On-disk turn shape: strategies are referenced by catalog name.
#[derive(Serialize, Deserialize)]
struct WireTurn {
    speaker: Speaker,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strategy: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    case: CaseProfile,
    split: Split,
    dialogue: Vec<WireTurn>,
}

/// Loads and validates a JSONL corpus for one domain. All problems are
/// collected and reported together: malformed lines, cases from the wrong
/// domain, invalid case fields, duplicate case ids, strategies on user
/// turns, and strategy names missing from the domain catalog.
pub fn load_corpus(path: impl AsRef<Path>, domain: DomainKind) -> Result<Vec<CorpusRecord>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;

    let catalog = builtin_catalog(domain);
    let mut problems = Vec::new();
    let mut seen_ids = BTreeSet::new();
    let mut records = Vec::new();

    for (line_index, line) in text.lines().enumerate() {
        let line_no = line_index + 1;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireRecord = match serde_json::from_str(line) {
            Ok(wire) => wire,
            Err(err) => {
                problems.push(format!("line {line_no}: {err}"));
                continue;
            }
        };

        if wire.case.domain() != domain {
            problems.push(format!(
                "line {line_no}: case {:?} belongs to domain {}, expected {}",
                wire.case.id,
                wire.case.domain(),
                domain
            ));
            continue;
        }
        if let Err(err) = wire.case.validate() {
            problems.push(format!("line {line_no}: case {:?}: {err}", wire.case.id));
        }
        if !seen_ids.insert(wire.case.id.clone()) {
            problems.push(format!(
                "line {line_no}: duplicate case id {:?}; splits must partition cases",
                wire.case.id
            ));
        }

        let mut dialogue = Vec::with_capacity(wire.dialogue.len());
        for (turn_index, turn) in wire.dialogue.into_iter().enumerate() {
            let strategy = match (&turn.speaker, turn.strategy) {
                (Speaker::User, Some(name)) => {
                    problems.push(format!(
                        "line {line_no}: turn {turn_index} is a user turn but carries strategy {name:?}"
                    ));
                    None
                }
                (Speaker::System, Some(name)) => match catalog.action_by_name(&name) {
                    Some(action) => Some(action.clone()),
                    None => {
                        problems.push(format!(
                            "line {line_no}: turn {turn_index}: strategy {name:?} is not in the {domain} catalog"
                        ));
                        None
                    }
                },
                (_, None) => None,
            };
            dialogue.push(Turn {
                speaker: turn.speaker,
                text: turn.text,
                strategy,
                index: turn_index as u32,
            });
        }

        records.push(CorpusRecord { case: wire.case, split: wire.split, dialogue });
    }

    if problems.is_empty() {
        Ok(records)
    } else {
        Err(CorpusError::Invalid { path: path.display().to_string(), problems })
    }
}

/// Writes records back to the normalized JSONL form (strategies by name).
/// Loading what this writes reproduces the records exactly.
pub fn write_corpus(path: impl AsRef<Path>, records: &[CorpusRecord]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut out = String::new();
    for record in records {
        let wire = WireRecord {
            case: record.case.clone(),
            split: record.split,
            dialogue: record
                .dialogue
                .iter()
                .map(|turn| WireTurn {
                    speaker: turn.speaker,
                    text: turn.text.clone(),
                    strategy: turn.strategy.as_ref().map(|a| a.name.clone()),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&wire)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// The case profiles assigned to one split, in file order.
pub fn split_cases(records: &[CorpusRecord], split: Split) -> Vec<CaseProfile> {
    records.iter().filter(|r| r.split == split).map(|r| r.case.clone()).collect()
}
