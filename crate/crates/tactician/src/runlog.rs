//! Run persistence: the output directory layout, the manifest written
//! before any work starts, per-episode training logs, and transcript files.
//!
//! Every run directory is self-describing: `manifest.json` (written first)
//! snapshots the configuration, seed, and a content hash of the bundled
//! catalogs and templates, and lists checkpoints as they land, so an
//! interrupted run can be resumed from the last checkpoint and a finished
//! one can be audited or replayed.

use std::fs;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::domain::{EpisodeRecord, EpisodeStatus, Speaker};
use crate::gateway::sha256_hex;
use crate::policy::{save_checkpoint, PolicyParameters};
use crate::selfplay::{EpisodeLogRow, TrainSink};

#[derive(Debug, Error)]
pub enum RunlogError {
    #[error("run output error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to encode run output: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path} line {line}: {message}")]
    BadLine { path: String, line: usize, message: String },
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> RunlogError + '_ {
    move |source| RunlogError::Io { path: path.display().to_string(), source }
}

/// Content hash of every bundled asset (strategy catalogs and prompt
/// templates), so a manifest pins exactly which assets produced a run.
pub fn asset_fingerprint() -> String {
    let mut joined = String::new();
    for (name, content) in crate::catalog::EMBEDDED {
        joined.push_str(name);
        joined.push('\0');
        joined.push_str(content);
        joined.push('\0');
    }
    for (name, content) in crate::roleplay::EMBEDDED {
        joined.push_str(name);
        joined.push('\0');
        joined.push_str(content);
        joined.push('\0');
    }
    sha256_hex(&joined)
}

/// Well-known file locations inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn training_log(&self) -> PathBuf {
        self.root.join("training_log.jsonl")
    }

    pub fn checkpoint(&self, episode: u32) -> PathBuf {
        self.root.join(format!("ep{episode}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final.ckpt")
    }

    pub fn records(&self) -> PathBuf {
        self.root.join("records.json")
    }

    pub fn transcripts(&self) -> PathBuf {
        self.root.join("transcripts.jsonl")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    /// Request log shared by all three gateway roles; replaying it
    /// reproduces a run without touching any endpoint.
    pub fn request_log(&self) -> PathBuf {
        self.root.join("requests.jsonl")
    }
}

/// What produced a run directory: command, seed, config snapshot, asset
/// hash, and the checkpoints written so far.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_ms: u64,
    pub command: String,
    pub seed: u64,
    pub asset_fingerprint: String,
    pub checkpoints: Vec<String>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>, command: impl Into<String>, seed: u64, config: RunConfig) -> Self {
        let created_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        RunManifest {
            run_id: run_id.into(),
            created_ms,
            command: command.into(),
            seed,
            asset_fingerprint: asset_fingerprint(),
            checkpoints: Vec::new(),
            config,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), RunlogError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(io_at(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, RunlogError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One utterance in the transcript file. Strategy names ride on system
/// turns; the judge's score, the step reward, and the resulting status ride
/// on the user turn that completes each exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub case_id: String,
    pub turn_index: u32,
    pub speaker: Speaker,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<EpisodeStatus>,
}

/// Flattens one episode into transcript rows, one per utterance.
pub fn transcript_rows(episode: &EpisodeRecord) -> Vec<TranscriptRow> {
    let opening_len = episode.turns.len().saturating_sub(2 * episode.steps.len());
    episode
        .turns
        .iter()
        .map(|turn| {
            let mut row = TranscriptRow {
                case_id: episode.case_id.clone(),
                turn_index: turn.index,
                speaker: turn.speaker,
                strategy: turn.strategy.as_ref().map(|a| a.name.clone()),
                text: turn.text.clone(),
                v: None,
                reward: None,
                status: None,
            };
            let position = turn.index as usize;
            if position >= opening_len && (position - opening_len) % 2 == 1 {
                if let Some(step) = episode.steps.get((position - opening_len) / 2) {
                    row.v = step.v;
                    row.reward = Some(step.reward);
                    row.status = Some(step.status);
                }
            }
            row
        })
        .collect()
}

/// Writes all episodes' rows as JSONL.
pub fn write_transcripts(
    path: impl AsRef<Path>,
    episodes: &[EpisodeRecord],
) -> Result<(), RunlogError> {
    let path = path.as_ref();
    let mut out = String::new();
    for episode in episodes {
        for row in transcript_rows(episode) {
            out.push_str(&serde_json::to_string(&row)?);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(io_at(path))
}

/// Reads a transcript file back into rows, reporting the offending line on
/// parse failures.
pub fn read_transcripts(path: impl AsRef<Path>) -> Result<Vec<TranscriptRow>, RunlogError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| RunlogError::BadLine {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Reads a training log (JSONL of per-episode rows) back.
pub fn read_training_log(path: impl AsRef<Path>) -> Result<Vec<EpisodeLogRow>, RunlogError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| RunlogError::BadLine {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Training sink that materializes a run directory: the manifest lands
/// before anything else, every episode row is appended (and flushed) to the
/// training log, and each periodic checkpoint is saved and recorded in the
/// manifest so interrupted runs can resume from it.
pub struct RunWriter {
    paths: RunPaths,
    manifest: RunManifest,
    log: BufWriter<fs::File>,
}

impl RunWriter {
    pub fn create(root: impl Into<PathBuf>, manifest: RunManifest) -> Result<Self, RunlogError> {
        let paths = RunPaths::new(root);
        fs::create_dir_all(&paths.root).map_err(io_at(&paths.root))?;
        manifest.write(paths.manifest())?;
        let log_path = paths.training_log();
        let file = fs::File::create(&log_path).map_err(io_at(&log_path))?;
        Ok(RunWriter { paths, manifest, log: BufWriter::new(file) })
    }

    pub fn paths(&self) -> &RunPaths {
        &self.paths
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Saves the final parameters and records them in the manifest.
    pub fn save_final(&mut self, params: &PolicyParameters) -> Result<PathBuf, RunlogError> {
        let path = self.paths.final_checkpoint();
        save_checkpoint(params, &path)
            .map_err(|e| std::io::Error::other(e.to_string()))
            .map_err(io_at(&path))?;
        self.record_checkpoint("final.ckpt")?;
        Ok(path)
    }

    fn record_checkpoint(&mut self, name: &str) -> Result<(), RunlogError> {
        self.manifest.checkpoints.push(name.to_string());
        self.manifest.write(self.paths.manifest())
    }
}

impl TrainSink for RunWriter {
    fn on_episode(&mut self, row: &EpisodeLogRow) -> std::io::Result<()> {
        let line = serde_json::to_string(row).map_err(std::io::Error::other)?;
        self.log.write_all(line.as_bytes())?;
        self.log.write_all(b"\n")?;
        self.log.flush()
    }

    fn on_checkpoint(&mut self, episode: u32, params: &PolicyParameters) -> std::io::Result<()> {
        let path = self.paths.checkpoint(episode);
        save_checkpoint(params, &path).map_err(std::io::Error::other)?;
        self.record_checkpoint(&format!("ep{episode}.ckpt"))
            .map_err(std::io::Error::other)
    }
}
