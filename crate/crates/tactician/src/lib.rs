//! Trainable dialogue-strategy planner for goal-oriented conversations.
//!
//! The crate trains a small tunable policy that picks the next dialogue
//! strategy (negotiation move, counselling technique, tutoring tactic) for a
//! frozen response-generating LLM, then measures how well the resulting agent
//! reaches its goal in live self-play against an LLM user simulator, with an
//! LLM judge converting verbal progress verdicts into scalar rewards.
//!
//! Module map:
//! - [`domain`]: cases, turns, dialogue state, episode records.
//! - [`catalog`]: per-domain strategy sets and judge option tables (data files).
//! - [`policy`]: feature hashing, softmax policy, supervised and REINFORCE updates, checkpoints.
//! - [`gateway`]: chat-completion backends (HTTP, scripted, replay) with retries, pacing, request log.
//! - [`roleplay`]: prompt templates and turn generation for both players.
//! - [`reward`]: judge prompting, verbal-to-scalar mapping, episode status and rewards.
//! - [`selfplay`]: the episode loop, RL training driver, supervised training driver.
//! - [`eval`]: success-rate/turn-count/sale-ratio metrics and report emission.
//! - [`corpus`], [`config`], [`runlog`]: normalized corpus ingestion, run configuration, run artifacts.

pub mod catalog;
pub mod config;
pub mod corpus;
pub mod domain;
pub mod eval;
pub mod gateway;
pub mod policy;
pub mod reward;
pub mod roleplay;
pub mod runlog;
pub mod selfplay;
