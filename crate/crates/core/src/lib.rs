//! Core toolkit for verifiable computer-use environments.
//!
//! The crate is organised bottom-up:
//!
//! - [`state_document`]: the JSON-like state value, canonical bytes, digests and key paths.
//! - [`session_store`]: per-sid snapshots, injection actions, uploads and TTL collection.
//! - [`diff_engine`]: flat key-path diffs with atomic arrays and volatile-field masking.
//! - [`reward_harness`]: script execution with timeouts and the `REWARD:` output protocol.
//! - [`pattern_scanner`]: static detection of reward-hacking idioms in reward scripts.
//! - [`agreement_verifier`]: the five acceptance conditions and the REVIEW document.
//! - [`loop_orchestrator`]: generator/discriminator rounds, sandbox barrier, bundles.
//! - [`traj_slicer`]: fixed-budget training slices from long multimodal rollouts.
//! - [`gspo_kernel`]: group advantages, sequence-level ratios and the clipped objective.

pub mod agreement_verifier;
pub mod diff_engine;
pub mod gspo_kernel;
pub mod loop_orchestrator;
pub mod pattern_scanner;
pub mod reward_harness;
pub mod session_store;
pub mod state_document;
pub mod traj_slicer;
