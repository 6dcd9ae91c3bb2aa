//! Two-stage permutation re-ranking.
//!
//! Candidate permutations of a ranking list are first pruned by a SimHash
//! selector ([`fpsm`]) that compares each candidate with the user's recently
//! clicked permutations, then scored by an attention-based list-wise CTR
//! model ([`ocpm`]). Both stages share one embedding table ([`embedding`]),
//! and [`training`] fits them with a cross-entropy loss plus a contrastive
//! term. [`data`] provides a synthetic world with a known best permutation so
//! hit ratio can be measured, and [`eval`] holds metrics, checkpoints and the
//! experiment drivers used by the `pier` binary.

pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fpsm;
pub mod numerics;
pub mod ocpm;
pub mod permgen;
pub mod training;

pub use error::{PierError, Result};
