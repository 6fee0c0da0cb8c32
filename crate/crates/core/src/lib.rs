// SPDX-License-Identifier: MIT OR Apache-2.0

//! State-tracking tasks for language models and the tooling to probe them.
//!
//! - [`dfa`]: random automata, trajectories, validation.
//! - [`tasks`]: prompt renderers and exact oracles for box tracking,
//!   abstract DFA walks and the fruit store.
//! - [`counterfactual`]: clean/corrupted prompt pairs.
//! - [`model`]: the instrumented-model contract, a tokenizer and a synthetic
//!   model whose patching results are known in advance.
//! - [`patching`]: residual and head patching grids, attention aggregation.
//!
//! Analysis types are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod counterfactual;
pub mod dfa;
pub mod model;
pub mod num;
pub mod patching;
pub mod rng;
pub mod tasks;

pub use counterfactual::{CounterfactualPair, PairRecord, Scheme};
pub use dfa::{Dfa, StateId, ActionId, Trajectory};
pub use model::{InstrumentedModel, ModelInfo, SyntheticModel};
pub use num::Scalar;
pub use tasks::{Domain, TaskInstance};

/// Patching grid with `f64` cells.
pub type PatchingResult = patching::PatchGrid<f64>;
/// Patching grid with `f32` cells.
pub type PatchingResultF32 = patching::PatchGrid<f32>;
/// Attention aggregate with `f64` weights.
pub type AttentionSummary = patching::AttentionProfile<f64>;
/// Attention aggregate with `f32` weights.
pub type AttentionSummaryF32 = patching::AttentionProfile<f32>;
