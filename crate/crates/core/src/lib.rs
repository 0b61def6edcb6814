//! Counterfactual-simulation transfer for offline RL.
//!
//! A source policy solved on one obstacle layout is rolled out on its own
//! layout (factual data) and on intervened layouts with resampled obstacles
//! (counterfactual data). Each intervention is scored by its average
//! treatment effect on total return, trajectories are weighted by a softmax
//! over those effects, and a small decision transformer is trained on the
//! weighted data and evaluated on unseen target layouts.

pub mod data;
pub mod dt;
pub mod error;
pub mod experiment;
pub mod gridworld;
pub mod policy;
pub mod seed;

pub use error::{CfdtError, Result};
