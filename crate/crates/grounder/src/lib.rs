//! Text-decoupled, densely aligned referring-expression grounding.
//!
//! The crate splits referring expressions into five semantic components,
//! builds per-component position labels and ground-truth text distributions,
//! computes position- and semantic-aligned losses with exact gradients,
//! performs explicit combined inference, and ships a synthetic desk-scale
//! benchmark for end-to-end trend experiments.

pub mod align;
pub mod cli;
pub mod decouple;
pub mod deptree;
pub mod error;
pub mod inference;
pub mod losses;
pub mod numcore;
pub mod toybench;
pub mod vocab;

pub use error::{Error, Result};
