//! Core library for learning maximally predictable long-only portfolios:
//! block out-of-bag random forests alternating with a constrained ridge
//! portfolio step, plus trading, evaluation and interpretation tools.

pub mod data;
pub mod forest;
pub mod interpret;
pub mod mace;
pub mod metrics;
pub mod ridge;
pub mod stats;
pub mod synth;
pub mod trading;
