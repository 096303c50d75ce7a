//! Evaluation metrics, the experiment suite and its outputs.

pub mod experiments;
pub mod metrics;
pub mod output;

pub use experiments::*;
pub use metrics::*;
pub use output::*;
