//! Dataset synthesis, experiment orchestration, evaluation and reporting.

pub mod config;
pub mod eval;
pub mod pipeline;
pub mod report;
pub mod task;
