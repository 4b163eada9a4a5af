//! Experiment orchestration for prompt-tuned distillation: configuration,
//! per-seed run directories, stages and cross-seed reports.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;
