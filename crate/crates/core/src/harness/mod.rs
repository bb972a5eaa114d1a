//! Experiment configuration, runs, scoring and plots.

pub mod case_study;
pub mod config;
pub mod gradcheck;
pub mod oracle_check;
pub mod run;
pub mod score;
pub mod svg;
