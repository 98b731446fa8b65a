//! Staged triage and advice engine for rural health workers.

pub mod backend;
pub mod bench;
pub mod clock;
pub mod config;
pub mod council;
pub mod domain;
pub mod pipeline;
pub mod refine;
pub mod text;
pub mod translation;
pub mod triage;
