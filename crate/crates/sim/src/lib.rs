//! Seeded simulator for the arena: synthetic Bradley–Terry voters drive
//! battles through the real pairing, voting and rating pipeline.

pub mod compare;
pub mod exec;
pub mod latency;
pub mod metrics;
pub mod run;
pub mod scenario;

use std::path::PathBuf;

use thiserror::Error;

pub use compare::{compare_params, compare_with, parse_variants, Comparison, RunMetrics, Variant, VariantResult};
pub use exec::Exec;
pub use latency::{measure_latency, LatencyOptions, LatencyReport};
pub use run::{run_scenario, ModelReport, SimReport, TickRecord, Trajectory};
pub use scenario::{FocusPair, Freeze, LateJoin, SimScenario, SkillDrift, VoterModel};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Arena(#[from] arena_core::ArenaError),
    #[error(transparent)]
    Pipeline(#[from] arena_core::PipelineError),
    #[error(transparent)]
    Provider(#[from] arena_core::ProviderError),
    #[error(transparent)]
    Log(#[from] arena_core::LogError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
