//! Experiment configuration, Monte-Carlo replication, lemma verification
//! and grid sweeps.

pub mod config;
pub mod experiment;
pub mod seeds;
pub mod sweep;
pub mod verify;

pub use config::{parse_config, ExperimentConfig, GammaRule, OutputFormat, TRule};
pub use experiment::{
    run_experiment, run_experiment_with_workers, simulate_trajectory, Estimate, RiskReport,
};
pub use seeds::derive_seed;
pub use sweep::{parse_grid, sweep, GridConfig, SweepRow};
pub use verify::{verify_lemmas, verify_lemmas_with_workers, CheckRow, VerificationTable};
