//! Experiment harness for Hamiltonian GP models: configuration, end-to-end
//! runs, metrics, the bound-timing benchmark and result files.

pub mod aggregate;
pub mod bench;
pub mod config;
pub mod io;
pub mod metrics;
pub mod runner;

pub use config::{Mode, RunConfig};
pub use metrics::MetricsRecord;
pub use runner::{run, run_task1, run_task2, run_toy, RunOutput};
