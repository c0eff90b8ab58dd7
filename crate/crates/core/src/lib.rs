//! Federated incremental semantic segmentation simulator.

pub mod distill;
pub mod error;
pub mod federation;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod monitor;
pub mod pseudo_label;
pub mod synth_data;

pub use error::{FissError, Result};

pub use federation::{run_experiment, ExperimentResult, FederationSettings, Method};
pub use harness::{parse_config, ExperimentConfig};
pub use model::{ModelParams, ModelShape};
