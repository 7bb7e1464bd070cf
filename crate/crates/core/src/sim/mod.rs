//! Scenario construction, baselines and experiment sweeps.

pub mod baseline;
pub mod data;
pub mod experiment;
pub mod synthetic;

pub use baseline::{arbitrage_threshold_check, run_metrics, schedule_baseline, Baseline, RunMetrics};
pub use data::{load_datasets, write_datasets, DatasetBundle, DatasetPaths, SocPair};
pub use experiment::{run_experiment, DataSource, ExperimentConfig, ExperimentResult, SweepGrid};
pub use synthetic::{
    desk_instance, sample_scenario, synthetic_bundle, AlphaProfile, EvModel, StationConfig, SyntheticSpec,
};
