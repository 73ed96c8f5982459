//! Experiment configuration, study presets and runners for the SAC-CLF
//! toolkit.

pub mod config;
pub mod run;

pub use config::{preset, ClfSource, DisturbanceConfig, EnvName, ExperimentConfig, RunMode, Study, StudyKind, PRESETS};
pub use run::{ablate, export_plot_data, output_root, run_arm, ArmRun, PolicyCache, RunSummary, StudyReport};
