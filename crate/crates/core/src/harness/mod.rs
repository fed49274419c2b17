//! Synthetic scenes, experiment configuration, experiment drivers, and
//! reports.

mod config;
mod experiments;
mod report;
pub mod scene;

pub use config::ExperimentConfig;
pub use experiments::{
    detector_gate, detector_training_set, patch_datasets, run_train_detector, AttackDetectionRun, Datasets, DetectorGate,
    DetectorRun, HeatmapRun, Lab, STREAMS,
};
pub use report::{ExperimentReport, ReportRow};
pub use scene::{generate_dataset, render_scene, render_scenes, SceneSpec, PERSON_CLASS};
