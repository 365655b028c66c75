//! Data ingestion, file formats, metrics, synthetic scenes and the command line.

pub mod cli;
pub mod dataset;
pub mod formats;
pub mod metrics;
pub mod synth;

pub use dataset::{load_dataset, save_dataset, CameraRecord, DatasetMeta, SceneDataset, TestView, TrainingView};
pub use metrics::{compute_metrics, MetricInput, MetricsReport, ViewMetrics};
pub use synth::{synth_scene, SynthConfig, SynthPreset, SynthScene, SynthTruth};
