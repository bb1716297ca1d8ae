//! Training, checkpointing and inference around the detector.

pub mod checkpoint;
pub mod config;
pub mod import;
pub mod model;
pub mod pipeline;
pub mod scheduler;
pub mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint_manifest, save_checkpoint, CheckpointManifest};
pub use config::{PostConfig, RunConfig};
pub use model::{full_config_parameter_report, Detector, EncoderSource, Features, ModelConfig, PAPER_TRAINABLE_PARAMETERS};
pub use pipeline::{detect_image, evaluate_checkpoint, merge_prompts, oracle_prediction, DetectOutput, Pipeline};
pub use scheduler::ReduceOnPlateau;
pub use train::{read_curves, train, EpochRecord, TrainReport};
