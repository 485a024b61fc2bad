//! End-to-end orchestration: data loading, training of both stages, the
//! inference cascade, evaluation and overlays.

mod cascade;
mod config;
mod evaluate;
mod overlay;
mod train;

pub use cascade::{Cascade, CascadeBoundary, CascadeOptions, CascadeResult, StageTimings};
pub use config::{derive_seed, ClsStageConfig, DataConfig, PipelineConfig, Seeds, SegTrainConfig};
pub use evaluate::{evaluate, evaluate_segmentation, match_sample, predict_instances};
pub use overlay::{class_color, instance_color, render_overlay, OverlayMode, OVERLAY_WIDTH};
pub use train::{
    associate_detections, descriptor_pairs, load_samples, prepare_samples, run_ablation, train_classification,
    train_segmentation, ClsStageReport, EpochLog, LabelledDescriptor, PreparedSample, SegTrainReport, CLS_CHECKPOINT,
    SEG_CHECKPOINT, SEG_STATE,
};
