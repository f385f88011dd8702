//! Configuration, training, evaluation, checkpoints, mask export and the
//! gradient check behind the command-line tool.

mod config;
mod data;
mod eval;
mod gradcheck;
mod masks;
mod optim;
mod train;

pub use config::{ExperimentConfig, FusionSection, LossSection, ModelSection, OptimSection, OptimizerKind, PathsSection, PolicyKind};
pub use data::{BatchSampler, DataView, PreparedBatch};
pub use eval::{evaluate_view, EvalMetrics};
pub use gradcheck::{grad_check, GradCheckReport, GroupError, FD_STEP};
pub use masks::{export_masks, mask_image, ExportOptions, ExportReport, Pgm};
pub use optim::Adam;
pub use train::{
    load_dataset, train_to_dir, Checkpoint, LayerStat, Session, StepMetrics, TrainSummary, CHECKPOINT_DIR, CHECKPOINT_FORMAT,
    METRICS_FILE, SUMMARY_FILE,
};
