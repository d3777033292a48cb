//! Objectives, supervised training, teacher → student distillation, the
//! teacher-assistant pipeline and hyperparameter sweeps.

pub mod losses;
mod pipeline;
mod sweep;
mod train;

pub use losses::{
    combined_loss, full_lm_loss, kl_loss, nll_loss, sliding_lm_loss, DistillLossConfig, KlDirection, Objective,
};
pub use pipeline::{multistage_pipeline, PipelineConfig, PipelineOutput, Stage};
pub use sweep::{
    format_weights_csv, format_window_csv, grid_points, grid_search_weights, window_sweep, write_weights_csv,
    write_window_csv, GridSearchConfig, GridSearchResult, WeightRow, WindowRow,
};
pub use train::{
    distill, distill_epoch, distill_epoch_with_targets, evaluate, evaluate_with_loss, teacher_sats, train_supervised,
    train_supervised_epoch, MetricSplit, MetricsRecord, TeacherTargets, TrainConfig, EVAL_BATCH,
};
