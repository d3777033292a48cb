//! Checkpoints, metrics CSVs and feature export.

mod checkpoint;
mod features;
mod metrics;

pub(crate) use checkpoint::write_atomic;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_manifest, save_checkpoint, CheckpointMeta,
    ManifestEntry, FORMAT_VERSION, MAGIC,
};
pub use features::{export_features, penultimate_features};
pub use metrics::{format_metrics, parse_metrics, read_metrics, write_metrics, METRICS_HEADER};
