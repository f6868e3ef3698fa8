//! File formats: WMPC tracts, cohort manifests, per-point labels and WMCK checkpoints.

mod checkpoint;
mod labels;
mod manifest;
mod tract;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use labels::{names_path, read_labels, write_labels, PointLabels};
pub use manifest::{format_f64, read_manifest, write_manifest, CohortManifest, ManifestRow, Split};
pub use tract::{
    decode_tract, encode_tract, flatten_points, read_tract, write_tract, PointTable, Streamline,
    Tract, POINT_CHANNELS, TRACT_MAGIC, TRACT_VERSION,
};
