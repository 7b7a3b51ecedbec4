//! Dataset directories, the synthetic generator, and checkpoint files.
//!
//! All binary payloads are little-endian and headerless.

pub mod checkpoint;
pub mod dataset;
pub mod synthetic;

pub use checkpoint::{AdamMeta, Checkpoint};
pub use dataset::{
    read_f32_matrix, write_f32_matrix, GzslDataset, Manifest, ManifestFiles, SeenTrainView, Split,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};
