//! Turning learned gates into a physically smaller model.

mod checkpoint;
mod compact;
mod params;
mod structure;

pub use checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind, TensorEntry, FORMAT_VERSION, MAGIC};
pub use compact::{extract, CompactAttention, CompactBlock, CompactFfn, CompactModel, CompactOutput};
pub use params::{count_dense, count_params, count_structure, ParamCount};
pub use structure::{binarize, FoldScales, PrunedStructure};
