//! Mask pyramids, mask-safe spatial operators and grid serialization.

mod grid;
mod pyramid;
mod scan;
mod sparse;

pub use grid::{Grid3, Mask3};
pub use pyramid::{masked_target, MaskPyramid};
pub use scan::{deserialize, serialize, ScanOrder, SequenceLayout, TokenSequence};
pub use sparse::{apply_mask, masked_conv, masked_norm, sparse_op, SparseFeature, SparseOperator};
