//! Labelled-basis assembly layer between RASP and raw weight matrices.
//!
//! Every residual dimension is a [`BasisDirection`] such as `tokens:x`,
//! `indices:3`, `one` or `frac_prevs`. Blocks are written against the
//! directions they read and write, and are embedded into the full residual
//! space only when the model is assembled.

mod blocks;
mod space;

pub use blocks::{combine_parallel, CraftAttentionHead, CraftBlock, CraftLayer, CraftMLP};
pub use space::{BasisDirection, LinearMap, VectorSpace};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CraftError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("direction `{direction}` is claimed by both `{first}` and `{second}`")]
    DirectionConflict {
        direction: String,
        first: String,
        second: String,
    },
    #[error("direction `{0}` is not in the space")]
    UnknownDirection(String),
    #[error("first and second MLP layers disagree on the hidden space")]
    HiddenMismatch,
    #[error("cannot combine MLP and attention blocks in one sublayer")]
    MixedKinds,
    #[error("no blocks to combine")]
    EmptyLayer,
}
