//! Compile RASP programs into decoder-only transformer weights whose
//! mechanism is known by construction, run and trace the resulting models,
//! and study how they behave when the residual stream is compressed.
//!
//! The pipeline:
//!
//! 1. [`frontend`] parses the textual dialect or loads a builtin program.
//! 2. [`rasp`] validates the expression DAG and interprets it directly.
//! 3. [`compiler`] lowers it through the labelled-basis layer in [`craft`].
//! 4. [`runtime`] executes the weights, traces the residual stream and
//!    serializes models.
//! 5. [`compression`] trains a shared projection of the residual stream.

pub mod compiler;
pub mod compression;
pub mod craft;
pub mod frontend;
pub(crate) mod numeric;
pub mod rasp;
pub mod runtime;
pub mod value;

pub use value::{Value, ValueSet, BOS_TOKEN};
