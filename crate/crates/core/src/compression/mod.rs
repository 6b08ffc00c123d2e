//! Learning a shared projection `W` (D x d) of the residual stream of a
//! frozen compiled model.
//!
//! The compressed model keeps a `d`-dimensional state `s`. Every sublayer
//! reads the decompressed residual `x = s W^T` and writes back `delta W`.
//! Only `W` is trained; the model weights are never modified.

mod diagnostics;
mod forward;
mod pca;
mod train;

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use diagnostics::{
    accuracy, diagnostics, diagnostics_csv, per_layer_cosine, round_trip, round_trip_heatmap, DiagnosticsReport,
    NUMERICAL_ACCURACY_TOLERANCE,
};
pub use forward::{compressed_forward, loss_and_grad, CompressedRun, LayerTarget, LossParts, Reference, Target};
pub use pca::{pca_baseline, principal_components};
pub use train::{
    adamw_step, eval_inputs, learning_rate, metrics_csv, sample_inputs, train, CompressionState, MetricRow,
};

use crate::runtime::RuntimeError;

pub const W_FILE_VERSION: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CompressionError {
    #[error("W must be {expected} x d with d >= 1, found {}x{}", .found.0, .found.1)]
    Shape { expected: usize, found: (usize, usize) },
    #[error("invalid compression config: {0}")]
    BadConfig(String),
    #[error("training diverged at step {step}: the loss is not finite")]
    Diverged { step: usize },
    #[error("PCA needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("malformed projection file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionConfig {
    pub d: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub layer_loss_weight: f64,
    pub layer_target: LayerTarget,
    /// Metrics are recorded every this many steps.
    pub eval_every: usize,
    /// Number of held-out sequences used for metrics.
    pub eval_size: usize,
}

/// Steps of the long training schedule.
pub const FULL_SCHEDULE_STEPS: usize = 300_000;
/// Steps used unless the full schedule is requested.
pub const DESK_SCALE_STEPS: usize = 20_000;

impl CompressionConfig {
    pub fn new(d: usize) -> Self {
        CompressionConfig {
            d,
            steps: DESK_SCALE_STEPS,
            batch_size: 256,
            lr_start: 1e-3,
            lr_end: 1e-6,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.1,
            seed: 0,
            layer_loss_weight: 1.0,
            layer_target: LayerTarget::SublayerOutput,
            eval_every: 100,
            eval_size: 256,
        }
    }

    pub fn full_schedule(mut self) -> Self {
        self.steps = FULL_SCHEDULE_STEPS;
        self
    }

    pub fn check(&self, d_model: usize) -> Result<(), CompressionError> {
        let bad = |m: String| Err(CompressionError::BadConfig(m));
        if self.d == 0 || self.d > d_model {
            return bad(format!("d = {} must lie in 1..={d_model}", self.d));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [("lr_start", self.lr_start), ("lr_end", self.lr_end)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative number"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0 && self.layer_loss_weight >= 0.0) {
            return bad("eps must be positive; weight_decay and layer_loss_weight non-negative".into());
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct WFile {
    version: u64,
    d_model: usize,
    d: usize,
    w: Vec<Vec<f64>>,
}

pub fn w_to_json(w: &Array2<f64>) -> String {
    let file = WFile {
        version: W_FILE_VERSION,
        d_model: w.nrows(),
        d: w.ncols(),
        w: w.rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    serde_json::to_string_pretty(&file).expect("plain data serializes")
}

pub fn w_from_json(text: &str) -> Result<Array2<f64>, CompressionError> {
    let file: WFile = serde_json::from_str(text).map_err(|e| CompressionError::Malformed(e.to_string()))?;
    if file.version != W_FILE_VERSION {
        return Err(CompressionError::Malformed(format!(
            "unsupported version {} (expected {W_FILE_VERSION})",
            file.version
        )));
    }
    if file.w.len() != file.d_model || file.w.iter().any(|r| r.len() != file.d) {
        return Err(CompressionError::Malformed("matrix does not match the declared shape".into()));
    }
    let flat: Vec<f64> = file.w.into_iter().flatten().collect();
    Array2::from_shape_vec((file.d_model, file.d), flat).map_err(|e| CompressionError::Malformed(e.to_string()))
}

pub fn save_w(w: &Array2<f64>, path: impl AsRef<Path>) -> Result<(), CompressionError> {
    Ok(std::fs::write(path, w_to_json(w))?)
}

pub fn load_w(path: impl AsRef<Path>) -> Result<Array2<f64>, CompressionError> {
    w_from_json(&std::fs::read_to_string(path)?)
}
