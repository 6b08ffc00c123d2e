use std::fmt::Write;

use ndarray::{s, Array2};

use super::forward::{check_shape, compressed_forward, Reference};
use super::CompressionError;
use crate::compiler::outputs_agree;
use crate::runtime::{heatmap_pgm, heatmap_svg, CompiledModel, Panel, TraceFormat, TRACE_VERSION};
use crate::value::Value;

/// A compressed numerical output counts as correct within this distance of
/// the original.
pub const NUMERICAL_ACCURACY_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub labels: Vec<String>,
    /// `W W^T`: how each residual feature comes back after a round trip.
    pub round_trip: Array2<f64>,
    /// Mean cosine between the original and reconstructed residual after
    /// each sublayer.
    pub per_layer_cosine: Vec<f64>,
    pub accuracy: f64,
}

pub fn round_trip(w: &Array2<f64>) -> Array2<f64> {
    w.dot(&w.t())
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let (aa, bb) = (a.dot(&a), b.dot(&b));
    match (aa > 0.0, bb > 0.0) {
        // one square root of the product keeps identical vectors at exactly 1
        (true, true) => (a.dot(&b) / (aa * bb).sqrt()).clamp(-1.0, 1.0),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

/// Per sublayer, the mean over all non-BOS positions of `refs`.
pub fn per_layer_cosine(model: &CompiledModel, w: &Array2<f64>, refs: &[Reference]) -> Result<Vec<f64>, CompressionError> {
    Ok(evaluate(model, w, refs)?.0)
}

/// Fraction of non-BOS positions whose compressed output matches the
/// original model's output.
pub fn accuracy(model: &CompiledModel, w: &Array2<f64>, refs: &[Reference]) -> Result<f64, CompressionError> {
    Ok(evaluate(model, w, refs)?.1)
}

fn evaluate(model: &CompiledModel, w: &Array2<f64>, refs: &[Reference]) -> Result<(Vec<f64>, f64), CompressionError> {
    check_shape(model, w)?;
    let kind = model.weights.unembed.kind;
    let mut sums = vec![0.0; model.num_sublayers()];
    let mut positions = 0usize;
    let mut correct = 0usize;
    for r in refs {
        let run = compressed_forward(model, w, &r.tokens)?;
        for (k, (h, hh)) in r.hidden.iter().zip(&run.hidden).enumerate() {
            for (a, b) in h.slice(s![1.., ..]).rows().into_iter().zip(hh.slice(s![1.., ..]).rows()) {
                sums[k] += cosine(a, b);
            }
        }
        positions += r.len();
        correct += r
            .outputs
            .iter()
            .zip(&run.outputs)
            .filter(|(a, b)| outputs_agree(kind, a, b, NUMERICAL_ACCURACY_TOLERANCE))
            .count();
    }
    if positions == 0 {
        return Ok((vec![1.0; sums.len()], 1.0));
    }
    let cos = sums.into_iter().map(|s| s / positions as f64).collect();
    Ok((cos, correct as f64 / positions as f64))
}

pub fn diagnostics(model: &CompiledModel, w: &Array2<f64>, inputs: &[Vec<Value>]) -> Result<DiagnosticsReport, CompressionError> {
    let refs = inputs
        .iter()
        .map(|t| Reference::new(model, t))
        .collect::<Result<Vec<_>, _>>()?;
    let (per_layer_cosine, accuracy) = evaluate(model, w, &refs)?;
    Ok(DiagnosticsReport {
        labels: model.residual_labels.clone(),
        round_trip: round_trip(w),
        per_layer_cosine,
        accuracy,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Long-form CSV: `kind,row,column,value` with kinds `round_trip`,
/// `cosine` (row = sublayer) and `accuracy`.
pub fn diagnostics_csv(report: &DiagnosticsReport) -> String {
    let mut out = format!("# version: {TRACE_VERSION}\nkind,row,column,value\n");
    for (i, ri) in report.labels.iter().enumerate() {
        for (j, cj) in report.labels.iter().enumerate() {
            writeln!(out, "round_trip,{},{},{:?}", csv_field(ri), csv_field(cj), report.round_trip[[i, j]]).unwrap();
        }
    }
    for (k, c) in report.per_layer_cosine.iter().enumerate() {
        let name = if k % 2 == 0 { "attn" } else { "mlp" };
        writeln!(out, "cosine,{name}_{},,{c:?}", k / 2 + 1).unwrap();
    }
    writeln!(out, "accuracy,,,{:?}", report.accuracy).unwrap();
    out
}

/// The round-trip operator as a labelled heatmap, or the full report for
/// the CSV format.
pub fn round_trip_heatmap(report: &DiagnosticsReport, format: TraceFormat) -> Vec<u8> {
    // panels are indexed [column, row]
    let values = report.round_trip.t().to_owned();
    let panel = Panel {
        title: "round trip W W^T",
        values: &values,
        changed: None,
    };
    match format {
        TraceFormat::Csv => diagnostics_csv(report).into_bytes(),
        TraceFormat::Svg => heatmap_svg(&[panel], &report.labels, &report.labels).into_bytes(),
        TraceFormat::Pgm => heatmap_pgm(&[panel], &report.labels, &report.labels).into_bytes(),
    }
}
