use std::fmt::Write;
use std::str::FromStr;

use ndarray::Array2;

use super::{CompiledModel, RuntimeError};
use crate::value::{Value, BOS_TOKEN};

pub const TRACE_VERSION: u64 = 1;

/// Entries whose update magnitude exceeds this are marked as changed.
const CHANGE_EPS: f64 = 1e-10;

/// Residual stream snapshots from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub residual_labels: Vec<String>,
    /// Token at each position, BOS first.
    pub positions: Vec<String>,
    /// `embed`, `attn_1`, `mlp_1`, `attn_2`, ...
    pub sublayers: Vec<String>,
    /// `2 * blocks + 1` matrices of shape `positions x d_model`.
    pub snapshots: Vec<Array2<f64>>,
    /// The update added by each sublayer (one fewer than `snapshots`).
    pub deltas: Vec<Array2<f64>>,
    /// Changed entries per panel; the embedding panel is all false.
    pub changed: Vec<Array2<bool>>,
}

impl ResidualTrace {
    pub(super) fn start(model: &CompiledModel, tokens: &[Value], x: &Array2<f64>) -> Self {
        ResidualTrace {
            residual_labels: model.residual_labels.clone(),
            positions: std::iter::once(BOS_TOKEN.to_string())
                .chain(tokens.iter().map(|t| t.to_string()))
                .collect(),
            sublayers: vec!["embed".into()],
            snapshots: vec![x.clone()],
            deltas: vec![],
            changed: vec![Array2::from_elem(x.raw_dim(), false)],
        }
    }

    pub(super) fn push(&mut self, x: &Array2<f64>, delta: Array2<f64>) {
        let k = self.deltas.len();
        let name = if k % 2 == 0 { "attn" } else { "mlp" };
        self.sublayers.push(format!("{name}_{}", k / 2 + 1));
        self.changed.push(delta.mapv(|d| d.abs() > CHANGE_EPS));
        self.deltas.push(delta);
        self.snapshots.push(x.clone());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    Svg,
    Pgm,
}

impl FromStr for TraceFormat {
    type Err = RuntimeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TraceFormat::Csv),
            "svg" => Ok(TraceFormat::Svg),
            "pgm" => Ok(TraceFormat::Pgm),
            _ => Err(RuntimeError::UnknownFormat(s.to_string())),
        }
    }
}

pub fn export_trace(trace: &ResidualTrace, format: TraceFormat) -> Vec<u8> {
    let panels: Vec<Panel> = trace
        .sublayers
        .iter()
        .zip(&trace.snapshots)
        .zip(&trace.changed)
        .map(|((name, values), changed)| Panel {
            title: name,
            values,
            changed: Some(changed),
        })
        .collect();
    match format {
        TraceFormat::Csv => trace_csv(trace).into_bytes(),
        TraceFormat::Svg => heatmap_svg(&panels, &trace.positions, &trace.residual_labels).into_bytes(),
        TraceFormat::Pgm => heatmap_pgm(&panels, &trace.positions, &trace.residual_labels).into_bytes(),
    }
}

fn trace_csv(trace: &ResidualTrace) -> String {
    let mut out = format!("# version: {TRACE_VERSION}\nsublayer,position,dimension_label,value,changed\n");
    for ((name, snap), changed) in trace.sublayers.iter().zip(&trace.snapshots).zip(&trace.changed) {
        for p in 0..snap.nrows() {
            for (d, label) in trace.residual_labels.iter().enumerate() {
                writeln!(
                    out,
                    "{name},{p},{},{:?},{}",
                    csv_field(label),
                    snap[[p, d]],
                    u8::from(changed[[p, d]])
                )
                .unwrap();
            }
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One heatmap panel: `values` is `columns x rows` (positions by labels).
pub(crate) struct Panel<'a> {
    pub title: &'a str,
    pub values: &'a Array2<f64>,
    pub changed: Option<&'a Array2<bool>>,
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Diverging blue-white-red colour for `v` in `[-1, 1]`.
fn colour(v: f64) -> String {
    let t = v.clamp(-1.0, 1.0);
    let (r, g, b) = if t >= 0.0 {
        (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
    } else {
        (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
    };
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
}

fn max_abs(panels: &[Panel]) -> f64 {
    panels
        .iter()
        .flat_map(|p| p.values.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12)
}

/// Side-by-side heatmaps; x axis = columns (positions), y axis = labels.
pub(crate) fn heatmap_svg(panels: &[Panel], columns: &[String], rows: &[String]) -> String {
    const CELL: usize = 16;
    let label_w = 8 * rows.iter().map(|r| r.len()).max().unwrap_or(0) + 10;
    let panel_w = CELL * columns.len() + 20;
    let top = 30;
    let height = top + CELL * rows.len() + 60;
    let width = label_w + panel_w * panels.len();
    let scale = max_abs(panels);
    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"monospace\" font-size=\"11\">"
    )
    .unwrap();
    writeln!(s, "<!-- version: {TRACE_VERSION}; colour scale +-{scale} -->").unwrap();
    for (r, label) in rows.iter().enumerate() {
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            label_w - 6,
            top + r * CELL + CELL - 4,
            xml_escape(label)
        )
        .unwrap();
    }
    for (k, panel) in panels.iter().enumerate() {
        let x0 = label_w + k * panel_w;
        writeln!(s, "<g>").unwrap();
        writeln!(s, "<text x=\"{x0}\" y=\"18\" font-weight=\"bold\">{}</text>", xml_escape(panel.title)).unwrap();
        for (c, _) in columns.iter().enumerate() {
            for r in 0..rows.len() {
                let v = panel.values[[c, r]];
                let changed = panel.changed.is_some_and(|m| m[[c, r]]);
                let stroke = if changed { "#d00000" } else { "#dddddd" };
                let sw = if changed { 2 } else { 1 };
                writeln!(
                    s,
                    "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\" stroke=\"{stroke}\" stroke-width=\"{sw}\"><title>{} {}: {v}</title></rect>",
                    x0 + c * CELL,
                    top + r * CELL,
                    colour(v / scale),
                    xml_escape(&columns[c]),
                    xml_escape(&rows[r]),
                )
                .unwrap();
            }
        }
        for (c, col) in columns.iter().enumerate() {
            let x = x0 + c * CELL + CELL / 2;
            let y = top + rows.len() * CELL + 8;
            writeln!(
                s,
                "<text x=\"{x}\" y=\"{y}\" transform=\"rotate(90 {x} {y})\">{}</text>",
                xml_escape(col)
            )
            .unwrap();
        }
        writeln!(s, "</g>").unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Plain-text greyscale image: mid-grey is zero, panels separated by a
/// white column. Axis labels are listed in comments.
pub(crate) fn heatmap_pgm(panels: &[Panel], columns: &[String], rows: &[String]) -> String {
    const CELL: usize = 4;
    let scale = max_abs(panels);
    let panel_px = columns.len() * CELL;
    let width = panels.len() * (panel_px + 1);
    let height = rows.len() * CELL;
    let mut s = String::new();
    writeln!(s, "P2").unwrap();
    writeln!(s, "# version: {TRACE_VERSION}").unwrap();
    for (k, p) in panels.iter().enumerate() {
        writeln!(s, "# panel {k}: {}", p.title).unwrap();
    }
    writeln!(s, "# x: {}", columns.join(" ")).unwrap();
    writeln!(s, "# y: {}", rows.join(" ")).unwrap();
    writeln!(s, "# scale: {scale}").unwrap();
    writeln!(s, "{width} {height}").unwrap();
    writeln!(s, "255").unwrap();
    for py in 0..height {
        let r = py / CELL;
        let mut line = Vec::with_capacity(width);
        for panel in panels {
            for px in 0..panel_px {
                let v = panel.values[[px / CELL, r]] / scale;
                line.push(((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8);
            }
            line.push(255);
        }
        let text: Vec<String> = line.iter().map(|v| v.to_string()).collect();
        writeln!(s, "{}", text.join(" ")).unwrap();
    }
    s
}
