//! Forward pass through the frozen model with a shared projection `W`, the
//! training loss, and its exact gradient with respect to `W`.
//!
//! Row-vector convention: a residual row `x` compresses to `x W` and a
//! compressed row `s` decompresses to `s W^T`.

use ndarray::{s, Array2, Axis};

use super::CompressionError;
use crate::numeric::{relu, softmax_rows};
use crate::rasp::{Encoding, ValueSeq};
use crate::runtime::{CompiledModel, CATEGORICAL_PRESENCE};
use crate::value::Value;

/// Reference quantities from the uncompressed model for one input.
#[derive(Debug, Clone)]
pub struct Reference {
    pub tokens: Vec<Value>,
    /// Residual after the embedding.
    pub x0: Array2<f64>,
    /// Residual after each sublayer.
    pub hidden: Vec<Array2<f64>>,
    pub target: Target,
    pub outputs: ValueSeq,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Original readout at every non-BOS position.
    Numerical(Vec<f64>),
    /// Original argmax column, `None` where the original output is missing.
    Categorical(Vec<Option<usize>>),
}

impl Reference {
    pub fn new(model: &CompiledModel, tokens: &[Value]) -> Result<Self, CompressionError> {
        let (outputs, trace) = model.forward(tokens, true)?;
        let trace = trace.expect("trace requested");
        let last = trace.snapshots.last().expect("embedding snapshot");
        let scores = readout(model, last);
        let target = match model.weights.unembed.kind {
            Encoding::Numerical => Target::Numerical(scores.column(0).to_vec()),
            Encoding::Categorical => Target::Categorical(
                scores
                    .rows()
                    .into_iter()
                    .map(|r| {
                        let (i, m) = argmax(r.iter().copied());
                        (m >= CATEGORICAL_PRESENCE).then_some(i)
                    })
                    .collect(),
            ),
        };
        let mut snaps = trace.snapshots;
        let x0 = snaps.remove(0);
        Ok(Reference {
            tokens: tokens.to_vec(),
            x0,
            hidden: snaps,
            target,
            outputs,
        })
    }

    /// Non-BOS positions.
    pub fn len(&self) -> usize {
        self.x0.nrows() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positions that contribute to the output loss.
    pub fn output_terms(&self) -> usize {
        match &self.target {
            Target::Numerical(v) => v.len(),
            Target::Categorical(v) => v.iter().filter(|t| t.is_some()).count(),
        }
    }
}

fn argmax(xs: impl Iterator<Item = f64>) -> (usize, f64) {
    xs.enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, v)| if v > bm { (i, v) } else { (bi, bm) })
}

/// Unembedding scores at the non-BOS rows.
fn readout(model: &CompiledModel, x: &Array2<f64>) -> Array2<f64> {
    x.slice(s![1.., ..]).dot(&model.weights.unembed.matrix)
}

struct HeadCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights of each sequence.
    a: Vec<Array2<f64>>,
}

enum SublayerCache {
    Attention(Vec<HeadCache>),
    Mlp { pre: Array2<f64> },
}

/// Row ranges `start..end` of the sequences stacked in a batch; each range
/// starts with its BOS row.
type Segments = [(usize, usize)];

/// Intermediate values of one compressed forward pass over stacked rows.
struct Pass {
    /// Compressed states `s_0 ..= s_L`.
    s: Vec<Array2<f64>>,
    /// Decompressed states `x_k = s_k W^T`; `x_k` for `k >= 1` is the
    /// reconstruction of the residual after sublayer `k`.
    x: Vec<Array2<f64>>,
    deltas: Vec<Array2<f64>>,
    caches: Vec<SublayerCache>,
}

fn scale(model: &CompiledModel) -> f64 {
    (model.config.key_size.max(1) as f64).sqrt()
}

fn attention_forward(model: &CompiledModel, k: usize, xk: &Array2<f64>, segs: &Segments) -> (Array2<f64>, SublayerCache) {
    let block = &model.weights.blocks[k / 2];
    let mut delta = Array2::zeros(xk.raw_dim());
    let mut heads = Vec::with_capacity(block.heads.len());
    for h in &block.heads {
        let q = xk.dot(&h.w_q);
        let kk = xk.dot(&h.w_k);
        let v = xk.dot(&h.w_v);
        let mut mixed = Array2::zeros(v.raw_dim());
        let mut a = Vec::with_capacity(segs.len());
        for &(lo, hi) in segs {
            let logits = q.slice(s![lo..hi, ..]).dot(&kk.slice(s![lo..hi, ..]).t()) / scale(model);
            let ai = softmax_rows(logits.view(), model.config.causal);
            mixed.slice_mut(s![lo..hi, ..]).assign(&ai.dot(&v.slice(s![lo..hi, ..])));
            a.push(ai);
        }
        delta += &mixed.dot(&h.w_o);
        heads.push(HeadCache { q, k: kk, v, a });
    }
    (delta, SublayerCache::Attention(heads))
}

fn run_pass(model: &CompiledModel, w: &Array2<f64>, x0: &Array2<f64>, segs: &Segments) -> Pass {
    let mut s = vec![x0.dot(w)];
    let mut x = vec![s[0].dot(&w.t())];
    let mut deltas = Vec::new();
    let mut caches = Vec::new();
    for k in 0..model.num_sublayers() {
        let xk = &x[k];
        let (delta, cache) = if k % 2 == 0 {
            attention_forward(model, k, xk, segs)
        } else {
            let mlp = &model.weights.blocks[k / 2].mlp;
            let pre = xk.dot(&mlp.w1);
            (relu(&pre).dot(&mlp.w2), SublayerCache::Mlp { pre })
        };
        let next = &s[k] + &delta.dot(w);
        x.push(next.dot(&w.t()));
        s.push(next);
        deltas.push(delta);
        caches.push(cache);
    }
    Pass { s, x, deltas, caches }
}

/// Gradient of a sublayer's input given the gradient of its delta.
fn sublayer_backward(
    model: &CompiledModel,
    k: usize,
    cache: &SublayerCache,
    g_delta: &Array2<f64>,
    segs: &Segments,
) -> Array2<f64> {
    let block = &model.weights.blocks[k / 2];
    match cache {
        SublayerCache::Mlp { pre } => {
            let mut g = g_delta.dot(&block.mlp.w2.t());
            g.zip_mut_with(pre, |g, p| {
                if *p <= 0.0 {
                    *g = 0.0
                }
            });
            g.dot(&block.mlp.w1.t())
        }
        SublayerCache::Attention(heads) => {
            let c = scale(model);
            let mut g_x = Array2::zeros(g_delta.raw_dim());
            for (h, hc) in block.heads.iter().zip(heads) {
                let g_o = g_delta.dot(&h.w_o.t());
                let mut g_q = Array2::zeros(hc.q.raw_dim());
                let mut g_k = Array2::zeros(hc.k.raw_dim());
                let mut g_v = Array2::zeros(hc.v.raw_dim());
                for (&(lo, hi), a) in segs.iter().zip(&hc.a) {
                    let rows = s![lo..hi, ..];
                    let g_oi = g_o.slice(rows);
                    let g_a = g_oi.dot(&hc.v.slice(rows).t());
                    g_v.slice_mut(rows).assign(&a.t().dot(&g_oi));
                    // softmax backward, row by row
                    let inner = (&g_a * a).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let g_s = a * &(&g_a - &inner) / c;
                    g_q.slice_mut(rows).assign(&g_s.dot(&hc.k.slice(rows)));
                    g_k.slice_mut(rows).assign(&g_s.t().dot(&hc.q.slice(rows)));
                }
                g_x += &g_q.dot(&h.w_q.t());
                g_x += &g_k.dot(&h.w_k.t());
                g_x += &g_v.dot(&h.w_v.t());
            }
            g_x
        }
    }
}

/// Output of the compressed model on one input.
#[derive(Debug, Clone)]
pub struct CompressedRun {
    pub outputs: ValueSeq,
    /// Decompressed residual after each sublayer.
    pub hidden: Vec<Array2<f64>>,
}

pub(crate) fn check_shape(model: &CompiledModel, w: &Array2<f64>) -> Result<(), CompressionError> {
    if w.nrows() != model.config.d_model || w.ncols() == 0 {
        return Err(CompressionError::Shape {
            expected: model.config.d_model,
            found: w.dim(),
        });
    }
    Ok(())
}

pub fn compressed_forward(
    model: &CompiledModel,
    w: &Array2<f64>,
    tokens: &[Value],
) -> Result<CompressedRun, CompressionError> {
    check_shape(model, w)?;
    let x0 = model.embed(tokens)?;
    let mut pass = run_pass(model, w, &x0, &[(0, x0.nrows())]);
    let last = pass.x.last().expect("at least the embedding");
    let outputs = model.decode(last.view());
    pass.x.remove(0);
    Ok(CompressedRun {
        outputs,
        hidden: pass.x,
    })
}

/// What the layer loss compares at each sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerTarget {
    /// The residual stream after the sublayer.
    Residual,
    /// The update the sublayer adds to the residual stream.
    #[default]
    SublayerOutput,
}

/// Loss components, averaged over all non-BOS positions of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l_out: f64,
    pub l_layer: f64,
    pub total: f64,
}

/// Loss and, when `with_grad`, its gradient with respect to `W`.
///
/// `L_out` is the mean squared error against the original readout for
/// numerical outputs, and the softmax cross-entropy against the original
/// argmax for categorical outputs (positions the original leaves empty are
/// skipped). `L_layer` sums, over sublayers, the mean squared distance
/// between the original and reconstructed residuals, or between the
/// original and reconstructed sublayer updates (see [`LayerTarget`]).
pub fn loss_and_grad(
    model: &CompiledModel,
    w: &Array2<f64>,
    batch: &[&Reference],
    layer_weight: f64,
    target: LayerTarget,
    with_grad: bool,
) -> Result<(LossParts, Option<Array2<f64>>), CompressionError> {
    check_shape(model, w)?;
    let d_model = model.config.d_model;
    let positions: usize = batch.iter().map(|r| r.len()).sum();
    let out_terms: usize = batch.iter().map(|r| r.output_terms()).sum();
    let layer_norm = if positions == 0 { 0.0 } else { 1.0 / (positions * d_model) as f64 };
    let out_norm = if out_terms == 0 { 0.0 } else { 1.0 / out_terms as f64 };
    let u = &model.weights.unembed.matrix;

    if batch.is_empty() {
        return Ok((LossParts { l_out: 0.0, l_layer: 0.0, total: 0.0 }, with_grad.then(|| Array2::zeros(w.raw_dim()))));
    }
    // stack the batch; sequences only interact inside attention blocks
    let mut segs = Vec::with_capacity(batch.len());
    let mut row = 0;
    for r in batch {
        segs.push((row, row + r.x0.nrows()));
        row += r.x0.nrows();
    }
    let stack = |f: &dyn Fn(&Reference) -> ndarray::ArrayView2<'_, f64>| -> Array2<f64> {
        let views: Vec<_> = batch.iter().map(|r| f(r)).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal widths")
    };
    let x0 = stack(&|r| r.x0.view());
    let pass = run_pass(model, w, &x0, &segs);
    let nl = pass.deltas.len();
    let x_out = &pass.x[nl];
    let scores = x_out.dot(u);

    // output loss and its gradient with respect to the scores
    let mut l_out = 0.0;
    let mut g_scores = Array2::zeros(scores.raw_dim());
    for (r, &(lo, _)) in batch.iter().zip(&segs) {
        match &r.target {
            Target::Numerical(y) => {
                for (p, y) in y.iter().enumerate() {
                    let e = scores[[lo + 1 + p, 0]] - y;
                    l_out += e * e * out_norm;
                    g_scores[[lo + 1 + p, 0]] = 2.0 * e * out_norm;
                }
            }
            Target::Categorical(t) => {
                for (p, t) in t.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let i = lo + 1 + p;
                    let row = scores.row(i);
                    let m = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    l_out += (z.ln() + m - row[t]) * out_norm;
                    for (j, v) in row.iter().enumerate() {
                        let prob = (v - m).exp() / z;
                        g_scores[[i, j]] = (prob - if j == t { 1.0 } else { 0.0 }) * out_norm;
                    }
                }
            }
        }
    }

    // layer loss on non-BOS rows; `g_rec[j]` is its gradient with respect
    // to the reconstruction `x_j`
    let mut l_layer = 0.0;
    let mut g_rec: Vec<Array2<f64>> = vec![Array2::zeros(x0.raw_dim()); nl + 1];
    let originals: Vec<Array2<f64>> = std::iter::once(x0.clone())
        .chain((0..nl).map(|k| stack(&|r| r.hidden[k].view())))
        .collect();
    for k in 1..=nl {
        let mut diff = match target {
            LayerTarget::Residual => &pass.x[k] - &originals[k],
            LayerTarget::SublayerOutput => &(&pass.x[k] - &pass.x[k - 1]) - &(&originals[k] - &originals[k - 1]),
        };
        for &(lo, _) in &segs {
            diff.row_mut(lo).fill(0.0);
        }
        l_layer += diff.iter().map(|v| v * v).sum::<f64>() * layer_norm;
        diff *= 2.0 * layer_weight * layer_norm;
        match target {
            LayerTarget::SublayerOutput => {
                g_rec[k - 1] -= &diff;
                g_rec[k] += &diff;
            }
            LayerTarget::Residual => g_rec[k] += &diff,
        }
    }

    let mut grad = None;
    if with_grad {
        let mut gw = Array2::zeros(w.raw_dim());
        let g_x = &g_rec[nl] + &g_scores.dot(&u.t());
        // x_L = s_L W^T
        let mut g_s = g_x.dot(w);
        gw += &g_x.t().dot(&pass.s[nl]);
        for k in (0..nl).rev() {
            // s_{k+1} = s_k + delta_k W
            let g_delta = g_s.dot(&w.t());
            gw += &pass.deltas[k].t().dot(&g_s);
            let mut g_xk = sublayer_backward(model, k, &pass.caches[k], &g_delta, &segs);
            g_xk += &g_rec[k];
            // x_k = s_k W^T
            g_s += &g_xk.dot(w);
            gw += &g_xk.t().dot(&pass.s[k]);
        }
        // s_0 = x_0 W
        gw += &x0.t().dot(&g_s);
        grad = Some(gw);
    }
    let parts = LossParts {
        l_out,
        l_layer,
        total: l_out + layer_weight * l_layer,
    };
    Ok((parts, grad))
}
