//! Decoder-only transformer execution over compiled weights.
//!
//! There is no layer norm and there are no biases. Position 0 always holds
//! the BOS token; outputs are decoded at the remaining positions.

mod io;
mod trace;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use io::{load_weights, model_from_json, model_to_json, save_weights, WEIGHTS_VERSION};
pub use trace::{export_trace, ResidualTrace, TraceFormat, TRACE_VERSION};
pub(crate) use trace::{heatmap_pgm, heatmap_svg, Panel};

use crate::numeric::{relu, softmax_rows};
use crate::rasp::{Encoding, ValueSeq};
use crate::value::Value;

/// Threshold below which a categorical readout decodes to `None`.
pub const CATEGORICAL_PRESENCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    /// Heads in each attention sublayer (0 for a no-op).
    pub heads_per_layer: Vec<usize>,
    pub key_size: usize,
    pub value_size: usize,
    /// Hidden width of each MLP sublayer (0 for a no-op).
    pub mlp_hidden_sizes: Vec<usize>,
    pub vocab: Vec<Value>,
    /// Context length including the BOS position.
    pub max_seq_len: usize,
    pub causal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub heads: Vec<AttentionHead>,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unembedding {
    pub kind: Encoding,
    /// Residual label of each output column.
    pub labels: Vec<String>,
    /// Decoded value of each column (categorical outputs only).
    pub values: Vec<Value>,
    /// `d_model x outputs`.
    pub matrix: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    /// One row per vocabulary token, followed by the BOS row.
    pub token_embed: Array2<f64>,
    /// One row per position, BOS first.
    pub pos_embed: Array2<f64>,
    pub blocks: Vec<Block>,
    pub unembed: Unembedding,
}

/// A runnable model: configuration, weights and residual labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledModel {
    pub config: ModelConfig,
    pub weights: TransformerWeights,
    pub residual_labels: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("token not in vocabulary: {0}")]
    UnknownToken(Value),
    #[error("input has {len} tokens but the model accepts at most {max}")]
    TooLong { len: usize, max: usize },
    #[error("weight shapes do not match the configuration: {0}")]
    Shape(String),
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("unknown trace format `{0}` (expected csv, svg or pgm)")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CompiledModel {
    /// Number of residual sublayers (attention and MLP alternate).
    pub fn num_sublayers(&self) -> usize {
        2 * self.config.num_blocks
    }

    /// Row index of each input token in the token embedding.
    pub fn token_ids(&self, tokens: &[Value]) -> Result<Vec<usize>, RuntimeError> {
        let max = self.config.max_seq_len.saturating_sub(1);
        if tokens.len() > max {
            return Err(RuntimeError::TooLong {
                len: tokens.len(),
                max,
            });
        }
        tokens
            .iter()
            .map(|t| {
                self.config
                    .vocab
                    .iter()
                    .position(|v| v == t)
                    .ok_or_else(|| RuntimeError::UnknownToken(t.clone()))
            })
            .collect()
    }

    /// Residual stream after the embedding, BOS row first.
    pub fn embed(&self, tokens: &[Value]) -> Result<Array2<f64>, RuntimeError> {
        let ids = self.token_ids(tokens)?;
        let w = &self.weights;
        let bos = self.config.vocab.len();
        let n = ids.len() + 1;
        let mut x = Array2::zeros((n, self.config.d_model));
        for (p, id) in std::iter::once(bos).chain(ids).enumerate() {
            let mut row = x.row_mut(p);
            row += &w.token_embed.row(id);
            row += &w.pos_embed.row(p);
        }
        Ok(x)
    }

    pub fn attention_delta(&self, block: usize, x: ArrayView2<f64>) -> Array2<f64> {
        let mut delta = Array2::zeros(x.raw_dim());
        let scale = (self.config.key_size.max(1) as f64).sqrt();
        for h in &self.weights.blocks[block].heads {
            let q = x.dot(&h.w_q);
            let k = x.dot(&h.w_k);
            let logits = q.dot(&k.t()) / scale;
            let a = softmax_rows(logits.view(), self.config.causal);
            delta += &a.dot(&x.dot(&h.w_v)).dot(&h.w_o);
        }
        delta
    }

    pub fn mlp_delta(&self, block: usize, x: ArrayView2<f64>) -> Array2<f64> {
        let m = &self.weights.blocks[block].mlp;
        relu(&x.dot(&m.w1)).dot(&m.w2)
    }

    /// Delta of sublayer `k` (even: attention, odd: MLP).
    pub fn sublayer_delta(&self, k: usize, x: ArrayView2<f64>) -> Array2<f64> {
        if k % 2 == 0 {
            self.attention_delta(k / 2, x)
        } else {
            self.mlp_delta(k / 2, x)
        }
    }

    /// Decodes the non-BOS rows of a final residual stream.
    pub fn decode(&self, x: ArrayView2<f64>) -> ValueSeq {
        let u = &self.weights.unembed;
        let scores = x.slice(s![1.., ..]).dot(&u.matrix);
        scores
            .rows()
            .into_iter()
            .map(|row| match u.kind {
                Encoding::Numerical => Some(Value::num(row[0])),
                Encoding::Categorical => {
                    let (best, max) = row.iter().enumerate().fold(
                        (None, f64::NEG_INFINITY),
                        |(bi, bm), (i, &v)| if v > bm { (Some(i), v) } else { (bi, bm) },
                    );
                    match best {
                        Some(i) if max >= CATEGORICAL_PRESENCE => Some(u.values[i].clone()),
                        _ => None,
                    }
                }
            })
            .collect()
    }

    /// Runs the model. With `trace`, also records the residual stream after
    /// the embedding and after every sublayer.
    pub fn forward(
        &self,
        tokens: &[Value],
        trace: bool,
    ) -> Result<(ValueSeq, Option<ResidualTrace>), RuntimeError> {
        let mut x = self.embed(tokens)?;
        let mut rec = trace.then(|| ResidualTrace::start(self, tokens, &x));
        for k in 0..self.num_sublayers() {
            let delta = self.sublayer_delta(k, x.view());
            x += &delta;
            if let Some(t) = rec.as_mut() {
                t.push(&x, delta);
            }
        }
        Ok((self.decode(x.view()), rec))
    }

    pub fn run(&self, tokens: &[Value]) -> Result<ValueSeq, RuntimeError> {
        Ok(self.forward(tokens, false)?.0)
    }

    /// Checks that every matrix agrees with the configuration.
    pub fn check_shapes(&self) -> Result<(), RuntimeError> {
        let c = &self.config;
        let w = &self.weights;
        let d = c.d_model;
        let expect = |what: &str, m: &Array2<f64>, shape: (usize, usize)| {
            if m.dim() == shape {
                Ok(())
            } else {
                Err(RuntimeError::Shape(format!(
                    "{what} is {:?}, expected {shape:?}",
                    m.dim()
                )))
            }
        };
        if self.residual_labels.len() != d {
            return Err(RuntimeError::Shape(format!(
                "{} residual labels for d_model {d}",
                self.residual_labels.len()
            )));
        }
        if w.blocks.len() != c.num_blocks
            || c.heads_per_layer.len() != c.num_blocks
            || c.mlp_hidden_sizes.len() != c.num_blocks
        {
            return Err(RuntimeError::Shape("block count".into()));
        }
        expect("token embedding", &w.token_embed, (c.vocab.len() + 1, d))?;
        expect("position embedding", &w.pos_embed, (c.max_seq_len, d))?;
        for (b, block) in w.blocks.iter().enumerate() {
            if block.heads.len() != c.heads_per_layer[b] {
                return Err(RuntimeError::Shape(format!("head count in block {b}")));
            }
            for h in &block.heads {
                expect("w_q", &h.w_q, (d, c.key_size))?;
                expect("w_k", &h.w_k, (d, c.key_size))?;
                expect("w_v", &h.w_v, (d, c.value_size))?;
                expect("w_o", &h.w_o, (c.value_size, d))?;
            }
            let hidden = c.mlp_hidden_sizes[b];
            expect("w1", &block.mlp.w1, (d, hidden))?;
            expect("w2", &block.mlp.w2, (hidden, d))?;
        }
        let outs = w.unembed.labels.len();
        expect("unembedding", &w.unembed.matrix, (d, outs))?;
        if w.unembed.kind == Encoding::Categorical && w.unembed.values.len() != outs {
            return Err(RuntimeError::Shape("unembedding values".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Two tokens, identity "model" with no sublayers.
    fn passthrough() -> CompiledModel {
        CompiledModel {
            config: ModelConfig {
                num_blocks: 0,
                d_model: 3,
                heads_per_layer: vec![],
                key_size: 0,
                value_size: 0,
                mlp_hidden_sizes: vec![],
                vocab: vec![Value::str("a"), Value::str("b")],
                max_seq_len: 3,
                causal: false,
            },
            weights: TransformerWeights {
                token_embed: array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                pos_embed: Array2::zeros((3, 3)),
                blocks: vec![],
                unembed: Unembedding {
                    kind: Encoding::Categorical,
                    labels: vec!["tokens:a".into(), "tokens:b".into()],
                    values: vec![Value::str("a"), Value::str("b")],
                    matrix: array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]],
                },
            },
            residual_labels: vec!["tokens:a".into(), "tokens:b".into(), "tokens:bos".into()],
        }
    }

    #[test]
    fn identity_model_echoes_input() {
        let m = passthrough();
        m.check_shapes().unwrap();
        let input = [Value::str("b"), Value::str("a")];
        assert_eq!(m.run(&input).unwrap(), vec![Some(Value::str("b")), Some(Value::str("a"))]);
    }

    #[test]
    fn input_errors() {
        let m = passthrough();
        assert!(matches!(
            m.run(&[Value::str("q")]),
            Err(RuntimeError::UnknownToken(_))
        ));
        let long = vec![Value::str("a"); 3];
        assert!(matches!(m.run(&long), Err(RuntimeError::TooLong { .. })));
        assert!(m.run(&[Value::str("q")]).unwrap_err().to_string().contains("token not in vocabulary"));
    }
}
