use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AttentionHead, Block, CompiledModel, Mlp, ModelConfig, RuntimeError, TransformerWeights, Unembedding};
use crate::rasp::Encoding;
use crate::value::Value;

pub const WEIGHTS_VERSION: u64 = 1;

type Rows = Vec<Vec<f64>>;

#[derive(Serialize, Deserialize)]
struct FileEmbed {
    token: Rows,
    position: Rows,
}

#[derive(Serialize, Deserialize)]
struct FileHead {
    w_q: Rows,
    w_k: Rows,
    w_v: Rows,
    w_o: Rows,
}

#[derive(Serialize, Deserialize)]
struct FileAttention {
    heads: Vec<FileHead>,
}

#[derive(Serialize, Deserialize)]
struct FileMlp {
    w1: Rows,
    w2: Rows,
}

#[derive(Serialize, Deserialize)]
struct FileBlock {
    attention: FileAttention,
    mlp: FileMlp,
}

#[derive(Serialize, Deserialize)]
struct FileUnembed {
    kind: Encoding,
    labels: Vec<String>,
    values: Vec<Value>,
    matrix: Rows,
}

#[derive(Serialize, Deserialize)]
struct WeightFile {
    version: u64,
    config: ModelConfig,
    residual_labels: Vec<String>,
    embed: FileEmbed,
    blocks: Vec<FileBlock>,
    unembed: FileUnembed,
}

fn rows(m: &Array2<f64>) -> Rows {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(what: &str, r: Rows, shape: (usize, usize)) -> Result<Array2<f64>, RuntimeError> {
    let bad = || RuntimeError::Shape(format!("{what}: expected {} x {}", shape.0, shape.1));
    if r.len() != shape.0 || r.iter().any(|row| row.len() != shape.1) {
        return Err(bad());
    }
    Array2::from_shape_vec(shape, r.into_iter().flatten().collect()).map_err(|_| bad())
}

pub fn model_to_json(model: &CompiledModel) -> String {
    let w = &model.weights;
    let file = WeightFile {
        version: WEIGHTS_VERSION,
        config: model.config.clone(),
        residual_labels: model.residual_labels.clone(),
        embed: FileEmbed {
            token: rows(&w.token_embed),
            position: rows(&w.pos_embed),
        },
        blocks: w
            .blocks
            .iter()
            .map(|b| FileBlock {
                attention: FileAttention {
                    heads: b
                        .heads
                        .iter()
                        .map(|h| FileHead {
                            w_q: rows(&h.w_q),
                            w_k: rows(&h.w_k),
                            w_v: rows(&h.w_v),
                            w_o: rows(&h.w_o),
                        })
                        .collect(),
                },
                mlp: FileMlp {
                    w1: rows(&b.mlp.w1),
                    w2: rows(&b.mlp.w2),
                },
            })
            .collect(),
        unembed: FileUnembed {
            kind: w.unembed.kind,
            labels: w.unembed.labels.clone(),
            values: w.unembed.values.clone(),
            matrix: rows(&w.unembed.matrix),
        },
    };
    serde_json::to_string(&file).expect("weights serialize")
}

pub fn model_from_json(text: &str) -> Result<CompiledModel, RuntimeError> {
    // read the version first so that a newer layout is reported as such
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| RuntimeError::Malformed(e.to_string()))?;
    let version = raw
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| RuntimeError::Malformed("missing `version`".into()))?;
    if version != WEIGHTS_VERSION {
        return Err(RuntimeError::Version {
            found: version,
            expected: WEIGHTS_VERSION,
        });
    }
    let file: WeightFile =
        serde_json::from_value(raw).map_err(|e| RuntimeError::Malformed(e.to_string()))?;
    let c = file.config;
    let d = c.d_model;
    if c.heads_per_layer.len() != c.num_blocks
        || c.mlp_hidden_sizes.len() != c.num_blocks
        || file.blocks.len() != c.num_blocks
    {
        return Err(RuntimeError::Shape("block count does not match config".into()));
    }
    let mut blocks = Vec::with_capacity(c.num_blocks);
    for (b, fb) in file.blocks.into_iter().enumerate() {
        let hidden = c.mlp_hidden_sizes[b];
        let heads = fb
            .attention
            .heads
            .into_iter()
            .map(|h| {
                Ok(AttentionHead {
                    w_q: matrix("w_q", h.w_q, (d, c.key_size))?,
                    w_k: matrix("w_k", h.w_k, (d, c.key_size))?,
                    w_v: matrix("w_v", h.w_v, (d, c.value_size))?,
                    w_o: matrix("w_o", h.w_o, (c.value_size, d))?,
                })
            })
            .collect::<Result<Vec<_>, RuntimeError>>()?;
        blocks.push(Block {
            heads,
            mlp: Mlp {
                w1: matrix("w1", fb.mlp.w1, (d, hidden))?,
                w2: matrix("w2", fb.mlp.w2, (hidden, d))?,
            },
        });
    }
    let outs = file.unembed.labels.len();
    let weights = TransformerWeights {
        token_embed: matrix("token embedding", file.embed.token, (c.vocab.len() + 1, d))?,
        pos_embed: matrix("position embedding", file.embed.position, (c.max_seq_len, d))?,
        blocks,
        unembed: Unembedding {
            kind: file.unembed.kind,
            labels: file.unembed.labels,
            values: file.unembed.values,
            matrix: matrix("unembedding", file.unembed.matrix, (d, outs))?,
        },
    };
    let model = CompiledModel {
        config: c,
        weights,
        residual_labels: file.residual_labels,
    };
    model.check_shapes()?;
    Ok(model)
}

pub fn save_weights(model: &CompiledModel, path: impl AsRef<Path>) -> Result<(), RuntimeError> {
    std::fs::write(path, model_to_json(model))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<CompiledModel, RuntimeError> {
    model_from_json(&std::fs::read_to_string(path)?)
}
