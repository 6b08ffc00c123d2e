use ndarray::{s, Array2};

use super::lower::{lower_map, lower_selector_aggregate, lower_selector_width, node_space};
use super::{CompGraph, CompileError, CompileOptions};
use crate::craft::{combine_parallel, BasisDirection, CraftBlock, CraftLayer, VectorSpace};
use crate::rasp::{Encoding, Op};
use crate::runtime::{AttentionHead, Block, CompiledModel, Mlp, ModelConfig, TransformerWeights, Unembedding};
use crate::value::Value;

/// The assembled model in labelled form, before factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct CraftModel {
    pub residual: VectorSpace,
    /// One entry per sublayer slot; `None` for a no-op.
    pub layers: Vec<Option<CraftLayer>>,
    pub causal: bool,
}

impl CraftModel {
    /// Runs every layer on a residual expressed in `self.residual`.
    pub fn apply_layers(&self, mut x: Array2<f64>) -> Result<Array2<f64>, CompileError> {
        for layer in self.layers.iter().flatten() {
            let delta = layer.apply(&self.residual, x.view(), self.causal)?;
            x += &delta;
        }
        Ok(x)
    }
}

/// Lowers every node and groups the blocks by slot.
pub fn lower_blocks(
    graph: &CompGraph,
    num_blocks: usize,
    options: &CompileOptions,
) -> Result<Vec<Vec<CraftBlock>>, CompileError> {
    let mut slots: Vec<Vec<CraftBlock>> = vec![Vec::new(); 2 * num_blocks];
    for &id in &graph.order {
        let slot = graph.slot(id);
        match graph.node(id).op {
            Op::Map { .. } | Op::SequenceMap { .. } => {
                slots[slot as usize].push(CraftBlock::Mlp(lower_map(graph, id, options)?));
            }
            Op::Aggregate { .. } => {
                slots[slot as usize].push(CraftBlock::Attention(lower_selector_aggregate(graph, id, options)?));
            }
            Op::SelectorWidth { .. } => {
                let (head, mlp) = lower_selector_width(graph, id, options)?;
                slots[slot as usize - 1].push(CraftBlock::Attention(head));
                slots[slot as usize].push(CraftBlock::Mlp(mlp));
            }
            _ => {}
        }
    }
    Ok(slots)
}

/// Residual space: token one-hots, BOS, index one-hots, `one`, constants,
/// then every computed node's directions (with scratch directions) in
/// dependency order.
pub fn residual_space(graph: &CompGraph, options: &CompileOptions) -> Result<VectorSpace, CompileError> {
    let mut vocab = options.vocab.clone();
    vocab.sort();
    let embedding = VectorSpace::owned(
        "embedding",
        vocab
            .iter()
            .map(|t| BasisDirection::categorical("tokens", t.clone()))
            .chain([BasisDirection::bos()])
            .chain((0..options.max_seq_len).map(|i| BasisDirection::categorical("indices", i as i64)))
            .chain([BasisDirection::one()]),
    );
    let mut parts = vec![embedding];
    let computed = |op: &Op| !matches!(op, Op::Tokens | Op::Indices | Op::Select { .. });
    for &id in &graph.order {
        if matches!(graph.node(id).op, Op::Constant(_)) {
            parts.push(node_space(graph, id));
        }
    }
    for &id in &graph.order {
        let node = graph.node(id);
        if !computed(&node.op) || matches!(node.op, Op::Constant(_)) {
            continue;
        }
        if let Op::SelectorWidth { .. } = node.op {
            parts.push(VectorSpace::owned(
                &format!("node:{}", node.name),
                [super::lower::selector_width_scratch(&node.name)],
            ));
        }
        parts.push(node_space(graph, id));
    }
    let refs: Vec<&VectorSpace> = parts.iter().collect();
    Ok(VectorSpace::direct_sum(&refs)?)
}

/// Injection of the directions of `sub` into the residual, as a
/// `|residual| x width` matrix (extra columns are zero padding).
fn injection(residual: &VectorSpace, sub: &VectorSpace, width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((residual.dim(), width));
    for (j, d) in sub.basis().iter().enumerate() {
        if let Some(i) = residual.index_of(d) {
            m[[i, j]] = 1.0;
        }
    }
    m
}

/// Stacks the layers into a transformer and factors every head's bilinear
/// and value-output maps into separate query, key, value and output
/// matrices.
pub fn assemble(
    graph: &CompGraph,
    residual: VectorSpace,
    slots: Vec<Vec<CraftBlock>>,
    options: &CompileOptions,
) -> Result<(CompiledModel, CraftModel), CompileError> {
    let layers = slots
        .into_iter()
        .map(|blocks| if blocks.is_empty() { Ok(None) } else { combine_parallel(blocks).map(Some) })
        .collect::<Result<Vec<_>, _>>()?;
    let craft = CraftModel {
        residual,
        layers,
        causal: options.causal,
    };
    let space = &craft.residual;
    let d = space.dim();
    let num_blocks = craft.layers.len() / 2;

    // widths shared by every head
    let mut key_size = 0;
    let mut value_size = 0;
    for layer in craft.layers.iter().flatten() {
        if let CraftLayer::Attention(heads) = layer {
            for h in heads {
                key_size = key_size.max(h.w_qk().output.dim());
                value_size = value_size.max(h.w_ov.input.dim());
            }
        }
    }

    let mut blocks = Vec::with_capacity(num_blocks);
    let mut heads_per_layer = Vec::with_capacity(num_blocks);
    let mut mlp_hidden_sizes = Vec::with_capacity(num_blocks);
    for b in 0..num_blocks {
        let heads = match &craft.layers[2 * b] {
            Some(CraftLayer::Attention(heads)) => heads
                .iter()
                .map(|h| {
                    let qk = h.w_qk();
                    let e_k = injection(space, &qk.output, key_size);
                    let bilinear = qk.embed(space, &qk.output);
                    let mut w_q = Array2::zeros((d, key_size));
                    w_q.slice_mut(s![.., ..qk.output.dim()])
                        .assign(&(bilinear * (key_size as f64).sqrt()));
                    let e_v = injection(space, &h.w_ov.input, value_size);
                    let ov = h.w_ov.embed(&h.w_ov.input, space);
                    let mut w_o = Array2::zeros((value_size, d));
                    w_o.slice_mut(s![..h.w_ov.input.dim(), ..]).assign(&ov);
                    AttentionHead {
                        w_q,
                        w_k: e_k,
                        w_v: e_v,
                        w_o,
                    }
                })
                .collect(),
            Some(CraftLayer::Mlp(_)) => unreachable!("MLPs sit at odd slots"),
            None => Vec::new(),
        };
        let mlp = match &craft.layers[2 * b + 1] {
            Some(CraftLayer::Mlp(m)) => Mlp {
                w1: m.w1.embed(space, &m.w1.output),
                w2: m.w2.embed(&m.w2.input, space),
            },
            Some(CraftLayer::Attention(_)) => unreachable!("attention sits at even slots"),
            None => Mlp {
                w1: Array2::zeros((d, 0)),
                w2: Array2::zeros((0, d)),
            },
        };
        heads_per_layer.push(heads.len());
        mlp_hidden_sizes.push(mlp.w1.ncols());
        blocks.push(Block { heads, mlp });
    }

    let (token_embed, pos_embed) = embeddings(graph, space, options);
    let unembed = unembedding(graph, space);
    let model = CompiledModel {
        config: ModelConfig {
            num_blocks,
            d_model: d,
            heads_per_layer,
            key_size,
            value_size,
            mlp_hidden_sizes,
            vocab: options.vocab.clone(),
            max_seq_len: options.max_seq_len + 1,
            causal: options.causal,
        },
        weights: TransformerWeights {
            token_embed,
            pos_embed,
            blocks,
            unembed,
        },
        residual_labels: space.labels(),
    };
    model.check_shapes()?;
    Ok((model, craft))
}

fn set(m: &mut Array2<f64>, row: usize, space: &VectorSpace, d: &BasisDirection, v: f64) {
    if let Some(j) = space.index_of(d) {
        m[[row, j]] = v;
    }
}

/// Token rows set the token one-hot and `one`; position rows (after BOS)
/// set the index one-hot and every constant s-op.
fn embeddings(graph: &CompGraph, space: &VectorSpace, options: &CompileOptions) -> (Array2<f64>, Array2<f64>) {
    let d = space.dim();
    let vocab = &options.vocab;
    let mut tok = Array2::zeros((vocab.len() + 1, d));
    for (r, t) in vocab.iter().enumerate() {
        set(&mut tok, r, space, &BasisDirection::categorical("tokens", t.clone()), 1.0);
        set(&mut tok, r, space, &BasisDirection::one(), 1.0);
    }
    set(&mut tok, vocab.len(), space, &BasisDirection::bos(), 1.0);
    set(&mut tok, vocab.len(), space, &BasisDirection::one(), 1.0);

    let n = options.max_seq_len;
    let mut pos = Array2::zeros((n + 1, d));
    for p in 0..n {
        set(&mut pos, p + 1, space, &BasisDirection::categorical("indices", p as i64), 1.0);
        for &id in &graph.order {
            let node = graph.node(id);
            let Op::Constant(c) = &node.op else { continue };
            let Some(v) = c.at(p) else { continue };
            match graph.encoding(id) {
                Encoding::Numerical => {
                    set(&mut pos, p + 1, space, &BasisDirection::numerical(&node.name), v.as_f64().unwrap_or(0.0))
                }
                Encoding::Categorical => {
                    set(&mut pos, p + 1, space, &BasisDirection::categorical(&node.name, v.clone()), 1.0)
                }
            }
        }
    }
    (tok, pos)
}

/// Projection onto the output node's directions.
fn unembedding(graph: &CompGraph, space: &VectorSpace) -> Unembedding {
    let out = graph.program.output;
    let kind = graph.encoding(out);
    let group = graph.node(out).name.as_str();
    let (dirs, values): (Vec<BasisDirection>, Vec<Value>) = match kind {
        Encoding::Numerical => (vec![BasisDirection::numerical(group)], vec![]),
        Encoding::Categorical => graph
            .value_set(out)
            .iter()
            .map(|v| (BasisDirection::categorical(group, v.clone()), v.clone()))
            .unzip(),
    };
    let out_space = VectorSpace::new(dirs);
    Unembedding {
        kind,
        labels: out_space.labels(),
        values,
        matrix: injection(space, &out_space, out_space.dim()),
    }
}
