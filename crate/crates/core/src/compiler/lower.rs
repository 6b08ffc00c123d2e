//! Lowering of single graph nodes to craft blocks.

use ndarray::Array2;

use super::{CompGraph, CompileError, CompileOptions};
use crate::craft::{BasisDirection, CraftAttentionHead, CraftMLP, LinearMap, VectorSpace};
use crate::rasp::{Encoding, NodeId, Op, ScalarExpr};
use crate::value::{num_close, Value, VALUE_SET_RTOL};

/// BOS logit for aggregates: below a selected key, above an unselected one.
pub const AGGREGATE_BOS_BETA: f64 = 0.5;
/// BOS logit for selector width: BOS is always attended like a selected key.
pub const SELECTOR_WIDTH_BOS_BETA: f64 = 1.0;

/// The residual directions owned by node `id`.
pub fn node_space(graph: &CompGraph, id: NodeId) -> VectorSpace {
    let node = graph.node(id);
    let dirs: Vec<BasisDirection> = match graph.encoding(id) {
        Encoding::Numerical => vec![BasisDirection::numerical(&node.name)],
        Encoding::Categorical => graph
            .value_set(id)
            .iter()
            .map(|v| BasisDirection::categorical(&node.name, v.clone()))
            .collect(),
    };
    VectorSpace::owned(&format!("node:{}", node.name), dirs)
}

/// Scratch direction holding `1 / (1 + width)` for a selector width node.
pub fn selector_width_scratch(name: &str) -> BasisDirection {
    BasisDirection::numerical(format!("{name}_selector_width_attn_output"))
}

fn hidden_space(name: &str, units: usize) -> VectorSpace {
    VectorSpace::new((0..units).map(|i| BasisDirection::categorical(format!("{name}_hidden"), i as i64)))
}

fn unit(name: &str, i: usize) -> BasisDirection {
    BasisDirection::categorical(format!("{name}_hidden"), i as i64)
}

fn category(name: &str, v: &Value) -> BasisDirection {
    BasisDirection::categorical(name, v.clone())
}

/// One hidden unit: input weights and output weights, by direction.
#[derive(Default)]
struct Unit {
    input: Vec<(BasisDirection, f64)>,
    output: Vec<(BasisDirection, f64)>,
}

/// Builds an MLP from a list of units, with the given residual input and
/// output spaces. Units are numbered in order.
fn assemble_mlp(
    name: &str,
    input: VectorSpace,
    output: VectorSpace,
    units: Vec<Unit>,
    options: &CompileOptions,
) -> Result<CraftMLP, CompileError> {
    if units.len() > options.max_hidden {
        return Err(CompileError::TooManyHidden {
            node: name.to_string(),
            units: units.len(),
            cap: options.max_hidden,
        });
    }
    let hidden = hidden_space(name, units.len());
    let mut w1 = LinearMap::zeros(input, hidden.clone());
    let mut w2 = LinearMap::zeros(hidden, output);
    for (i, u) in units.iter().enumerate() {
        let h = unit(name, i);
        for (d, w) in &u.input {
            w1.add_entry(d, &h, *w)?;
        }
        for (d, w) in &u.output {
            w2.add_entry(&h, d, *w)?;
        }
    }
    Ok(CraftMLP::new(name, w1, w2)?)
}

/// Numeric value of a function output written into a numerical direction.
fn magnitude(node: &str, v: &Value) -> Result<f64, CompileError> {
    v.as_f64().ok_or_else(|| CompileError::Unsupported {
        node: node.to_string(),
        reason: format!("numerical output has non-numeric value {v}"),
    })
}

/// Output weights writing value `v` with unit strength `scale`.
fn write_output(
    graph: &CompGraph,
    id: NodeId,
    v: &Value,
    scale: f64,
) -> Result<Vec<(BasisDirection, f64)>, CompileError> {
    let name = &graph.node(id).name;
    Ok(match graph.encoding(id) {
        Encoding::Numerical => vec![(BasisDirection::numerical(name), scale * magnitude(name, v)?)],
        Encoding::Categorical => vec![(category(name, v), scale)],
    })
}

/// Lowers a map or sequence map to an MLP.
///
/// Categorical inputs use a lookup table: one unit per input value (per
/// value pair for sequence maps). Numerical inputs are either read
/// linearly, when the function is affine and the output numerical, or
/// discretized into step functions between the annotated input values.
pub fn lower_map(graph: &CompGraph, id: NodeId, options: &CompileOptions) -> Result<CraftMLP, CompileError> {
    let node = graph.node(id);
    let name = node.name.clone();
    let out_space = node_space(graph, id);
    let unsupported = |reason: &str| CompileError::Unsupported {
        node: name.clone(),
        reason: reason.to_string(),
    };
    let one = BasisDirection::one();
    match &node.op {
        Op::Map { func, input } => {
            let in_enc = graph.encoding(*input);
            match in_enc {
                Encoding::Categorical => {
                    let in_name = &graph.node(*input).name;
                    let in_dirs: Vec<(BasisDirection, Value)> = graph
                        .value_set(*input)
                        .iter()
                        .map(|v| (category(in_name, v), v.clone()))
                        .collect();
                    let mut units = Vec::with_capacity(in_dirs.len());
                    for (d, v) in &in_dirs {
                        let out = func.eval(std::slice::from_ref(v)).map_err(|e| unsupported(&e.to_string()))?;
                        units.push(Unit {
                            input: vec![(d.clone(), 1.0), (one.clone(), -0.5)],
                            output: write_output(graph, id, &out, 2.0)?,
                        });
                    }
                    let input = VectorSpace::new(in_dirs.into_iter().map(|(d, _)| d).chain([one]));
                    assemble_mlp(&name, input, out_space, units, options)
                }
                Encoding::Numerical => {
                    let x = BasisDirection::numerical(&graph.node(*input).name);
                    let affine = match graph.encoding(id) {
                        Encoding::Numerical => func.as_affine(1),
                        Encoding::Categorical => None,
                    };
                    let mut units = match affine {
                        Some((c, k)) => affine_units(&name, &[x.clone()], &c, k),
                        None => discretize_units(graph, id, func, *input, &x, options)?,
                    };
                    clean_bos(&mut units, &[(x.clone(), numeric_inputs(graph, *input))]);
                    let input = VectorSpace::new([x, one, BasisDirection::bos()]);
                    assemble_mlp(&name, input, out_space, units, options)
                }
            }
        }
        Op::SequenceMap { func, lhs, rhs } => {
            match (graph.encoding(*lhs), graph.encoding(*rhs)) {
                (Encoding::Categorical, Encoding::Categorical) => {
                    let ln = &graph.node(*lhs).name;
                    let rn = &graph.node(*rhs).name;
                    let mut units = Vec::new();
                    for a in graph.value_set(*lhs) {
                        for b in graph.value_set(*rhs) {
                            // reading one s-op twice, only equal values co-occur
                            if lhs == rhs && a != b {
                                continue;
                            }
                            let out = func
                                .eval(&[a.clone(), b.clone()])
                                .map_err(|e| unsupported(&e.to_string()))?;
                            units.push(Unit {
                                input: vec![(category(ln, a), 1.0), (category(rn, b), 1.0), (one.clone(), -1.0)],
                                output: write_output(graph, id, &out, 1.0)?,
                            });
                        }
                    }
                    let input = VectorSpace::new(
                        node_space(graph, *lhs)
                            .basis()
                            .iter()
                            .chain(node_space(graph, *rhs).basis())
                            .cloned()
                            .chain([one]),
                    );
                    assemble_mlp(&name, input, out_space, units, options)
                }
                (Encoding::Numerical, Encoding::Numerical) if graph.encoding(id) == Encoding::Numerical => {
                    let Some((c, k)) = func.as_affine(2) else {
                        return Err(unsupported(
                            "a sequence map over numerical s-ops must be affine with a numerical output",
                        ));
                    };
                    let x = BasisDirection::numerical(&graph.node(*lhs).name);
                    let y = BasisDirection::numerical(&graph.node(*rhs).name);
                    let (vars, coeffs) = if lhs == rhs {
                        (vec![x.clone()], vec![c[0] + c[1]])
                    } else {
                        (vec![x.clone(), y.clone()], c)
                    };
                    let mut units = affine_units(&name, &vars, &coeffs, k);
                    let mut ranges = vec![(x, numeric_inputs(graph, *lhs))];
                    if lhs != rhs {
                        ranges.push((y, numeric_inputs(graph, *rhs)));
                    }
                    clean_bos(&mut units, &ranges);
                    let input = VectorSpace::new(vars.into_iter().chain([one, BasisDirection::bos()]));
                    assemble_mlp(&name, input, out_space, units, options)
                }
                _ => Err(unsupported(
                    "sequence maps must read two categorical s-ops, or two numerical s-ops through an affine function",
                )),
            }
        }
        _ => Err(unsupported("not an elementwise operation")),
    }
}

/// Numeric values a numerical operand can present, 0 included.
fn numeric_inputs(graph: &CompGraph, id: NodeId) -> Vec<f64> {
    let mut xs = graph.value_set(id).numeric_values().unwrap_or_default();
    xs.push(0.0);
    xs
}

/// `c . x + k` from `ReLU(x) - ReLU(-x)` pairs and a constant unit.
fn affine_units(node: &str, vars: &[BasisDirection], coeffs: &[f64], k: f64) -> Vec<Unit> {
    let out = BasisDirection::numerical(node);
    let mut units = Vec::new();
    for (x, c) in vars.iter().zip(coeffs) {
        if *c == 0.0 {
            continue;
        }
        units.push(Unit {
            input: vec![(x.clone(), 1.0)],
            output: vec![(out.clone(), *c)],
        });
        units.push(Unit {
            input: vec![(x.clone(), -1.0)],
            output: vec![(out.clone(), -*c)],
        });
    }
    if k != 0.0 {
        units.push(Unit {
            input: vec![(BasisDirection::one(), 1.0)],
            output: vec![(out, k)],
        });
    }
    units
}

/// Step-function approximation of `func` over the annotated inputs of a
/// numerical s-op (0 included, since a missing value reads as 0).
fn discretize_units(
    graph: &CompGraph,
    id: NodeId,
    func: &ScalarExpr,
    input: NodeId,
    x: &BasisDirection,
    options: &CompileOptions,
) -> Result<Vec<Unit>, CompileError> {
    let mut points: Vec<(f64, Value)> = graph
        .value_set(input)
        .iter()
        .map(|v| (v.as_f64().expect("numerical s-ops hold numbers"), v.clone()))
        .collect();
    if !points.iter().any(|(p, _)| *p == 0.0) {
        points.push((0.0, Value::num(0.0)));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    points.dedup_by(|b, a| num_close(a.0, b.0, VALUE_SET_RTOL));
    let table = points
        .into_iter()
        .map(|(p, v)| Ok((p, func.eval(std::slice::from_ref(&v))?)))
        .collect::<Result<Vec<_>, crate::rasp::ScalarError>>()
        .map_err(|e| CompileError::Unsupported {
            node: graph.node(id).name.clone(),
            reason: e.to_string(),
        })?;
    step_units(graph, id, &table, x, options)
}

/// Units reproducing a lookup table `(x_i, f(x_i))` sorted by `x_i`.
///
/// Thresholds sit midway between neighbouring inputs. Each threshold uses
/// two units `ReLU((x - t) / delta +- 0.5)` whose difference rises from 0 to
/// 1 across `t +- delta / 2`, so the result is exact at every table entry.
/// A constant unit writes `f(x_0)`.
fn step_units(
    graph: &CompGraph,
    id: NodeId,
    table: &[(f64, Value)],
    x: &BasisDirection,
    options: &CompileOptions,
) -> Result<Vec<Unit>, CompileError> {
    let min_gap = table
        .windows(2)
        .map(|w| w[1].0 - w[0].0)
        .fold(f64::INFINITY, f64::min);
    let delta = if min_gap.is_finite() {
        min_gap / options.bucket_divisor
    } else {
        1.0
    };
    let mut units = vec![Unit {
        input: vec![(BasisDirection::one(), 1.0)],
        output: write_output(graph, id, &table[0].1, 1.0)?,
    }];
    for pair in table.windows(2) {
        let [(lo, before), (hi, after)] = pair else { unreachable!() };
        let t = (lo + hi) / 2.0;
        let mut rise = write_output(graph, id, after, 1.0)?;
        rise.extend(write_output(graph, id, before, -1.0)?);
        let fall: Vec<_> = rise.iter().map(|(d, w)| (d.clone(), -w)).collect();
        for (offset, output) in [(0.5, rise), (-0.5, fall)] {
            units.push(Unit {
                input: vec![(x.clone(), 1.0 / delta), (BasisDirection::one(), -t / delta + offset)],
                output,
            });
        }
    }
    Ok(units)
}

/// Switches every unit off at the BOS position, so that numerical readers
/// never write there.
fn clean_bos(units: &mut [Unit], ranges: &[(BasisDirection, Vec<f64>)]) {
    for u in units.iter_mut() {
        let weight = |d: &BasisDirection| -> f64 { u.input.iter().filter(|(e, _)| e == d).map(|(_, w)| w).sum() };
        // bound on the pre-activation over every annotated input
        let mut bound = weight(&BasisDirection::one()).abs();
        for (d, xs) in ranges {
            let w = weight(d);
            bound += xs.iter().fold(0.0f64, |m, x| m.max((w * x).abs()));
        }
        u.input.push((BasisDirection::bos(), -(1.0 + bound)));
    }
}

/// The logit table of a selector over its query and key directions, and
/// the two spaces.
fn selector_pattern(
    graph: &CompGraph,
    selector: NodeId,
    user: NodeId,
) -> Result<(VectorSpace, VectorSpace, Array2<f64>), CompileError> {
    let Op::Select {
        keys,
        queries,
        predicate,
    } = &graph.node(selector).op
    else {
        return Err(CompileError::NotValidated(format!(
            "`{}` is not a single select",
            graph.node(selector).name
        )));
    };
    for s in [keys, queries] {
        if graph.encoding(*s) != Encoding::Categorical {
            return Err(CompileError::Unsupported {
                node: graph.node(user).name.clone(),
                reason: format!(
                    "attention reads `{}`, a numerical s-op; selectors need categorical queries and keys",
                    graph.node(*s).name
                ),
            });
        }
    }
    let q_space = node_space(graph, *queries);
    let k_space = node_space(graph, *keys);
    let q_vals = graph.value_set(*queries).as_slice();
    let k_vals = graph.value_set(*keys).as_slice();
    let mut direct = Array2::zeros((q_vals.len(), k_vals.len()));
    for (i, q) in q_vals.iter().enumerate() {
        for (j, k) in k_vals.iter().enumerate() {
            let hit = predicate.eval(k, q).map_err(|e| CompileError::Unsupported {
                node: graph.node(selector).name.clone(),
                reason: e.to_string(),
            })?;
            direct[[i, j]] = if hit { 1.0 } else { 0.0 };
        }
    }
    Ok((q_space, k_space, direct))
}

/// Lowers an aggregate (with its selector) to one attention head.
pub fn lower_selector_aggregate(
    graph: &CompGraph,
    id: NodeId,
    options: &CompileOptions,
) -> Result<CraftAttentionHead, CompileError> {
    let node = graph.node(id);
    let Op::Aggregate { selector, sop } = &node.op else {
        return Err(CompileError::NotValidated(format!("`{}` is not an aggregate", node.name)));
    };
    let (query_space, key_space, direct) = selector_pattern(graph, *selector, id)?;
    let value_space = node_space(graph, *sop);
    let out_space = node_space(graph, id);
    let src = &graph.node(*sop).name;
    let mut w_ov = LinearMap::zeros(value_space, out_space);
    match graph.encoding(id) {
        Encoding::Numerical => {
            w_ov.add_entry(&BasisDirection::numerical(src), &BasisDirection::numerical(&node.name), 1.0)?;
        }
        Encoding::Categorical => {
            for v in graph.value_set(*sop) {
                w_ov.add_entry(&category(src, v), &category(&node.name, v), 1.0)?;
            }
        }
    }
    Ok(CraftAttentionHead {
        name: node.name.clone(),
        query_space,
        key_space,
        direct,
        w_ov,
        bos_beta: AGGREGATE_BOS_BETA,
        inv_temperature: options.inv_temperature,
    })
}

/// Lowers a selector width to an attention head that measures
/// `1 / (1 + width)` by always attending to BOS, followed by an MLP that
/// inverts it.
pub fn lower_selector_width(
    graph: &CompGraph,
    id: NodeId,
    options: &CompileOptions,
) -> Result<(CraftAttentionHead, CraftMLP), CompileError> {
    let node = graph.node(id);
    let Op::SelectorWidth { selector } = &node.op else {
        return Err(CompileError::NotValidated(format!("`{}` is not a selector width", node.name)));
    };
    let (query_space, key_space, direct) = selector_pattern(graph, *selector, id)?;
    let scratch = selector_width_scratch(&node.name);
    let bos = BasisDirection::bos();
    let mut w_ov = LinearMap::zeros(
        VectorSpace::new([bos.clone()]),
        VectorSpace::owned(&format!("node:{}", node.name), [scratch.clone()]),
    );
    w_ov.add_entry(&bos, &scratch, 1.0)?;
    let head = CraftAttentionHead {
        name: format!("{}_attn", node.name),
        query_space,
        key_space,
        direct,
        w_ov,
        bos_beta: SELECTOR_WIDTH_BOS_BETA,
        inv_temperature: options.inv_temperature,
    };

    // x = 1 / (1 + w) for w = 0..=n; the table maps x back to w
    let n = options.max_seq_len;
    let xs: Vec<f64> = (0..=n).map(|w| 1.0 / (1.0 + w as f64)).collect();
    let table: Vec<(f64, Value)> = (0..=n).rev().map(|w| (xs[w], Value::num(w as f64))).collect();
    let mut units = step_units(graph, id, &table, &scratch, options)?;
    clean_bos(&mut units, &[(scratch.clone(), xs)]);
    let input = VectorSpace::new([scratch, BasisDirection::one(), bos]);
    let mlp = assemble_mlp(&node.name, input, node_space(graph, id), units, options)?;
    Ok((head, mlp))
}
