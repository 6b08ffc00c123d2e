use super::{CompGraph, CompileError, CompileOptions};
use crate::rasp::{Encoding, NodeId, Op, Predicate};
use crate::value::{Value, ValueSet};

/// Annotates every live node with a finite superset of the values it can
/// take on inputs up to `options.max_seq_len` tokens.
pub fn infer_values(graph: &mut CompGraph, options: &CompileOptions) -> Result<(), CompileError> {
    let n = options.max_seq_len;
    for &id in &graph.order.clone() {
        let node = graph.node(id);
        let fail = |reason: String| CompileError::ValueInference {
            node: node.name.clone(),
            reason,
        };
        let set: Option<ValueSet> = match &node.op {
            Op::Tokens => Some(options.vocab.iter().cloned().collect()),
            Op::Indices => Some((0..n).map(|i| Value::num(i as f64)).collect()),
            Op::Constant(c) => Some(c.values().into_iter().collect()),
            Op::Map { func, input } => {
                let xs = operand_values(graph, *input);
                let image = xs
                    .iter()
                    .map(|x| func.eval(std::slice::from_ref(x)))
                    .collect::<Result<ValueSet, _>>()
                    .map_err(|e| fail(e.to_string()))?;
                Some(image)
            }
            Op::SequenceMap { func, lhs, rhs } => {
                let xs = operand_values(graph, *lhs);
                let ys = operand_values(graph, *rhs);
                let mut image = Vec::with_capacity(xs.len() * ys.len());
                for x in &xs {
                    for y in &ys {
                        image.push(func.eval(&[x.clone(), y.clone()]).map_err(|e| fail(e.to_string()))?);
                    }
                }
                Some(image.into_iter().collect())
            }
            Op::Select { .. } => None,
            Op::SelectorWidth { .. } => Some((0..=n).map(|w| Value::num(w as f64)).collect()),
            Op::Aggregate { selector, sop } => {
                let values = graph.value_set(*sop).clone();
                match node.encoding.unwrap_or(Encoding::Categorical) {
                    Encoding::Numerical => Some(mean_values(&values, n).map_err(fail)?),
                    Encoding::Categorical => {
                        check_single_source(graph, *selector).map_err(fail)?;
                        Some(values)
                    }
                }
            }
            Op::SelectAnd(..) | Op::SelectOr(..) | Op::SelectNot(_) => {
                unreachable!("rejected by build_graph")
            }
        };
        graph.value_sets[id.0] = set;
    }
    Ok(())
}

/// The values a consumer can read from `id`: a missing numerical value
/// reads as 0.
fn operand_values(graph: &CompGraph, id: NodeId) -> Vec<Value> {
    let mut xs: Vec<Value> = graph.value_set(id).iter().cloned().collect();
    if graph.encoding(id) == Encoding::Numerical && graph.value_set(id).position(&Value::num(0.0)).is_none() {
        xs.push(Value::num(0.0));
    }
    xs
}

/// Possible means of a numerical s-op whose values lie in `{0, v}`:
/// `{v * k / m : 0 <= k <= m <= n}`.
fn mean_values(values: &ValueSet, n: usize) -> Result<ValueSet, String> {
    let nums = values
        .numeric_values()
        .ok_or("numerical aggregate over non-numeric values")?;
    let nonzero: ValueSet = nums.iter().filter(|x| **x != 0.0).map(|x| Value::num(*x)).collect();
    let v = match nonzero.len() {
        0 => return Ok([Value::num(0.0)].into_iter().collect()),
        1 => nonzero.as_slice()[0].as_f64().expect("numeric"),
        _ => {
            return Err(format!(
                "numerical aggregate needs values in {{0, v}}, found {}",
                values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
            ))
        }
    };
    Ok((1..=n.max(1))
        .flat_map(|m| (0..=m).map(move |k| Value::num(v * k as f64 / m as f64)))
        .collect())
}

/// A categorical aggregate cannot average one-hots, so each query value may
/// be matched by at most one key value. Positions sharing that key value
/// are left to the program (the interpreter rejects distinct values there).
fn check_single_source(graph: &CompGraph, selector: NodeId) -> Result<(), String> {
    let Op::Select {
        keys,
        queries,
        predicate,
    } = &graph.node(selector).op
    else {
        return Err("selector was not lowered to a single select".into());
    };
    if let Predicate::Compare(crate::rasp::Comparison::Eq) = predicate {
        return Ok(());
    }
    for q in graph.value_set(*queries) {
        let mut matched = Vec::new();
        for k in graph.value_set(*keys) {
            if predicate.eval(k, q).map_err(|e| e.to_string())? {
                matched.push(k.to_string());
            }
        }
        if matched.len() > 1 {
            return Err(format!(
                "categorical aggregate may average several values: query {q} selects keys {}; \
                 use a numerical aggregate or a selector matching one key value per query",
                matched.join(", ")
            ));
        }
    }
    Ok(())
}
