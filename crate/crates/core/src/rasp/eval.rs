use std::collections::BTreeSet;

use super::{Encoding, NodeId, Op, Program};
use crate::value::Value;

/// One value per input position; `None` where an aggregate selected nothing.
pub type ValueSeq = Vec<Option<Value>>;

/// Row-major `N x N` selection matrix: `m[query][key]`.
pub type SelectorMatrix = Vec<Vec<bool>>;

#[derive(Debug, Clone, PartialEq)]
pub enum NodeValue {
    Seq(ValueSeq),
    Sel(SelectorMatrix),
}

impl NodeValue {
    pub fn as_seq(&self) -> Option<&ValueSeq> {
        match self {
            NodeValue::Seq(s) => Some(s),
            NodeValue::Sel(_) => None,
        }
    }

    pub fn as_sel(&self) -> Option<&SelectorMatrix> {
        match self {
            NodeValue::Sel(m) => Some(m),
            NodeValue::Seq(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("token not in vocabulary: {0}")]
    UnknownToken(Value),
    #[error("in `{node}`: {source}")]
    Scalar {
        node: String,
        source: super::ScalarError,
    },
    #[error("categorical aggregate `{node}` averages distinct values {values:?} at position {position}")]
    CategoricalMean {
        node: String,
        position: usize,
        values: Vec<String>,
    },
    #[error("constant `{node}` has {have} values but the input has length {need}")]
    ConstantLength {
        node: String,
        have: usize,
        need: usize,
    },
    #[error("`{node}` is not a valid operand here")]
    Malformed { node: String },
    #[error("cyclic dependency through `{0}`")]
    Cycle(String),
    #[error("compound selector `{0}` cannot be evaluated before validation")]
    Unvalidated(String),
}

/// Reference interpreter: the semantic oracle for compiled models.
#[derive(Debug, Clone)]
pub struct Interpreter<'a> {
    program: &'a Program,
    vocab: Option<Vec<Value>>,
    causal: bool,
}

impl<'a> Interpreter<'a> {
    pub fn new(program: &'a Program) -> Self {
        Interpreter {
            program,
            vocab: None,
            causal: false,
        }
    }

    pub fn causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    /// Rejects input tokens outside `vocab`.
    pub fn vocab(mut self, vocab: &[Value]) -> Self {
        self.vocab = Some(vocab.to_vec());
        self
    }

    pub fn run(&self, tokens: &[Value]) -> Result<ValueSeq, EvalError> {
        let mut values = self.eval_nodes(tokens, &[self.program.output])?;
        match values[self.program.output.0].take() {
            Some(NodeValue::Seq(s)) => Ok(s),
            _ => Err(EvalError::Malformed {
                node: self.program.output_node().name.clone(),
            }),
        }
    }

    pub fn selector(&self, id: NodeId, tokens: &[Value]) -> Result<SelectorMatrix, EvalError> {
        let mut values = self.eval_nodes(tokens, &[id])?;
        match values[id.0].take() {
            Some(NodeValue::Sel(m)) => Ok(m),
            _ => Err(EvalError::Malformed {
                node: self.program.node(id).name.clone(),
            }),
        }
    }

    /// Values of every node reachable from the output (others are `None`).
    pub fn run_all(&self, tokens: &[Value]) -> Result<Vec<Option<NodeValue>>, EvalError> {
        self.eval_nodes(tokens, &[self.program.output])
    }

    fn eval_nodes(
        &self,
        tokens: &[Value],
        roots: &[NodeId],
    ) -> Result<Vec<Option<NodeValue>>, EvalError> {
        if let Some(vocab) = &self.vocab {
            if let Some(t) = tokens.iter().find(|t| !vocab.contains(t)) {
                return Err(EvalError::UnknownToken(t.clone()));
            }
        }
        let order = self
            .program
            .topo_order_from(roots)
            .map_err(|id| EvalError::Cycle(self.program.node(id).name.clone()))?;
        let mut values: Vec<Option<NodeValue>> = vec![None; self.program.nodes.len()];
        for id in order {
            let v = self.eval_node(id, tokens, &values)?;
            values[id.0] = Some(v);
        }
        Ok(values)
    }

    fn seq<'v>(&self, values: &'v [Option<NodeValue>], id: NodeId) -> Result<&'v ValueSeq, EvalError> {
        values[id.0]
            .as_ref()
            .and_then(NodeValue::as_seq)
            .ok_or_else(|| self.malformed(id))
    }

    fn sel<'v>(
        &self,
        values: &'v [Option<NodeValue>],
        id: NodeId,
    ) -> Result<&'v SelectorMatrix, EvalError> {
        values[id.0]
            .as_ref()
            .and_then(NodeValue::as_sel)
            .ok_or_else(|| self.malformed(id))
    }

    fn malformed(&self, id: NodeId) -> EvalError {
        EvalError::Malformed {
            node: self.program.node(id).name.clone(),
        }
    }

    /// Value of operand `id` at one position as seen by a consumer: a missing
    /// numerical value reads as 0, a missing categorical value stays missing.
    fn read(&self, seq: &ValueSeq, id: NodeId, pos: usize) -> Option<Value> {
        match &seq[pos] {
            Some(v) => Some(v.clone()),
            None if self.program.encoding(id) == Encoding::Numerical => Some(Value::num(0.0)),
            None => None,
        }
    }

    fn eval_node(
        &self,
        id: NodeId,
        tokens: &[Value],
        values: &[Option<NodeValue>],
    ) -> Result<NodeValue, EvalError> {
        let node = self.program.node(id);
        let n = tokens.len();
        let scalar_err = |source| EvalError::Scalar {
            node: node.name.clone(),
            source,
        };
        Ok(match &node.op {
            Op::Tokens => NodeValue::Seq(tokens.iter().cloned().map(Some).collect()),
            Op::Indices => NodeValue::Seq((0..n).map(|i| Some(Value::num(i as f64))).collect()),
            Op::Constant(c) => {
                let vals = (0..n)
                    .map(|i| c.at(i).cloned())
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| EvalError::ConstantLength {
                        node: node.name.clone(),
                        have: c.values().len(),
                        need: n,
                    })?;
                NodeValue::Seq(vals.into_iter().map(Some).collect())
            }
            Op::Map { func, input } => {
                let xs = self.seq(values, *input)?;
                let out = (0..n)
                    .map(|i| match self.read(xs, *input, i) {
                        Some(x) => func.eval(&[x]).map(Some),
                        None => Ok(None),
                    })
                    .collect::<Result<_, _>>()
                    .map_err(scalar_err)?;
                NodeValue::Seq(out)
            }
            Op::SequenceMap { func, lhs, rhs } => {
                let xs = self.seq(values, *lhs)?;
                let ys = self.seq(values, *rhs)?;
                let out = (0..n)
                    .map(|i| match (self.read(xs, *lhs, i), self.read(ys, *rhs, i)) {
                        (Some(x), Some(y)) => func.eval(&[x, y]).map(Some),
                        _ => Ok(None),
                    })
                    .collect::<Result<_, _>>()
                    .map_err(scalar_err)?;
                NodeValue::Seq(out)
            }
            Op::Select {
                keys,
                queries,
                predicate,
            } => {
                let ks = self.seq(values, *keys)?;
                let qs = self.seq(values, *queries)?;
                let mut m = vec![vec![false; n]; n];
                for (q, row) in m.iter_mut().enumerate() {
                    for (k, cell) in row.iter_mut().enumerate() {
                        if self.causal && k > q {
                            continue;
                        }
                        if let (Some(kv), Some(qv)) = (self.read(ks, *keys, k), self.read(qs, *queries, q)) {
                            *cell = predicate.eval(&kv, &qv).map_err(scalar_err)?;
                        }
                    }
                }
                NodeValue::Sel(m)
            }
            Op::SelectAnd(..) | Op::SelectOr(..) | Op::SelectNot(_) => {
                return Err(EvalError::Unvalidated(node.name.clone()))
            }
            Op::SelectorWidth { selector } => {
                let m = self.sel(values, *selector)?;
                NodeValue::Seq(
                    m.iter()
                        .map(|row| Some(Value::num(row.iter().filter(|b| **b).count() as f64)))
                        .collect(),
                )
            }
            Op::Aggregate { selector, sop } => {
                let m = self.sel(values, *selector)?;
                let xs = self.seq(values, *sop)?;
                let numerical = self.program.encoding(id) == Encoding::Numerical;
                let mut out = Vec::with_capacity(n);
                for (q, row) in m.iter().enumerate() {
                    let selected: Vec<usize> = (0..n).filter(|&k| row[k]).collect();
                    if selected.is_empty() {
                        out.push(None);
                    } else if numerical {
                        let mut sum = 0.0;
                        for &k in &selected {
                            let v = self.read(xs, *sop, k).unwrap_or(Value::num(0.0));
                            sum += v.as_f64().ok_or_else(|| {
                                scalar_err(super::ScalarError::Type(format!(
                                    "numerical aggregate over non-numeric value {v}"
                                )))
                            })?;
                        }
                        out.push(Some(Value::num(sum / selected.len() as f64)));
                    } else {
                        let distinct: BTreeSet<Value> =
                            selected.iter().filter_map(|&k| xs[k].clone()).collect();
                        if distinct.len() > 1 {
                            return Err(EvalError::CategoricalMean {
                                node: node.name.clone(),
                                position: q,
                                values: distinct.iter().map(|v| v.to_string()).collect(),
                            });
                        }
                        out.push(distinct.into_iter().next());
                    }
                }
                NodeValue::Seq(out)
            }
        })
    }
}

/// Evaluates the program's output s-op on `tokens`.
pub fn eval_sop(program: &Program, tokens: &[Value], causal: bool) -> Result<ValueSeq, EvalError> {
    Interpreter::new(program).causal(causal).run(tokens)
}

/// Evaluates selector node `sel` on `tokens`.
pub fn eval_selector(
    program: &Program,
    sel: NodeId,
    tokens: &[Value],
    causal: bool,
) -> Result<SelectorMatrix, EvalError> {
    Interpreter::new(program).causal(causal).selector(sel, tokens)
}
