//! RASP expression DAGs, their validation, and a reference interpreter.
//!
//! A [`Program`] is an arena of [`Node`]s. S-op nodes hold one value per
//! position; selector nodes hold an `N x N` boolean matrix. `select(keys,
//! queries, predicate)` evaluates `predicate(key, query)` at row `query`
//! and column `key`.

mod eval;
pub mod scalar;
mod validate;

use std::collections::HashSet;
use std::fmt;

pub use eval::{eval_selector, eval_sop, EvalError, Interpreter, NodeValue, SelectorMatrix, ValueSeq};
pub use scalar::{BinOp, ScalarError, ScalarExpr, UnaryOp};
pub use validate::{validate, ValidationError};

use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Categorical,
    Numerical,
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Encoding::Categorical => "categorical",
            Encoding::Numerical => "numerical",
        })
    }
}

/// Built-in comparison predicates, applied as `key OP query`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Comparison {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    True,
    False,
}

impl Comparison {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparison::Eq => "==",
            Comparison::Ne => "!=",
            Comparison::Lt => "<",
            Comparison::Le => "<=",
            Comparison::Gt => ">",
            Comparison::Ge => ">=",
            Comparison::True => "true",
            Comparison::False => "false",
        }
    }

    /// The same predicate as a two-variable expression over `(key, query)`.
    pub fn to_expr(self) -> ScalarExpr {
        let bin = |op| ScalarExpr::binary(op, ScalarExpr::var(0), ScalarExpr::var(1));
        match self {
            Comparison::Eq => bin(BinOp::Eq),
            Comparison::Ne => bin(BinOp::Ne),
            Comparison::Lt => bin(BinOp::Lt),
            Comparison::Le => bin(BinOp::Le),
            Comparison::Gt => bin(BinOp::Gt),
            Comparison::Ge => bin(BinOp::Ge),
            Comparison::True => ScalarExpr::lit(true),
            Comparison::False => ScalarExpr::lit(false),
        }
    }
}

/// A selector predicate over `(key, query)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Compare(Comparison),
    /// Expression with `Var(0)` bound to the key and `Var(1)` to the query.
    Lambda(ScalarExpr),
    /// Explicit truth table over `(query, key)` pairs.
    Table(Vec<((Value, Value), bool)>),
}

impl Predicate {
    pub fn eval(&self, key: &Value, query: &Value) -> Result<bool, ScalarError> {
        match self {
            Predicate::Compare(Comparison::True) => Ok(true),
            Predicate::Compare(Comparison::False) => Ok(false),
            Predicate::Compare(c) => Ok(c.to_expr().eval(&[key.clone(), query.clone()])?.truthy()),
            Predicate::Lambda(e) => Ok(e.eval(&[key.clone(), query.clone()])?.truthy()),
            Predicate::Table(rows) => rows
                .iter()
                .find(|((q, k), _)| q == query && k == key)
                .map(|(_, b)| *b)
                .ok_or_else(|| {
                    ScalarError::Type(format!("truth table has no entry for ({query}, {key})"))
                }),
        }
    }

    pub fn to_expr(&self) -> Option<ScalarExpr> {
        match self {
            Predicate::Compare(c) => Some(c.to_expr()),
            Predicate::Lambda(e) => Some(e.clone()),
            Predicate::Table(_) => None,
        }
    }
}

/// Source of a constant s-op.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstantSeq {
    /// The same value at every position.
    Broadcast(Value),
    /// Explicit per-position values; truncated to the input length.
    List(Vec<Value>),
}

impl ConstantSeq {
    pub fn values(&self) -> Vec<Value> {
        match self {
            ConstantSeq::Broadcast(v) => vec![v.clone()],
            ConstantSeq::List(vs) => vs.clone(),
        }
    }

    pub fn at(&self, pos: usize) -> Option<&Value> {
        match self {
            ConstantSeq::Broadcast(v) => Some(v),
            ConstantSeq::List(vs) => vs.get(pos),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Tokens,
    Indices,
    Constant(ConstantSeq),
    Map {
        func: ScalarExpr,
        input: NodeId,
    },
    SequenceMap {
        func: ScalarExpr,
        lhs: NodeId,
        rhs: NodeId,
    },
    Aggregate {
        selector: NodeId,
        sop: NodeId,
    },
    SelectorWidth {
        selector: NodeId,
    },
    Select {
        keys: NodeId,
        queries: NodeId,
        predicate: Predicate,
    },
    SelectAnd(NodeId, NodeId),
    SelectOr(NodeId, NodeId),
    SelectNot(NodeId),
}

impl Op {
    pub fn is_selector(&self) -> bool {
        matches!(
            self,
            Op::Select { .. } | Op::SelectAnd(..) | Op::SelectOr(..) | Op::SelectNot(_)
        )
    }

    pub fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Tokens | Op::Indices | Op::Constant(_) => vec![],
            Op::Map { input, .. } => vec![*input],
            Op::SequenceMap { lhs, rhs, .. } => vec![*lhs, *rhs],
            Op::Aggregate { selector, sop } => vec![*selector, *sop],
            Op::SelectorWidth { selector } => vec![*selector],
            Op::Select { keys, queries, .. } => vec![*keys, *queries],
            Op::SelectAnd(a, b) | Op::SelectOr(a, b) => vec![*a, *b],
            Op::SelectNot(a) => vec![*a],
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Tokens => "tokens",
            Op::Indices => "indices",
            Op::Constant(_) => "constant",
            Op::Map { .. } => "map",
            Op::SequenceMap { .. } => "sequence_map",
            Op::Aggregate { .. } => "aggregate",
            Op::SelectorWidth { .. } => "selector_width",
            Op::Select { .. } => "select",
            Op::SelectAnd(..) => "select_and",
            Op::SelectOr(..) => "select_or",
            Op::SelectNot(_) => "select_not",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    /// `None` until resolved by [`validate`]; selectors never carry one.
    pub encoding: Option<Encoding>,
}

/// A RASP program: a node arena plus the returned s-op.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub nodes: Vec<Node>,
    pub output: NodeId,
}

impl Program {
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn output_node(&self) -> &Node {
        self.node(self.output)
    }

    pub fn encoding(&self, id: NodeId) -> Encoding {
        self.node(id).encoding.unwrap_or(Encoding::Categorical)
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(NodeId)
    }

    /// Nodes reachable from the output, in dependency order (operands first).
    /// Returns `Err(node)` on the first cycle found.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, NodeId> {
        self.topo_order_from(&[self.output])
    }

    pub(crate) fn topo_order_from(&self, roots: &[NodeId]) -> Result<Vec<NodeId>, NodeId> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Active,
            Done,
        }
        let mut mark = vec![Mark::New; self.nodes.len()];
        let mut order = Vec::new();
        // explicit stack: (node, next operand index)
        for &root in roots {
            if mark[root.0] == Mark::Done {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            mark[root.0] = Mark::Active;
            while let Some((id, next)) = stack.pop() {
                let ops = self.nodes[id.0].op.operands();
                if next < ops.len() {
                    stack.push((id, next + 1));
                    let child = ops[next];
                    match mark[child.0] {
                        Mark::New => {
                            mark[child.0] = Mark::Active;
                            stack.push((child, 0));
                        }
                        Mark::Active => return Err(child),
                        Mark::Done => {}
                    }
                } else {
                    mark[id.0] = Mark::Done;
                    order.push(id);
                }
            }
        }
        Ok(order)
    }

    /// Number of reachable consumers of every node.
    pub fn consumer_counts(&self, order: &[NodeId]) -> Vec<usize> {
        let mut counts = vec![0; self.nodes.len()];
        for id in order {
            for op in self.node(*id).op.operands() {
                counts[op.0] += 1;
            }
        }
        counts
    }
}

/// Incremental construction of a [`Program`] with unique node names.
#[derive(Debug, Default, Clone)]
pub struct ProgramBuilder {
    nodes: Vec<Node>,
    names: HashSet<String>,
    tokens: Option<NodeId>,
    indices: Option<NodeId>,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn fresh_name(&self, base: &str) -> String {
        if !self.names.contains(base) {
            return base.to_string();
        }
        (1..)
            .map(|i| format!("{base}_{i}"))
            .find(|n| !self.names.contains(n))
            .unwrap()
    }

    fn push(&mut self, base: &str, op: Op) -> NodeId {
        let name = self.fresh_name(base);
        self.names.insert(name.clone());
        self.nodes.push(Node {
            name,
            op,
            encoding: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn tokens(&mut self) -> NodeId {
        if let Some(id) = self.tokens {
            return id;
        }
        let id = self.push("tokens", Op::Tokens);
        self.nodes[id.0].encoding = Some(Encoding::Categorical);
        self.tokens = Some(id);
        id
    }

    pub fn indices(&mut self) -> NodeId {
        if let Some(id) = self.indices {
            return id;
        }
        let id = self.push("indices", Op::Indices);
        self.nodes[id.0].encoding = Some(Encoding::Categorical);
        self.indices = Some(id);
        id
    }

    pub fn constant(&mut self, seq: ConstantSeq) -> NodeId {
        self.push("constant", Op::Constant(seq))
    }

    pub fn map(&mut self, func: ScalarExpr, input: NodeId) -> NodeId {
        self.push("map", Op::Map { func, input })
    }

    pub fn sequence_map(&mut self, func: ScalarExpr, lhs: NodeId, rhs: NodeId) -> NodeId {
        self.push("sequence_map", Op::SequenceMap { func, lhs, rhs })
    }

    pub fn select(&mut self, keys: NodeId, queries: NodeId, predicate: Predicate) -> NodeId {
        self.push(
            "select",
            Op::Select {
                keys,
                queries,
                predicate,
            },
        )
    }

    pub fn select_cmp(&mut self, keys: NodeId, queries: NodeId, cmp: Comparison) -> NodeId {
        self.select(keys, queries, Predicate::Compare(cmp))
    }

    pub fn select_and(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push("select_and", Op::SelectAnd(a, b))
    }

    pub fn select_or(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push("select_or", Op::SelectOr(a, b))
    }

    pub fn select_not(&mut self, a: NodeId) -> NodeId {
        self.push("select_not", Op::SelectNot(a))
    }

    pub fn aggregate(&mut self, selector: NodeId, sop: NodeId) -> NodeId {
        self.push("aggregate", Op::Aggregate { selector, sop })
    }

    pub fn selector_width(&mut self, selector: NodeId) -> NodeId {
        self.push("selector_width", Op::SelectorWidth { selector })
    }

    pub fn numerical(&mut self, id: NodeId) -> NodeId {
        self.nodes[id.0].encoding = Some(Encoding::Numerical);
        id
    }

    pub fn categorical(&mut self, id: NodeId) -> NodeId {
        self.nodes[id.0].encoding = Some(Encoding::Categorical);
        id
    }

    /// Renames a node; a suffix is appended if the name is already taken.
    pub fn named(&mut self, id: NodeId, name: &str) -> NodeId {
        if self.nodes[id.0].name == name {
            return id;
        }
        let old = std::mem::take(&mut self.nodes[id.0].name);
        self.names.remove(&old);
        let fresh = self.fresh_name(name);
        self.names.insert(fresh.clone());
        self.nodes[id.0].name = fresh;
        id
    }

    /// `length`: the width of an always-true selector.
    pub fn length(&mut self) -> NodeId {
        let t = self.tokens();
        let all = self.select_cmp(t, t, Comparison::True);
        let all = self.named(all, "all_true");
        let w = self.selector_width(all);
        self.named(w, "length")
    }

    pub fn build(self, output: NodeId) -> Program {
        Program {
            nodes: self.nodes,
            output,
        }
    }
}
