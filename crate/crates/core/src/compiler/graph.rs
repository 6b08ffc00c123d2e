use super::CompileError;
use crate::rasp::{Encoding, Node, NodeId, Op, Program, ScalarExpr};
use crate::value::ValueSet;

/// The program as a computation graph, annotated step by step with value
/// sets and layer slots.
#[derive(Debug, Clone)]
pub struct CompGraph {
    /// The program after fusing elementwise chains; node ids index into it.
    pub program: Program,
    /// Live nodes in dependency order. `tokens` and `indices` always come
    /// first.
    pub order: Vec<NodeId>,
    pub value_sets: Vec<Option<ValueSet>>,
    /// Sublayer slot of each live node (`-1` for sources). Even slots are
    /// attention, odd slots MLPs.
    pub slots: Vec<Option<i64>>,
}

impl CompGraph {
    pub fn node(&self, id: NodeId) -> &Node {
        self.program.node(id)
    }

    pub fn encoding(&self, id: NodeId) -> Encoding {
        self.program.encoding(id)
    }

    pub fn value_set(&self, id: NodeId) -> &ValueSet {
        self.value_sets[id.0]
            .as_ref()
            .expect("value sets are inferred before lowering")
    }

    pub fn slot(&self, id: NodeId) -> i64 {
        self.slots[id.0].expect("layers are allocated before assembly")
    }

    pub fn names(&self) -> Vec<&str> {
        self.order.iter().map(|id| self.node(*id).name.as_str()).collect()
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.order
            .iter()
            .copied()
            .find(|id| self.node(*id).name == name)
    }

    /// Operand edges `(from, to)` between live nodes.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.order
            .iter()
            .flat_map(|&to| self.node(to).op.operands().into_iter().map(move |from| (from, to)))
            .collect()
    }

    pub fn tokens(&self) -> NodeId {
        self.order[0]
    }

    pub fn indices(&self) -> NodeId {
        self.order[1]
    }
}

/// Builds the computation graph of a validated program and fuses chains of
/// elementwise operations.
///
/// A map absorbs its operand when that operand is a map, or a sequence map
/// over categorical inputs, consumed only by this node and not returned.
/// A sequence map absorbs single-consumer map operands when every s-op it
/// reads afterwards is categorical.
pub fn build_graph(program: &Program) -> Result<CompGraph, CompileError> {
    let mut p = program.clone();
    let order = p
        .topo_order()
        .map_err(|id| CompileError::NotValidated(format!("cycle through `{}`", p.node(id).name)))?;
    for &id in &order {
        let node = p.node(id);
        if matches!(node.op, Op::SelectAnd(..) | Op::SelectOr(..) | Op::SelectNot(_)) {
            return Err(CompileError::NotValidated(format!(
                "selector combination `{}` was not rewritten",
                node.name
            )));
        }
        if !node.op.is_selector() && node.encoding.is_none() {
            return Err(CompileError::NotValidated(format!(
                "`{}` has no encoding",
                node.name
            )));
        }
    }

    let consumers = p.consumer_counts(&order);
    let absorbable = |p: &Program, id: NodeId| id != p.output && consumers[id.0] == 1;
    let categorical = |p: &Program, id: NodeId| p.encoding(id) == Encoding::Categorical;
    for &id in &order {
        match p.node(id).op.clone() {
            Op::Map { func, input } if absorbable(&p, input) => match p.node(input).op.clone() {
                Op::Map { func: g, input: x } => {
                    p.nodes[id.0].op = Op::Map {
                        func: func.substitute(&[g]),
                        input: x,
                    };
                }
                Op::SequenceMap { func: g, lhs, rhs }
                    if categorical(&p, lhs) && categorical(&p, rhs) =>
                {
                    p.nodes[id.0].op = Op::SequenceMap {
                        func: func.substitute(&[g]),
                        lhs,
                        rhs,
                    };
                }
                _ => {}
            },
            Op::SequenceMap { func, lhs, rhs } => {
                let inline = |p: &Program, operand: NodeId| match &p.node(operand).op {
                    Op::Map { func: g, input } if absorbable(p, operand) && categorical(p, *input) => {
                        Some((g.clone(), *input))
                    }
                    _ => None,
                };
                let (l, r) = (inline(&p, lhs), inline(&p, rhs));
                if l.is_none() && r.is_none() {
                    continue;
                }
                let (lf, lhs) = l.unwrap_or((ScalarExpr::var(0), lhs));
                let (rf, rhs) = r.unwrap_or((ScalarExpr::var(0), rhs));
                // a half-fused node that still reads a numerical s-op would
                // need a mixed lowering, which is not supported
                if !(categorical(&p, lhs) && categorical(&p, rhs)) {
                    continue;
                }
                // the right operand's function reads variable 1 after fusion
                let rf = rf.substitute(&[ScalarExpr::var(1)]);
                p.nodes[id.0].op = Op::SequenceMap {
                    func: func.substitute(&[lf, rf]),
                    lhs,
                    rhs,
                };
            }
            _ => {}
        }
    }

    // make sure both sources exist, even when unused
    let mut with_sources = p;
    let find_or_add = |p: &mut Program, op: Op, name: &str| {
        match p.nodes.iter().position(|n| n.op == op) {
            Some(i) => NodeId(i),
            None => {
                p.nodes.push(Node {
                    name: name.into(),
                    op,
                    encoding: Some(Encoding::Categorical),
                });
                NodeId(p.nodes.len() - 1)
            }
        }
    };
    let tokens = find_or_add(&mut with_sources, Op::Tokens, "tokens");
    let indices = find_or_add(&mut with_sources, Op::Indices, "indices");
    // source directions are always labelled `tokens:*` and `indices:*`
    with_sources.nodes[tokens.0].name = "tokens".into();
    with_sources.nodes[indices.0].name = "indices".into();
    let live = with_sources.topo_order().expect("fusion keeps the graph acyclic");
    let mut order = vec![tokens, indices];
    order.extend(live.into_iter().filter(|id| *id != tokens && *id != indices));

    let n = with_sources.nodes.len();
    Ok(CompGraph {
        program: with_sources,
        order,
        value_sets: vec![None; n],
        slots: vec![None; n],
    })
}

/// Assigns every live node a sublayer slot and returns the number of
/// transformer blocks.
///
/// Maps and sequence maps sit at odd (MLP) slots, aggregates at even
/// (attention) slots, each at the earliest slot after all of its operands.
/// A selector width takes an attention slot and the MLP slot right after
/// it; its own slot is the MLP one. Selectors take the latest slot of their
/// inputs since they produce no residual output.
pub fn allocate_layers(graph: &mut CompGraph) -> usize {
    let next = |after: i64, odd: bool| {
        let mut s = after + 1;
        if (s.rem_euclid(2) == 1) != odd {
            s += 1;
        }
        s
    };
    let mut max_slot = -1;
    for &id in &graph.order.clone() {
        let node = graph.node(id);
        let after = node
            .op
            .operands()
            .iter()
            .map(|o| graph.slots[o.0].expect("operands come first"))
            .max()
            .unwrap_or(-1);
        let slot = match node.op {
            Op::Tokens | Op::Indices | Op::Constant(_) => -1,
            Op::Select { .. } => after,
            Op::Map { .. } | Op::SequenceMap { .. } => next(after, true),
            Op::Aggregate { .. } => next(after, false),
            Op::SelectorWidth { .. } => next(after, false) + 1,
            Op::SelectAnd(..) | Op::SelectOr(..) | Op::SelectNot(_) => {
                unreachable!("rejected by build_graph")
            }
        };
        graph.slots[id.0] = Some(slot);
        max_slot = max_slot.max(slot);
    }
    ((max_slot + 1) as usize).div_ceil(2)
}
