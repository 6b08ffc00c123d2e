use super::{BinOp, Comparison, Encoding, NodeId, Op, Predicate, Program, ScalarExpr, UnaryOp};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ValidationError {
    #[error("`{node}` refers to missing node {operand}")]
    DanglingOperand { node: String, operand: NodeId },
    #[error("`{node}`: expected {expected} operand, found `{found}`")]
    OperandKind {
        node: String,
        expected: &'static str,
        found: String,
    },
    #[error("cycle: `{0}` depends on itself")]
    Cycle(String),
    #[error("compound selector unsupported: `{node}` combines selectors over different s-ops ({detail})")]
    CompoundSelector { node: String, detail: String },
    #[error("encoding mismatch at `{node}`: {detail}")]
    EncodingMismatch { node: String, detail: String },
    #[error("`{node}`: {detail}")]
    Arity { node: String, detail: String },
}

/// Checks a program against the compilable RASP subset and resolves default
/// encodings.
///
/// Boolean combinations of selectors are rewritten into a single selector
/// when both sides read the same key and query s-ops; any other combination
/// is rejected. Aggregates without an explicit encoding become numerical when
/// their selector can pick several positions (anything but `==`), and pass
/// that encoding on to an unannotated value s-op.
pub fn validate(program: &Program) -> Result<Program, Vec<ValidationError>> {
    let mut p = program.clone();
    let mut errors = Vec::new();
    let n = p.nodes.len();

    if p.output.0 >= n {
        errors.push(ValidationError::DanglingOperand {
            node: "<return>".into(),
            operand: p.output,
        });
        return Err(errors);
    }

    for node in &p.nodes {
        for op in node.op.operands() {
            if op.0 >= n {
                errors.push(ValidationError::DanglingOperand {
                    node: node.name.clone(),
                    operand: op,
                });
            }
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }

    let all: Vec<NodeId> = (0..n).map(NodeId).collect();
    let order = match p.topo_order_from(&all) {
        Ok(o) => o,
        Err(id) => return Err(vec![ValidationError::Cycle(p.node(id).name.clone())]),
    };

    check_operand_kinds(&p, &mut errors);
    if p.node(p.output).op.is_selector() {
        errors.push(ValidationError::OperandKind {
            node: "<return>".into(),
            expected: "s-op",
            found: p.node(p.output).name.clone(),
        });
    }
    if !errors.is_empty() {
        return Err(errors);
    }

    // selector combinations, children first
    for &id in &order {
        let rewritten = match &p.node(id).op {
            Op::SelectAnd(a, b) | Op::SelectOr(a, b) => {
                let is_and = matches!(p.node(id).op, Op::SelectAnd(..));
                combine(&p, id, *a, Some(*b), is_and)
            }
            Op::SelectNot(a) => combine(&p, id, *a, None, false),
            _ => continue,
        };
        match rewritten {
            Ok(op) => p.nodes[id.0].op = op,
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }

    resolve_encodings(&mut p, &order, &mut errors);
    if errors.is_empty() {
        Ok(p)
    } else {
        Err(errors)
    }
}

fn check_operand_kinds(p: &Program, errors: &mut Vec<ValidationError>) {
    for node in &p.nodes {
        let want = |id: NodeId, selector: bool, errors: &mut Vec<ValidationError>| {
            if p.node(id).op.is_selector() != selector {
                errors.push(ValidationError::OperandKind {
                    node: node.name.clone(),
                    expected: if selector { "selector" } else { "s-op" },
                    found: p.node(id).name.clone(),
                });
            }
        };
        match &node.op {
            Op::Tokens | Op::Indices | Op::Constant(_) => {}
            Op::Map { func, input } => {
                want(*input, false, errors);
                if func.arity() > 1 {
                    errors.push(ValidationError::Arity {
                        node: node.name.clone(),
                        detail: "map function reads more than one variable".into(),
                    });
                }
            }
            Op::SequenceMap { func, lhs, rhs } => {
                want(*lhs, false, errors);
                want(*rhs, false, errors);
                if func.arity() > 2 {
                    errors.push(ValidationError::Arity {
                        node: node.name.clone(),
                        detail: "sequence map function reads more than two variables".into(),
                    });
                }
            }
            Op::Aggregate { selector, sop } => {
                want(*selector, true, errors);
                want(*sop, false, errors);
            }
            Op::SelectorWidth { selector } => want(*selector, true, errors),
            Op::Select {
                keys,
                queries,
                predicate,
            } => {
                want(*keys, false, errors);
                want(*queries, false, errors);
                if let Predicate::Lambda(e) = predicate {
                    if e.arity() > 2 {
                        errors.push(ValidationError::Arity {
                            node: node.name.clone(),
                            detail: "predicate reads more than (key, query)".into(),
                        });
                    }
                }
            }
            Op::SelectAnd(a, b) | Op::SelectOr(a, b) => {
                want(*a, true, errors);
                want(*b, true, errors);
            }
            Op::SelectNot(a) => want(*a, true, errors),
        }
    }
}

fn combine(
    p: &Program,
    id: NodeId,
    a: NodeId,
    b: Option<NodeId>,
    is_and: bool,
) -> Result<Op, ValidationError> {
    let parts = |sid: NodeId| match &p.node(sid).op {
        Op::Select {
            keys,
            queries,
            predicate,
        } => Some((*keys, *queries, predicate.to_expr())),
        _ => None,
    };
    let compound = |detail: String| ValidationError::CompoundSelector {
        node: p.node(id).name.clone(),
        detail,
    };
    // children were rewritten earlier, so they are plain selects
    let (ka, qa, ea) = parts(a).ok_or_else(|| compound("operand is not a plain select".into()))?;
    let ea = ea.ok_or_else(|| compound("truth-table predicates cannot be combined".into()))?;
    let func = match b {
        None => ScalarExpr::unary(UnaryOp::Not, ea),
        Some(b) => {
            let (kb, qb, eb) =
                parts(b).ok_or_else(|| compound("operand is not a plain select".into()))?;
            if ka != kb || qa != qb {
                let names = [ka, qa, kb, qb].map(|x| p.node(x).name.clone());
                return Err(compound(format!(
                    "select({}, {}) vs select({}, {})",
                    names[0], names[1], names[2], names[3]
                )));
            }
            let eb = eb.ok_or_else(|| compound("truth-table predicates cannot be combined".into()))?;
            ScalarExpr::binary(if is_and { BinOp::And } else { BinOp::Or }, ea, eb)
        }
    };
    Ok(Op::Select {
        keys: ka,
        queries: qa,
        predicate: Predicate::Lambda(func),
    })
}

fn selects_at_most_one_value(p: &Program, selector: NodeId) -> bool {
    matches!(
        &p.node(selector).op,
        Op::Select {
            predicate: Predicate::Compare(Comparison::Eq),
            ..
        }
    )
}

fn resolve_encodings(p: &mut Program, order: &[NodeId], errors: &mut Vec<ValidationError>) {
    for &id in order {
        let node = &p.nodes[id.0];
        if node.op.is_selector() {
            if node.encoding.is_some() {
                errors.push(ValidationError::EncodingMismatch {
                    node: node.name.clone(),
                    detail: "selectors carry no encoding".into(),
                });
            }
            continue;
        }
        match node.op {
            Op::Tokens | Op::Indices => {
                if node.encoding == Some(Encoding::Numerical) {
                    errors.push(ValidationError::EncodingMismatch {
                        node: node.name.clone(),
                        detail: format!("{} must be categorical", node.op.kind_name()),
                    });
                }
            }
            Op::Aggregate { selector, sop } => {
                let agg_enc = node.encoding;
                let sop_enc = p.nodes[sop.0].encoding;
                let resolved = match (agg_enc, sop_enc) {
                    (Some(e), _) => e,
                    (None, Some(e)) => e,
                    (None, None) if selects_at_most_one_value(p, selector) => Encoding::Categorical,
                    (None, None) => Encoding::Numerical,
                };
                p.nodes[id.0].encoding = Some(resolved);
                if sop_enc.is_none() {
                    p.nodes[sop.0].encoding = Some(resolved);
                }
            }
            _ => {}
        }
    }
    for node in p.nodes.iter_mut() {
        if !node.op.is_selector() && node.encoding.is_none() {
            node.encoding = Some(Encoding::Categorical);
        }
    }
    for &id in order {
        if let Op::Aggregate { sop, .. } = p.node(id).op {
            let (agg, val) = (p.encoding(id), p.encoding(sop));
            if agg != val {
                errors.push(ValidationError::EncodingMismatch {
                    node: p.node(id).name.clone(),
                    detail: format!(
                        "{agg} aggregate requires a {agg} value s-op, but `{}` is {val}",
                        p.node(sop).name
                    ),
                });
            }
        }
    }
}
