use std::fmt::Write;

use crate::rasp::scalar::write_literal;
use crate::rasp::{ConstantSeq, Encoding, Op, Predicate, Program};

/// Renders a program in the textual dialect, one statement per node, fully
/// parenthesised. The output parses back to the same DAG.
pub fn pretty_print(program: &Program) -> String {
    let mut out = String::new();
    let name = |id: crate::rasp::NodeId| program.node(id).name.as_str();
    for node in &program.nodes {
        let mut rhs = String::new();
        match &node.op {
            Op::Tokens | Op::Indices => continue,
            Op::Constant(ConstantSeq::Broadcast(v)) => write_literal(&mut rhs, v).unwrap(),
            Op::Constant(ConstantSeq::List(vs)) => {
                rhs.push('[');
                for (i, v) in vs.iter().enumerate() {
                    if i > 0 {
                        rhs.push_str(", ");
                    }
                    write_literal(&mut rhs, v).unwrap();
                }
                rhs.push(']');
            }
            Op::Map { func, input } => {
                write!(rhs, "map((x) -> {}, {})", func.display_with(&["x"]), name(*input)).unwrap()
            }
            Op::SequenceMap { func, lhs, rhs: r } => write!(
                rhs,
                "map2((x, y) -> {}, {}, {})",
                func.display_with(&["x", "y"]),
                name(*lhs),
                name(*r)
            )
            .unwrap(),
            Op::Select {
                keys,
                queries,
                predicate,
            } => {
                write!(rhs, "select({}, {}, ", name(*keys), name(*queries)).unwrap();
                write_predicate(&mut rhs, predicate);
                rhs.push(')');
            }
            Op::Aggregate { selector, sop } => {
                write!(rhs, "aggregate({}, {})", name(*selector), name(*sop)).unwrap()
            }
            Op::SelectorWidth { selector } => {
                write!(rhs, "selector_width({})", name(*selector)).unwrap()
            }
            Op::SelectAnd(a, b) => write!(rhs, "({} and {})", name(*a), name(*b)).unwrap(),
            Op::SelectOr(a, b) => write!(rhs, "({} or {})", name(*a), name(*b)).unwrap(),
            Op::SelectNot(a) => write!(rhs, "(not {})", name(*a)).unwrap(),
        }
        // aggregates always carry their encoding so that reparsing does not
        // re-run default resolution differently
        let rhs = match (node.encoding, &node.op) {
            (Some(Encoding::Numerical), _) => format!("numerical({rhs})"),
            (Some(Encoding::Categorical), Op::Aggregate { .. }) => format!("categorical({rhs})"),
            _ => rhs,
        };
        writeln!(out, "{} = {};", node.name, rhs).unwrap();
    }
    writeln!(out, "return {};", program.output_node().name).unwrap();
    out
}

fn write_predicate(out: &mut String, predicate: &Predicate) {
    match predicate {
        Predicate::Compare(c) => out.push_str(c.symbol()),
        Predicate::Lambda(e) => write!(out, "(k, q) -> {}", e.display_with(&["k", "q"])).unwrap(),
        Predicate::Table(rows) => {
            let cases: Vec<String> = rows
                .iter()
                .filter(|(_, b)| *b)
                .map(|((q, k), _)| {
                    let (mut qs, mut ks) = (String::new(), String::new());
                    write_literal(&mut qs, q).unwrap();
                    write_literal(&mut ks, k).unwrap();
                    format!("((q == {qs}) and (k == {ks}))")
                })
                .collect();
            out.push_str("(k, q) -> ");
            if cases.is_empty() {
                out.push_str("false");
            } else {
                out.push_str(&cases.join(" or "));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse;

    #[test]
    fn frac_prevs_prints_and_reparses() {
        let src = "is_x = tokens == \"x\"\nprevs = select(indices, indices, <=)\n\
                   frac_prevs = aggregate(prevs, is_x)";
        let p = parse(src).unwrap();
        let text = pretty_print(&p);
        assert!(text.contains("is_x = numerical(map((x) -> (x == \"x\"), tokens));"), "{text}");
        assert!(text.ends_with("return frac_prevs;\n"));
        let q = parse(&text).unwrap();
        assert_eq!(pretty_print(&q), text);
    }

    #[test]
    fn negative_literals_round_trip() {
        let p = parse("y = tokens * -2.5\nreturn y").unwrap();
        let text = pretty_print(&p);
        assert!(text.contains("(-2.5)"), "{text}");
        assert_eq!(pretty_print(&parse(&text).unwrap()), text);
    }
}
