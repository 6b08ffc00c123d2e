use std::collections::BTreeMap;

use super::FrontendError;
use crate::rasp::{validate, BinOp, Comparison, NodeId, Program, ProgramBuilder, ScalarExpr, UnaryOp};
use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamInfo {
    pub name: &'static str,
    /// `None` means the parameter is required.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuiltinInfo {
    pub name: &'static str,
    pub summary: &'static str,
    pub params: &'static [ParamInfo],
}

const BUILTINS: &[BuiltinInfo] = &[
    BuiltinInfo {
        name: "frac_prevs",
        summary: "fraction of positions up to here holding the target token",
        params: &[ParamInfo {
            name: "target",
            default: Some("x"),
            help: "token to count",
        }],
    },
    BuiltinInfo {
        name: "sort_unique",
        summary: "sort tokens, assuming no duplicates",
        params: &[],
    },
    BuiltinInfo {
        name: "sort",
        summary: "sort values by keys, breaking ties by position",
        params: &[
            ParamInfo {
                name: "keys",
                default: Some("tokens"),
                help: "s-op to sort by: tokens or indices (numeric values)",
            },
            ParamInfo {
                name: "vals",
                default: Some("tokens"),
                help: "s-op to move: tokens or indices",
            },
            ParamInfo {
                name: "min_key",
                default: Some("1"),
                help: "smallest gap between distinct keys",
            },
            ParamInfo {
                name: "context_length",
                default: None,
                help: "maximum input length",
            },
        ],
    },
    BuiltinInfo {
        name: "pair_balance",
        summary: "running fraction of open minus close tokens",
        params: &[
            ParamInfo {
                name: "open",
                default: Some("("),
                help: "opening token",
            },
            ParamInfo {
                name: "close",
                default: Some(")"),
                help: "closing token",
            },
        ],
    },
    BuiltinInfo {
        name: "dyck_n",
        summary: "whether the brackets seen so far form a balanced sequence",
        params: &[ParamInfo {
            name: "pairs",
            default: Some("(),{}"),
            help: "comma-separated two-character bracket pairs",
        }],
    },
];

pub fn list_builtins() -> &'static [BuiltinInfo] {
    BUILTINS
}

/// Builds a library program by name and validates it.
pub fn load_builtin(name: &str, params: &BTreeMap<String, String>) -> Result<Program, FrontendError> {
    let info = BUILTINS
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| FrontendError::UnknownBuiltin(name.to_string()))?;
    for key in params.keys() {
        if !info.params.iter().any(|p| p.name == key) {
            return Err(FrontendError::BadParam {
                builtin: name.into(),
                param: key.clone(),
                reason: "unknown parameter".into(),
            });
        }
    }
    let get = |param: &str| -> Result<String, FrontendError> {
        let spec = info.params.iter().find(|p| p.name == param).unwrap();
        params
            .get(param)
            .cloned()
            .or(spec.default.map(str::to_string))
            .ok_or_else(|| FrontendError::MissingParam {
                builtin: name.into(),
                param: param.into(),
            })
    };
    let number = |param: &str| -> Result<f64, FrontendError> {
        let raw = get(param)?;
        raw.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| FrontendError::BadParam {
                builtin: name.into(),
                param: param.into(),
                reason: format!("`{raw}` is not a number"),
            })
    };

    let mut b = ProgramBuilder::new();
    let out = match name {
        "frac_prevs" => {
            let target = Value::parse_token(&get("target")?);
            frac_prevs(&mut b, target)
        }
        "sort_unique" => {
            let t = b.tokens();
            sort_unique(&mut b, t, t)
        }
        "sort" => {
            let mut sop = |which: &str| -> Result<NodeId, FrontendError> {
                match get(which)?.as_str() {
                    "tokens" => Ok(b.tokens()),
                    "indices" => Ok(b.indices()),
                    other => Err(FrontendError::BadParam {
                        builtin: name.into(),
                        param: which.into(),
                        reason: format!("`{other}` is not tokens or indices"),
                    }),
                }
            };
            let keys = sop("keys")?;
            let vals = sop("vals")?;
            let min_key = number("min_key")?;
            let context_length = number("context_length")?;
            if context_length <= 0.0 {
                return Err(FrontendError::BadParam {
                    builtin: name.into(),
                    param: "context_length".into(),
                    reason: "must be positive".into(),
                });
            }
            sort(&mut b, keys, vals, min_key, context_length)
        }
        "pair_balance" => {
            let open = Value::parse_token(&get("open")?);
            let close = Value::parse_token(&get("close")?);
            let out = pair_balance(&mut b, open, close);
            b.named(out, "pair_balance")
        }
        "dyck_n" => {
            let raw = get("pairs")?;
            let mut pairs = Vec::new();
            for p in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                let cs: Vec<char> = p.chars().collect();
                if cs.len() != 2 {
                    return Err(FrontendError::BadParam {
                        builtin: name.into(),
                        param: "pairs".into(),
                        reason: format!("`{p}` is not a two-character pair"),
                    });
                }
                pairs.push((
                    Value::str(cs[0].to_string()),
                    Value::str(cs[1].to_string()),
                ));
            }
            if pairs.is_empty() {
                return Err(FrontendError::BadParam {
                    builtin: name.into(),
                    param: "pairs".into(),
                    reason: "no pairs given".into(),
                });
            }
            dyck_n(&mut b, &pairs)
        }
        _ => unreachable!("listed builtin without a constructor"),
    };
    validate(&b.build(out)).map_err(FrontendError::Validation)
}

fn eq_lit(b: &mut ProgramBuilder, sop: NodeId, v: Value) -> NodeId {
    b.map(
        ScalarExpr::binary(BinOp::Eq, ScalarExpr::var(0), ScalarExpr::Lit(v)),
        sop,
    )
}

/// Mean of a numerical 0/1 s-op over positions `<=` the current one.
pub fn make_frac_prevs(b: &mut ProgramBuilder, bools: NodeId) -> NodeId {
    let i = b.indices();
    let prevs = b.select_cmp(i, i, Comparison::Le);
    b.named(prevs, "prevs");
    let agg = b.aggregate(prevs, bools);
    b.numerical(agg)
}

fn frac_prevs(b: &mut ProgramBuilder, target: Value) -> NodeId {
    let t = b.tokens();
    let is_x = eq_lit(b, t, target);
    b.numerical(is_x);
    b.named(is_x, "is_x");
    let out = make_frac_prevs(b, is_x);
    b.named(out, "frac_prevs")
}

fn sort_unique(b: &mut ProgramBuilder, keys: NodeId, vals: NodeId) -> NodeId {
    let i = b.indices();
    let smaller = b.select_cmp(keys, keys, Comparison::Lt);
    b.named(smaller, "smaller");
    let target_pos = b.selector_width(smaller);
    b.named(target_pos, "target_pos");
    let sel_sort = b.select_cmp(target_pos, i, Comparison::Eq);
    b.named(sel_sort, "sel_sort");
    let out = b.aggregate(sel_sort, vals);
    b.named(out, "sort")
}

fn sort(
    b: &mut ProgramBuilder,
    keys: NodeId,
    vals: NodeId,
    min_key: f64,
    context_length: f64,
) -> NodeId {
    let i = b.indices();
    // keys + min_key * indices / context_length: distinct keys per position,
    // ties broken by position without crossing the next key value
    let shift = ScalarExpr::binary(
        BinOp::Add,
        ScalarExpr::var(0),
        ScalarExpr::binary(
            BinOp::Div,
            ScalarExpr::binary(BinOp::Mul, ScalarExpr::lit(min_key), ScalarExpr::var(1)),
            ScalarExpr::lit(context_length),
        ),
    );
    let shifted = b.sequence_map(shift, keys, i);
    b.named(shifted, "keys");
    sort_unique(b, shifted, vals)
}

fn pair_balance(b: &mut ProgramBuilder, open: Value, close: Value) -> NodeId {
    let t = b.tokens();
    let bools_open = eq_lit(b, t, open);
    b.numerical(bools_open);
    b.named(bools_open, "bools_open");
    let opens = make_frac_prevs(b, bools_open);
    b.named(opens, "opens");
    let bools_close = eq_lit(b, t, close);
    b.numerical(bools_close);
    b.named(bools_close, "bools_close");
    let closes = make_frac_prevs(b, bools_close);
    b.named(closes, "closes");
    let diff = ScalarExpr::binary(BinOp::Sub, ScalarExpr::var(0), ScalarExpr::var(1));
    let balance = b.sequence_map(diff, opens, closes);
    b.numerical(balance);
    b.named(balance, "balance")
}

fn dyck_n(b: &mut ProgramBuilder, pairs: &[(Value, Value)]) -> NodeId {
    let balances: Vec<NodeId> = pairs
        .iter()
        .map(|(o, c)| pair_balance(b, o.clone(), c.clone()))
        .collect();
    let cmp_zero = |b: &mut ProgramBuilder, op, bal: NodeId| {
        b.map(
            ScalarExpr::binary(op, ScalarExpr::var(0), ScalarExpr::lit(0.0)),
            bal,
        )
    };
    let chain = |b: &mut ProgramBuilder, op, items: Vec<NodeId>| {
        let f = ScalarExpr::binary(op, ScalarExpr::var(0), ScalarExpr::var(1));
        items
            .into_iter()
            .reduce(|acc, x| b.sequence_map(f.clone(), acc, x))
            .unwrap()
    };

    let negs: Vec<NodeId> = balances.iter().map(|&x| cmp_zero(b, BinOp::Lt, x)).collect();
    let any_negative = chain(b, BinOp::Or, negs);
    b.numerical(any_negative);
    b.named(any_negative, "any_negative");
    let t = b.tokens();
    let select_all = b.select_cmp(t, t, Comparison::True);
    b.named(select_all, "select_all");
    let has_neg = b.aggregate(select_all, any_negative);
    b.numerical(has_neg);
    b.named(has_neg, "has_neg");

    let zeros: Vec<NodeId> = balances.iter().map(|&x| cmp_zero(b, BinOp::Eq, x)).collect();
    let all_zero = chain(b, BinOp::And, zeros);
    b.named(all_zero, "all_zero");
    let length = b.length();
    let last = b.map(
        ScalarExpr::binary(BinOp::Sub, ScalarExpr::var(0), ScalarExpr::lit(1.0)),
        length,
    );
    b.named(last, "length_minus_1");
    let i = b.indices();
    let select_last = b.select_cmp(i, last, Comparison::Eq);
    b.named(select_last, "select_last");
    let last_zero = b.aggregate(select_last, all_zero);
    b.categorical(last_zero);
    b.named(last_zero, "last_zero");

    let not_has_neg = b.map(ScalarExpr::unary(UnaryOp::Not, ScalarExpr::var(0)), has_neg);
    b.named(not_has_neg, "not_has_neg");
    let f = ScalarExpr::binary(BinOp::And, ScalarExpr::var(0), ScalarExpr::var(1));
    let out = b.sequence_map(f, last_zero, not_has_neg);
    b.named(out, "dyck_n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasp::{eval_sop, Encoding, Op};

    fn load(name: &str, kv: &[(&str, &str)]) -> Program {
        let params = kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        load_builtin(name, &params).unwrap()
    }

    fn chars(s: &str) -> Vec<Value> {
        s.chars().map(|c| Value::str(c.to_string())).collect()
    }

    fn nums(xs: &[f64]) -> Vec<Value> {
        xs.iter().copied().map(Value::num).collect()
    }

    #[test]
    fn frac_prevs_example() {
        let p = load("frac_prevs", &[]);
        let out = eval_sop(&p, &chars("xacx"), false).unwrap();
        let got: Vec<f64> = out.iter().map(|v| v.as_ref().unwrap().as_f64().unwrap()).collect();
        assert_eq!(got, [1.0, 0.5, 1.0 / 3.0, 0.5]);
    }

    #[test]
    fn sort_unique_sorts_distinct_numbers() {
        let p = load("sort_unique", &[]);
        let out = eval_sop(&p, &nums(&[3.0, 1.0, 4.0, 2.0]), false).unwrap();
        assert_eq!(out, nums(&[1.0, 2.0, 3.0, 4.0]).into_iter().map(Some).collect::<Vec<_>>());
    }

    #[test]
    fn sort_handles_duplicates() {
        let p = load("sort", &[("context_length", "5")]);
        let out = eval_sop(&p, &nums(&[3.0, 1.0, 3.0, 1.0, 2.0]), false).unwrap();
        let want = nums(&[1.0, 1.0, 2.0, 3.0, 3.0]);
        assert_eq!(out, want.into_iter().map(Some).collect::<Vec<_>>());
        let keys = p.find("keys").unwrap();
        assert!(matches!(p.node(keys).op, Op::SequenceMap { .. }));
    }

    #[test]
    fn sort_requires_context_length() {
        let err = load_builtin("sort", &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, FrontendError::MissingParam { .. }));
    }

    #[test]
    fn pair_balance_values() {
        let p = load("pair_balance", &[]);
        let out = eval_sop(&p, &chars("(()"), false).unwrap();
        let got: Vec<f64> = out.iter().map(|v| v.as_ref().unwrap().as_f64().unwrap()).collect();
        assert_eq!(got, [1.0, 1.0, 1.0 / 3.0]);
        assert_eq!(p.encoding(p.output), Encoding::Numerical);
    }

    #[test]
    fn dyck_has_one_balance_per_pair() {
        let p = load("dyck_n", &[("pairs", "(),{}")]);
        let balances = p.nodes.iter().filter(|n| n.name.starts_with("balance")).count();
        assert_eq!(balances, 2);
        let run = |s: &str| eval_sop(&p, &chars(s), false).unwrap();
        assert_eq!(run("({})").last().unwrap(), &Some(Value::Bool(true)));
        assert_eq!(run("({)}").last().unwrap(), &Some(Value::Bool(true)));
        assert_eq!(run("(}").last().unwrap(), &Some(Value::Bool(false)));
        assert_eq!(run(")(").last().unwrap(), &Some(Value::Bool(false)));
    }

    #[test]
    fn unknown_builtin() {
        let err = load_builtin("nonexistent", &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, FrontendError::UnknownBuiltin(_)));
    }
}
