//! RASP to transformer weights.
//!
//! The pipeline: build the computation graph (fusing elementwise chains),
//! infer the values every node can take, lower each node to craft blocks,
//! allocate blocks to sublayer slots, assemble the residual space, and
//! factor the attention maps into per-head weight matrices.

mod assemble;
mod graph;
mod lower;
mod values;

pub use assemble::{assemble, lower_blocks, residual_space, CraftModel};
pub use graph::{allocate_layers, build_graph, CompGraph};
pub use lower::{
    lower_map, lower_selector_aggregate, lower_selector_width, node_space, selector_width_scratch,
    AGGREGATE_BOS_BETA, SELECTOR_WIDTH_BOS_BETA,
};
pub use values::infer_values;

use crate::craft::CraftError;
use crate::rasp::{validate, Encoding, Program, ValidationError};
use crate::runtime::{CompiledModel, RuntimeError};
use crate::value::{Value, BOS_TOKEN};

/// Numerical outputs agree with the interpreter within this absolute
/// tolerance.
pub const NUMERICAL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CompileOptions {
    pub vocab: Vec<Value>,
    /// Longest input, not counting BOS.
    pub max_seq_len: usize,
    pub causal: bool,
    pub inv_temperature: f64,
    /// Step width of numerical discretization, as a fraction of the smallest
    /// gap between neighbouring input values.
    pub bucket_divisor: f64,
    /// Largest hidden layer a single MLP may use.
    pub max_hidden: usize,
}

impl CompileOptions {
    pub fn new(vocab: impl IntoIterator<Item = impl Into<Value>>, max_seq_len: usize) -> Self {
        CompileOptions {
            vocab: vocab.into_iter().map(Into::into).collect(),
            max_seq_len,
            causal: false,
            inv_temperature: 100.0,
            bucket_divisor: 100.0,
            max_hidden: 10_000,
        }
    }

    pub fn causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn inv_temperature(mut self, t: f64) -> Self {
        self.inv_temperature = t;
        self
    }

    fn check(&self) -> Result<(), CompileError> {
        let bad = |m: &str| Err(CompileError::BadOptions(m.to_string()));
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1");
        }
        if self.vocab.is_empty() {
            return bad("the vocabulary is empty");
        }
        if self.vocab.contains(&Value::str(BOS_TOKEN)) {
            return bad("the vocabulary may not contain the reserved token `bos`");
        }
        let mut sorted = self.vocab.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.vocab.len() {
            return bad("the vocabulary has repeated tokens");
        }
        if !(self.inv_temperature > 0.0 && self.inv_temperature.is_finite()) {
            return bad("inv_temperature must be positive");
        }
        if !(self.bucket_divisor > 0.0 && self.bucket_divisor.is_finite()) {
            return bad("bucket_divisor must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CompileError {
    #[error("invalid program: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Validation(Vec<ValidationError>),
    #[error("program is not validated: {0}")]
    NotValidated(String),
    #[error("invalid options: {0}")]
    BadOptions(String),
    #[error("cannot infer the values of `{node}`: {reason}")]
    ValueInference { node: String, reason: String },
    #[error("cannot compile `{node}`: {reason}")]
    Unsupported { node: String, reason: String },
    #[error("`{node}` needs {units} hidden units, more than the limit of {cap}")]
    TooManyHidden { node: String, units: usize, cap: usize },
    #[error(transparent)]
    Craft(#[from] CraftError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

/// Everything the compiler produces.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub model: CompiledModel,
    pub craft: CraftModel,
    pub graph: CompGraph,
}

pub fn compile(program: &Program, options: &CompileOptions) -> Result<Compiled, CompileError> {
    options.check()?;
    let program = validate(program).map_err(CompileError::Validation)?;
    let mut graph = build_graph(&program)?;
    infer_values(&mut graph, options)?;
    let num_blocks = allocate_layers(&mut graph);
    let slots = lower_blocks(&graph, num_blocks, options)?;
    let residual = residual_space(&graph, options)?;
    let (model, craft) = assemble(&graph, residual, slots, options)?;
    Ok(Compiled { model, craft, graph })
}

/// Whether a model output matches the interpreter's at one position.
///
/// Numerical outputs compare as numbers (a missing value reads as 0)
/// within `tol`; categorical outputs must be identical.
pub fn outputs_agree(encoding: Encoding, expected: &Option<Value>, actual: &Option<Value>, tol: f64) -> bool {
    match encoding {
        Encoding::Numerical => {
            let num = |v: &Option<Value>| v.as_ref().map_or(Some(0.0), Value::as_f64);
            match (num(expected), num(actual)) {
                (Some(a), Some(b)) => (a - b).abs() <= tol,
                _ => false,
            }
        }
        Encoding::Categorical => match (expected, actual) {
            (None, None) => true,
            (Some(a), Some(b)) => a == b || a.approx_eq(b, 1e-9),
            _ => false,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{load_builtin, parse};
    use crate::rasp::Interpreter;
    use std::collections::BTreeMap;

    fn toks(s: &str) -> Vec<Value> {
        s.chars().map(|c| Value::str(c.to_string())).collect()
    }

    fn frac_prevs(n: usize) -> Compiled {
        let p = load_builtin("frac_prevs", &BTreeMap::new()).unwrap();
        compile(&p, &CompileOptions::new(["a", "b", "c", "x"], n)).unwrap()
    }

    #[test]
    fn frac_prevs_worked_example() {
        let c = frac_prevs(5);
        let out = c.model.run(&toks("xacx")).unwrap();
        let want = [1.0, 0.5, 1.0 / 3.0, 0.5];
        for (o, w) in out.iter().zip(want) {
            let got = o.as_ref().unwrap().as_f64().unwrap();
            assert!((got - w).abs() < 1e-9, "{got} vs {w}");
        }
        assert_eq!(c.model.config.num_blocks, 2);
        assert_eq!(c.model.config.d_model, 13);
        assert_eq!(frac_prevs(6).model.config.d_model, 14);
    }

    #[test]
    fn frac_prevs_graph_and_slots() {
        let c = frac_prevs(3);
        let mut names = c.graph.names();
        names.sort();
        assert_eq!(names, ["frac_prevs", "indices", "is_x", "prevs", "tokens"]);
        let g = &c.graph;
        assert_eq!(g.slot(g.find("is_x").unwrap()), 1);
        assert_eq!(g.slot(g.find("frac_prevs").unwrap()), 2);
        assert!(c.craft.layers[0].is_none() && c.craft.layers[3].is_none());
        let fp: Vec<f64> = g.value_set(g.find("frac_prevs").unwrap()).numeric_values().unwrap();
        let want = [0.0, 1.0 / 3.0, 0.5, 2.0 / 3.0, 1.0];
        assert_eq!(fp.len(), want.len());
        for (a, b) in fp.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn return_tokens_is_identity() {
        let p = parse("return tokens;").unwrap();
        let c = compile(&p, &CompileOptions::new(["a", "b"], 3)).unwrap();
        assert_eq!(c.graph.order.len(), 2);
        assert_eq!(c.model.config.num_blocks, 0);
        let input = toks("bab");
        let want: Vec<Option<Value>> = input.iter().cloned().map(Some).collect();
        assert_eq!(c.model.run(&input).unwrap(), want);
    }

    #[test]
    fn nested_maps_fuse() {
        let p = parse("y = map((x) -> x + 1, map((x) -> x * 2, indices)); return y;").unwrap();
        let c = compile(&p, &CompileOptions::new(["a"], 4)).unwrap();
        assert_eq!(c.graph.order.len(), 3);
        let out = c.model.run(&toks("aaa")).unwrap();
        assert_eq!(out, vec![Some(Value::num(1.0)), Some(Value::num(3.0)), Some(Value::num(5.0))]);
    }

    #[test]
    fn numerical_map_discretizes() {
        let src = "w = numerical(aggregate(select(tokens, tokens, true), numerical(tokens == \"x\")));\n\
                   y = numerical(map((v) -> 1 / (v + 1), w));\nreturn y;";
        let p = parse(src).unwrap();
        let c = compile(&p, &CompileOptions::new(["a", "x"], 4)).unwrap();
        for input in ["x", "ax", "aaxx", "aaa", "xxxa"] {
            let t = toks(input);
            let want = Interpreter::new(&p).run(&t).unwrap();
            let got = c.model.run(&t).unwrap();
            for (w, g) in want.iter().zip(&got) {
                assert!(outputs_agree(Encoding::Numerical, w, g, 1e-9), "{input}: {w:?} vs {g:?}");
            }
        }
    }

    #[test]
    fn rejects_bos_in_vocab() {
        let p = parse("return tokens;").unwrap();
        assert!(matches!(
            compile(&p, &CompileOptions::new(["a", "bos"], 3)),
            Err(CompileError::BadOptions(_))
        ));
    }

    #[test]
    fn hidden_cap_is_enforced() {
        let p = parse("y = map2((a, b) -> a + b, tokens, indices); return y;").unwrap();
        let mut o = CompileOptions::new((0..20).map(|i| Value::num(i as f64)), 20);
        o.max_hidden = 50;
        assert!(matches!(compile(&p, &o), Err(CompileError::TooManyHidden { .. })));
    }

    #[test]
    fn non_binary_numerical_aggregate_is_rejected() {
        let p = parse("y = numerical(aggregate(select(tokens, tokens, true), numerical(indices + 0))); return y;")
            .unwrap();
        let e = compile(&p, &CompileOptions::new(["a"], 3)).unwrap_err();
        assert!(e.to_string().contains("{0, v}"), "{e}");
    }
}
