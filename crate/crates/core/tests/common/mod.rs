//! Fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod checks;

use std::collections::BTreeMap;

use rasp_forge::compiler::{compile, CompileOptions, Compiled};
use rasp_forge::frontend::load_builtin;
use rasp_forge::rasp::Program;
use rasp_forge::Value;

/// A builtin with the vocabulary and lengths it is checked on.
pub struct Case {
    pub name: &'static str,
    pub program: Program,
    pub options: CompileOptions,
    /// Longest input in exhaustive sweeps.
    pub sweep_len: usize,
}

impl Case {
    pub fn compile(&self) -> Compiled {
        compile(&self.program, &self.options).unwrap_or_else(|e| panic!("{}: {e}", self.name))
    }
}

pub fn tokens(s: &str) -> Vec<Value> {
    s.chars().map(|c| Value::parse_token(&c.to_string())).collect()
}

fn params(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn case(name: &'static str, ps: &[(&str, &str)], vocab: &[&str], n: usize, sweep_len: usize) -> Case {
    Case {
        name,
        program: load_builtin(name, &params(ps)).unwrap(),
        options: CompileOptions::new(vocab.iter().map(|t| Value::parse_token(t)), n),
        sweep_len,
    }
}

pub fn frac_prevs() -> Case {
    case("frac_prevs", &[], &["a", "b", "c", "x"], 5, 4)
}

pub fn sort_unique() -> Case {
    case("sort_unique", &[], &["1", "2", "3", "4"], 4, 4)
}

pub fn sort() -> Case {
    case("sort", &[("context_length", "4")], &["1", "2", "3", "4"], 4, 4)
}

pub fn pair_balance() -> Case {
    case("pair_balance", &[], &["(", ")", "a", "b"], 4, 4)
}

pub fn dyck_n() -> Case {
    case("dyck_n", &[("pairs", "(),{}")], &["(", ")", "{", "}"], 6, 6)
}

pub fn all_cases() -> Vec<Case> {
    vec![frac_prevs(), sort_unique(), sort(), pair_balance(), dyck_n()]
}

/// Every sequence over `vocab` with length between 1 and `max_len`.
pub fn all_inputs(vocab: &[Value], max_len: usize) -> Vec<Vec<Value>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<Value>> = vec![vec![]];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|prefix| {
                vocab.iter().map(move |t| {
                    let mut s = prefix.clone();
                    s.push(t.clone());
                    s
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

/// Compares the compiled model with the interpreter on every input up to
/// the case's sweep length. Returns the number of inputs compared, or the
/// first disagreement. Inputs the program itself rejects are skipped.
pub fn sweep(case: &Case) -> Result<usize, String> {
    use rasp_forge::compiler::{outputs_agree, NUMERICAL_TOLERANCE};
    use rasp_forge::rasp::Interpreter;

    let compiled = case.compile();
    let enc = compiled.graph.encoding(compiled.graph.program.output);
    let interp = Interpreter::new(&case.program).vocab(&case.options.vocab);
    let mut checked = 0;
    for input in all_inputs(&case.options.vocab, case.sweep_len) {
        let Ok(want) = interp.run(&input) else { continue };
        let got = compiled.model.run(&input).map_err(|e| format!("{}: {e}", case.name))?;
        for (p, (w, g)) in want.iter().zip(&got).enumerate() {
            if !outputs_agree(enc, w, g, NUMERICAL_TOLERANCE) {
                return Err(format!(
                    "{} on {input:?} at {p}: interpreter {w:?}, model {g:?}",
                    case.name
                ));
            }
        }
        checked += 1;
    }
    Ok(checked)
}
