//! Measurements shared by the construction tests and the acceptance run.

use ndarray::Array2;
use rasp_forge::compiler::{compile, selector_width_scratch, CompileOptions, Compiled};
use rasp_forge::craft::CraftLayer;
use rasp_forge::frontend::parse;
use rasp_forge::rasp::Interpreter;
use rasp_forge::Value;

use super::{all_inputs, frac_prevs};

pub fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// For every head, the factored matrices reproduce the labelled operators.
pub fn factorization_error(c: &Compiled) -> f64 {
    let space = &c.craft.residual;
    let scale = (c.model.config.key_size as f64).sqrt();
    let mut worst = 0.0f64;
    for (slot, layer) in c.craft.layers.iter().enumerate() {
        let Some(CraftLayer::Attention(heads)) = layer else { continue };
        let block = &c.model.weights.blocks[slot / 2];
        assert_eq!(block.heads.len(), heads.len());
        for (h, w) in heads.iter().zip(&block.heads) {
            let qk = h.w_qk().embed(space, space);
            let ov = h.w_ov.embed(space, space);
            worst = worst.max(max_abs(&(w.w_q.dot(&w.w_k.t()) / scale), &qk));
            worst = worst.max(max_abs(&w.w_v.dot(&w.w_o), &ov));
        }
    }
    worst
}

/// Attention weights of the frac_prevs aggregation head against the
/// normalized selector (BOS when nothing is selected).
pub fn aggregate_pattern_error() -> f64 {
    let case = frac_prevs();
    let c = case.compile();
    let prevs = case.program.find("prevs").expect("frac_prevs names its selector");
    let interp = Interpreter::new(&case.program);
    let slot = c.graph.slot(c.graph.find("frac_prevs").unwrap()) as usize;
    let Some(CraftLayer::Attention(heads)) = &c.craft.layers[slot] else { panic!("no head at slot {slot}") };
    let mut worst = 0.0f64;
    for input in all_inputs(&case.options.vocab, 4) {
        let mut x = c.model.embed(&input).unwrap();
        for layer in c.craft.layers[..slot].iter().flatten() {
            x += &layer.apply(&c.craft.residual, x.view(), false).unwrap();
        }
        let a = heads[0].pattern(&c.craft.residual, x.view(), false).unwrap();
        let sel = interp.selector(prevs, &input).unwrap();
        let n = input.len() + 1;
        let mut ideal = Array2::zeros((n, n));
        ideal[[0, 0]] = 1.0;
        for (q, row) in sel.iter().enumerate() {
            let count = row.iter().filter(|b| **b).count();
            if count == 0 {
                ideal[[q + 1, 0]] = 1.0;
            }
            for (k, &on) in row.iter().enumerate() {
                if on {
                    ideal[[q + 1, k + 1]] = 1.0 / count as f64;
                }
            }
        }
        worst = worst.max(max_abs(&a, &ideal));
    }
    worst
}

/// `selector_width` scratch value after its attention sublayer, against
/// `1 / (1 + w)` for every width from 0 to the maximum length.
pub fn selector_width_error(n: usize) -> f64 {
    let src = "lt = selector_width(select(indices, indices, <));\n\
               eq = selector_width(select(tokens, tokens, ==));\n\
               return map2((a, b) -> a + b, lt, eq);";
    let p = parse(src).unwrap();
    let c = compile(&p, &CompileOptions::new(["a"], n)).unwrap();
    let input: Vec<Value> = vec![Value::str("a"); n];
    let (_, trace) = c.model.forward(&input, true).unwrap();
    let trace = trace.unwrap();
    let mut worst = 0.0f64;
    for (name, widths) in [("lt", (0..n).collect::<Vec<_>>()), ("eq", vec![n; n])] {
        let node = c.graph.find(name).unwrap();
        let col = c.craft.residual.index_of(&selector_width_scratch(name)).unwrap();
        let after = &trace.snapshots[c.graph.slot(node) as usize];
        for (p, w) in widths.iter().enumerate() {
            let got = after[[p + 1, col]];
            worst = worst.max((got - 1.0 / (1.0 + *w as f64)).abs());
        }
    }
    worst
}

