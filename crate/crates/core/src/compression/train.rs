use std::collections::HashMap;
use std::fmt::Write;

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{loss_and_grad, Reference};
use super::{diagnostics::accuracy, CompressionConfig, CompressionError};
use crate::runtime::CompiledModel;
use crate::value::Value;

/// Evaluation inputs are drawn from this fixed stream so that runs with
/// different seeds are scored on the same sequences.
const EVAL_SEED: u64 = 0x0e7a1;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub l_out: f64,
    pub l_layer: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionState {
    pub w: Array2<f64>,
    /// AdamW first and second moments.
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub step: usize,
    pub history: Vec<MetricRow>,
}

impl CompressionState {
    /// Uniform in `[-1/sqrt(D), 1/sqrt(D)]`.
    pub fn init(d_model: usize, d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_model as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w = Array2::from_shape_fn((d_model, d), |_| dist.sample(rng));
        CompressionState {
            m: Array2::zeros(w.raw_dim()),
            v: Array2::zeros(w.raw_dim()),
            w,
            step: 0,
            history: Vec::new(),
        }
    }
}

/// Learning rate at `step`: linear from `lr_start` to `lr_end` over the
/// first half of training, constant afterwards.
pub fn learning_rate(config: &CompressionConfig, step: usize) -> f64 {
    let half = (config.steps / 2).max(1);
    if step >= half {
        config.lr_end
    } else {
        config.lr_start + (config.lr_end - config.lr_start) * step as f64 / half as f64
    }
}

/// One AdamW update with decoupled weight decay.
pub fn adamw_step(state: &mut CompressionState, grad: &Array2<f64>, lr: f64, config: &CompressionConfig) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    ndarray::Zip::from(&mut state.w)
        .and(&mut state.m)
        .and(&mut state.v)
        .and(grad)
        .for_each(|w, m, v, g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + config.eps);
            *w -= lr * (update + config.weight_decay * *w);
        });
}

/// Random inputs: lengths uniform in `[1, max]`, tokens i.i.d. uniform.
pub fn sample_inputs(model: &CompiledModel, count: usize, rng: &mut impl Rng) -> Vec<Vec<Value>> {
    let vocab = &model.config.vocab;
    let max = model.config.max_seq_len.saturating_sub(1).max(1);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(1..=max);
            (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())].clone()).collect()
        })
        .collect()
}

/// The held-out evaluation inputs used for metrics.
pub fn eval_inputs(model: &CompiledModel, count: usize) -> Vec<Vec<Value>> {
    sample_inputs(model, count, &mut ChaCha8Rng::seed_from_u64(EVAL_SEED))
}

/// Reference passes keyed by token ids; the input space is small enough
/// that most draws repeat.
struct ReferenceCache<'m> {
    model: &'m CompiledModel,
    refs: HashMap<Vec<usize>, Reference>,
}

impl<'m> ReferenceCache<'m> {
    fn get_many(&mut self, inputs: &[Vec<Value>]) -> Result<Vec<&Reference>, CompressionError> {
        let mut keys = Vec::with_capacity(inputs.len());
        for input in inputs {
            let key = self.model.token_ids(input)?;
            if !self.refs.contains_key(&key) {
                self.refs.insert(key.clone(), Reference::new(self.model, input)?);
            }
            keys.push(key);
        }
        Ok(keys.iter().map(|k| &self.refs[k]).collect())
    }
}

/// Trains `W` with the model frozen and returns the final state. Metrics on
/// the held-out set are recorded at step 0, every `eval_every` steps and at
/// the end.
pub fn train(model: &CompiledModel, config: &CompressionConfig) -> Result<CompressionState, CompressionError> {
    config.check(model.config.d_model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = CompressionState::init(model.config.d_model, config.d, &mut rng);
    let mut cache = ReferenceCache {
        model,
        refs: HashMap::new(),
    };
    let eval = eval_inputs(model, config.eval_size);
    let eval_refs: Vec<Reference> = eval
        .iter()
        .map(|t| Reference::new(model, t))
        .collect::<Result<_, _>>()?;
    let record = |state: &CompressionState, step: usize| -> Result<MetricRow, CompressionError> {
        let batch: Vec<&Reference> = eval_refs.iter().collect();
        let (parts, _) = loss_and_grad(model, &state.w, &batch, config.layer_loss_weight, config.layer_target, false)?;
        Ok(MetricRow {
            step,
            l_out: parts.l_out,
            l_layer: parts.l_layer,
            accuracy: accuracy(model, &state.w, &eval_refs)?,
            lr: learning_rate(config, step),
        })
    };

    state.history.push(record(&state, 0)?);
    for step in 0..config.steps {
        let inputs = sample_inputs(model, config.batch_size, &mut rng);
        let batch = cache.get_many(&inputs)?;
        let (parts, grad) = loss_and_grad(model, &state.w, &batch, config.layer_loss_weight, config.layer_target, true)?;
        if !parts.total.is_finite() {
            return Err(CompressionError::Diverged { step });
        }
        let lr = learning_rate(config, step);
        adamw_step(&mut state, &grad.expect("gradient requested"), lr, config);
        let done = step + 1;
        if done % config.eval_every.max(1) == 0 || done == config.steps {
            state.history.push(record(&state, done)?);
        }
    }
    Ok(state)
}

pub fn metrics_csv(history: &[MetricRow]) -> String {
    let mut out = String::from("step,l_out,l_layer,accuracy,lr\n");
    for r in history {
        writeln!(out, "{},{:?},{:?},{:?},{:?}", r.step, r.l_out, r.l_layer, r.accuracy, r.lr).unwrap();
    }
    out
}
