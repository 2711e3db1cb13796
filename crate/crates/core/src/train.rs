//! Dense pretraining and mask-preserving sparse fine-tuning.
//!
//! Loss is taken only at label positions, averaged within each sequence and
//! then across the batch. The optimizer is AdamW with a linear warmup and
//! linear decay to zero.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::render_example;
use crate::error::{Error, Result};
use crate::model::{bind_params, forward_on_tape, ModelWeights, Transformer};
use crate::scalar::Scalar;
use crate::sparsity::{apply_mask, SparsityMask};
use crate::tensor::{ops, GradTape, Gradients, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    /// Fraction of `steps` spent warming up.
    #[serde(default = "default_warmup")]
    pub warmup: f64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_warmup() -> f64 {
    0.05
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn new(lr: f64, steps: usize, batch_size: usize) -> Self {
        Self {
            lr,
            warmup: default_warmup(),
            steps,
            batch_size,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            grad_clip: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::config(format!("warmup fraction {} outside [0, 1)", self.warmup)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::config("lr and weight_decay must be >= 0 and eps > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup * self.steps as f64).ceil() as usize
    }
}

/// Learning rate for update `step` (zero-based): `0 → peak` over the warmup
/// steps, then `peak → 0` at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.steps {
        return Err(Error::usage(format!("step {step} beyond {} total", cfg.steps)));
    }
    let warm = cfg.warmup_steps();
    Ok(if step < warm {
        cfg.lr * step as f64 / warm as f64
    } else {
        cfg.lr * (cfg.steps - step) as f64 / (cfg.steps - warm) as f64
    })
}

/// AdamW moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(weights: &ModelWeights<T>) -> Result<Self> {
        let zeros = weights
            .iter()
            .map(|(k, t)| Ok((k.clone(), Tensor::zeros(t.shape())?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }
}

/// One bias-corrected AdamW update with decoupled weight decay:
/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
pub fn adamw_step<T: Scalar>(
    weights: &mut ModelWeights<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (path, g) in grads {
        let p = weights.get(path)?;
        let (m, v) = match (state.m.get(path), state.v.get(path)) {
            (Some(m), Some(v)) => (m, v),
            _ => return Err(Error::shape(format!("no optimizer state for `{path}`"))),
        };
        if g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape(format!(
                "gradient {:?} / parameter {:?} mismatch for `{path}`",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let c1 = T::c(1.0 - cfg.beta1.powi(t));
    let c2 = T::c(1.0 - cfg.beta2.powi(t));
    let (lr, eps, wd) = (T::c(lr), T::c(cfg.eps), T::c(cfg.weight_decay));
    let one = T::one();
    for (path, g) in grads {
        let p = weights.get_mut(path)?.data_mut();
        let m = state.m.get_mut(path).expect("checked").data_mut();
        let v = state.v.get_mut(path).expect("checked").data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
        }
    }
    Ok(())
}

/// Mean of `−log softmax(logits[j])[labels[j]]` over positions with
/// `mask[j]`.
pub fn nll_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize], mask: &[bool]) -> Result<f64> {
    if labels.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::shape(format!(
            "{} logits rows, {} labels, {} mask entries",
            logits.rows(),
            labels.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (j, (&y, &keep)) in labels.iter().zip(mask).enumerate() {
        if keep {
            total -= ops::log_prob(logits.row(j), y)?.to_f64_lossy();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::usage("loss mask selects no positions"));
    }
    Ok(total / count as f64)
}

/// `1/N · Σ_i nll_loss(sequence i)`.
pub fn batch_nll_loss<T: Scalar>(batch: &[(Tensor<T>, Vec<usize>, Vec<bool>)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let mut total = 0.0;
    for (logits, labels, mask) in batch {
        total += nll_loss(logits, labels, mask)?;
    }
    Ok(total / batch.len() as f64)
}

/// A rendered training sequence: inputs `tokens[..n−1]` predict
/// `tokens[1..]`, and loss counts only targets at or after `loss_start`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub loss_start: usize,
}

impl Example {
    /// `[BOS] prompt [SEP] label [EOS]`, cut to `max_seq + 1` tokens so the
    /// inputs fit the model. Errors if the cut leaves no label token.
    pub fn new(prompt: &[usize], label: &[usize], max_seq: usize) -> Result<Self> {
        let (mut tokens, loss_start) = render_example(prompt, label);
        tokens.truncate(max_seq + 1);
        if loss_start >= tokens.len() {
            return Err(Error::SequenceOverflow {
                needed: loss_start + 1,
                max_seq,
            });
        }
        Ok(Self { tokens, loss_start })
    }

    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// `(position, target)` pairs that carry loss.
    pub fn targets(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.loss_start..self.tokens.len()).map(|t| (t - 1, self.tokens[t]))
    }
}

pub fn examples_from_pairs(pairs: &[(Vec<usize>, Vec<usize>)], max_seq: usize) -> Result<Vec<Example>> {
    pairs.iter().map(|(p, y)| Example::new(p, y, max_seq)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct StepOutcome<T> {
    pub point: CurvePoint,
    /// Gradients as handed to the optimizer (after hooks and clipping).
    pub grads: Gradients<T>,
}

/// Step-by-step trainer; [`pretrain_dense`] and [`finetune_sparse`] drive it
/// to completion.
pub struct Trainer<T: Scalar> {
    pub model: Transformer<T>,
    pub optimizer: OptimizerState<T>,
    pub curve: Vec<CurvePoint>,
    cfg: TrainConfig,
    examples: Vec<Example>,
    tape: GradTape<T>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    /// With a mask, masked weights are zeroed and their gradients are zeroed
    /// by hooks on every step, so weights and moments stay exactly zero.
    pub fn new(
        mut model: Transformer<T>,
        examples: Vec<Example>,
        cfg: TrainConfig,
        mask: Option<&SparsityMask>,
    ) -> Result<Self> {
        cfg.validate()?;
        if examples.is_empty() {
            return Err(Error::usage("no training examples"));
        }
        let mut tape = GradTape::new();
        if let Some(mask) = mask {
            mask.check_against(&model.weights)?;
            apply_mask(&mut model.weights, mask)?;
            for (path, bitmap) in mask.iter() {
                let keep = bitmap.bits().to_vec();
                tape.declare_param(path);
                tape.register_grad_hook(
                    path,
                    Box::new(move |g: &mut Tensor<T>| {
                        for (x, &k) in g.data_mut().iter_mut().zip(&keep) {
                            if !k {
                                *x = T::zero();
                            }
                        }
                    }),
                )?;
            }
        }
        let optimizer = OptimizerState::new(&model.weights)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            model,
            optimizer,
            curve: Vec::with_capacity(cfg.steps),
            cfg,
            examples,
            tape,
            order,
            cursor: 0,
            rng,
            step: 0,
        })
    }

    pub fn model(&self) -> &Transformer<T> {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState<T> {
        &self.optimizer
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    /// Example indices for the next batch, walking reshuffled epochs.
    fn next_batch(&mut self) -> Vec<usize> {
        (0..self.cfg.batch_size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<StepOutcome<T>> {
        if self.is_done() {
            return Err(Error::usage("training already finished"));
        }
        let batch = self.next_batch();
        let n = batch.len() as f64;
        self.tape.clear();
        let params = bind_params(&mut self.tape, &self.model.weights)?;
        let mut loss = None;
        for &i in &batch {
            let ex = &self.examples[i];
            let logits = forward_on_tape(&self.model.config, &mut self.tape, &params, ex.inputs())?;
            let s = (ex.tokens.len() - ex.loss_start) as f64;
            let w = T::c(1.0 / (n * s));
            let targets: Vec<(usize, usize, T)> = ex.targets().map(|(r, t)| (r, t, w)).collect();
            let l = self.tape.nll(logits, &targets)?;
            loss = Some(match loss {
                None => l,
                Some(acc) => self.tape.add(acc, l)?,
            });
        }
        let loss = loss.expect("batch_size >= 1");
        let loss_value = self.tape.value(loss)?.item()?.to_f64_lossy();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let mut grads = self.tape.backward(loss)?;
        if let Some(clip) = self.cfg.grad_clip {
            let norm = grads
                .values()
                .flat_map(|g| g.data())
                .map(|x| x.to_f64_lossy().powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = T::c(clip / norm);
                for g in grads.values_mut() {
                    g.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        let lr = lr_at(self.step, &self.cfg)?;
        adamw_step(&mut self.model.weights, &grads, &mut self.optimizer, lr, &self.cfg)?;
        let point = CurvePoint {
            step: self.step,
            lr,
            loss: loss_value,
        };
        self.curve.push(point);
        self.step += 1;
        Ok(StepOutcome { point, grads })
    }

    pub fn run(mut self) -> Result<TrainOutcome<T>> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(TrainOutcome {
            final_loss: self.curve.last().map(|p| p.loss).unwrap_or(f64::NAN),
            model: self.model,
            optimizer: self.optimizer,
            curve: self.curve,
        })
    }
}

pub struct TrainOutcome<T> {
    pub model: Transformer<T>,
    pub optimizer: OptimizerState<T>,
    pub curve: Vec<CurvePoint>,
    /// Loss of the last batch.
    pub final_loss: f64,
}

/// Trains every weight on `examples`.
pub fn pretrain_dense<T: Scalar>(
    model: Transformer<T>,
    examples: Vec<Example>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    Trainer::new(model, examples, cfg.clone(), None)?.run()
}

/// Fine-tunes under a fixed mask: masked weights start at zero and stay
/// exactly zero, as do their gradients and optimizer moments.
pub fn finetune_sparse<T: Scalar>(
    model: Transformer<T>,
    mask: &SparsityMask,
    examples: Vec<Example>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    Trainer::new(model, examples, cfg.clone(), Some(mask))?.run()
}
