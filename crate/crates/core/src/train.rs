//! Cross-entropy training with Adam, step-decayed learning rate, scheduled
//! sampling and the time-cost penalty.
//!
//! A mini-batch is realized as gradient accumulation over per-instance tapes.
//! Instances of a batch run in parallel and their gradients are summed in
//! batch order, so a run is bit-reproducible for a given seed regardless of
//! the thread count.

use crate::data::{Dataset, Example};
use crate::decoder::{Decoding, Model};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::{attention_stats, bleu, EvalReport};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("adam", &[params.len()], &[grads.len(), self.m.len()]));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::dim("adam", p.shape(), g.shape()));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `lr0 · decay^⌊epoch / every⌋`.
pub fn lr_schedule(epoch: usize, lr0: f64, decay: f64, every: usize) -> f64 {
    lr0 * decay.powi((epoch / every.max(1)) as i32)
}

/// `min(cap, step · ⌊epoch / every⌋)`.
pub fn scheduled_sampling_prob(epoch: usize, step: f64, every: usize, cap: f64) -> f64 {
    (step * (epoch / every.max(1)) as f64).min(cap)
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_every: usize,
    pub ss_step: f64,
    pub ss_every: usize,
    pub ss_cap: f64,
    pub clip: f64,
    pub seed: u64,
    /// Greedy decoding limit during validation, in tokens including EOS.
    pub max_decode: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 10,
            lr: 1e-4,
            lr_decay: 0.8,
            lr_every: 2,
            ss_step: 0.05,
            ss_every: 3,
            ss_cap: 0.25,
            clip: 5.0,
            seed: 0,
            max_decode: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.ss_cap) || self.ss_step < 0.0 {
            return Err(Error::config("scheduled sampling step and cap must lie in [0, 1]"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::config("clip must be positive"));
        }
        if self.max_decode == 0 {
            return Err(Error::config("max_decode must be at least 1"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    /// Mean per-token cross-entropy plus time cost.
    pub loss: f64,
    /// Mean per-token time cost.
    pub ponder: f64,
    pub mean_steps: f64,
    pub acc: f64,
    /// Greedy corpus BLEU-4; validation only.
    pub bleu4: Option<f64>,
    pub lr: f64,
    pub ss_prob: f64,
}

/// Forward and backward pass of one teacher-forced instance.
#[derive(Clone, Debug)]
pub struct InstanceGrad {
    pub grads: Vec<Tensor>,
    pub loss: f64,
    pub cross_entropy: f64,
    pub ponder: f64,
    pub tokens: usize,
    pub correct: usize,
    pub steps: usize,
}

pub fn instance_gradient(
    model: &Model,
    ex: &Example,
    sampling: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<InstanceGrad> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let session = model.session_with(&mut tape, bound, &ex.features)?;
    let out = session.teacher_forced(&mut tape, &ex.target, sampling)?;
    let loss = out.loss.expect("teacher forcing yields a loss");
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    Ok(InstanceGrad {
        grads: session.bound().collect(&grads),
        loss: value,
        cross_entropy: out.cross_entropy,
        ponder: out.ponder,
        tokens: ex.target.len(),
        correct: out.correct,
        steps: out.trace.iter().map(|s| s.n_t).sum(),
    })
}

fn instance_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Teacher-forced loss, accuracy and steps plus greedy BLEU over `examples`.
pub fn evaluate(model: &Model, examples: &[Example], max_decode: usize) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Metric("empty evaluation set".into()));
    }
    let results: Vec<_> = examples
        .par_iter()
        .map(|ex| {
            let tf = model.decode(&ex.features, Decoding::TeacherForcing(&ex.target))?;
            let greedy = model.decode(&ex.features, Decoding::Greedy { max_len: max_decode })?;
            Ok((tf, greedy.tokens))
        })
        .collect::<Result<Vec<_>>>()?;
    let tokens: usize = examples.iter().map(|e| e.target.len()).sum();
    let (mut ce, mut ponder, mut correct) = (0.0, 0.0, 0usize);
    for (tf, _) in &results {
        ce += tf.cross_entropy;
        ponder += tf.ponder;
        correct += tf.correct;
    }
    let stats = attention_stats(results.iter().map(|(tf, _)| tf.trace.as_slice()))?;
    let hyps: Vec<Vec<usize>> = results.iter().map(|r| r.1.clone()).collect();
    let refs: Vec<Vec<Vec<usize>>> = examples
        .iter()
        .map(|e| vec![e.target[..e.target.len() - 1].to_vec()])
        .collect();
    let b = bleu(&hyps, &refs, 4)?;
    let n = tokens as f64;
    Ok(EvalReport {
        mode: model.config.mode.to_string(),
        instances: examples.len(),
        tokens,
        loss: (ce + ponder) / n,
        cross_entropy: ce / n,
        ponder: ponder / n,
        accuracy: correct as f64 / n,
        bleu1: b.scores[0],
        bleu2: b.scores[1],
        bleu3: b.scores[2],
        bleu4: b.scores[3],
        steps_min: stats.min,
        steps_max: stats.max,
        steps_mean: stats.mean,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model with the parameters of the best validation epoch (the last epoch
    /// when there is no validation split).
    pub best: Model,
    pub best_epoch: usize,
    pub final_model: Model,
    pub logs: Vec<EpochLog>,
}

/// Trains `model` on `data.train`, validating on `data.val` after every epoch.
/// `on_log` sees every log record as soon as it is produced.
pub fn train(
    model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.vocab.len() != model.config.vocab_size {
        return Err(Error::config(format!(
            "dataset vocabulary has {} tokens, model expects {}",
            data.vocab.len(),
            model.config.vocab_size
        )));
    }
    if data.train.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let mut model = model;
    let mut adam = Adam::new(model.params.tensors());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut logs = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.lr, cfg.lr_decay, cfg.lr_every);
        let ss = scheduled_sampling_prob(epoch, cfg.ss_step, cfg.ss_every, cfg.ss_cap);
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000);
        shuffle.set_stream(epoch as u64);
        order.shuffle(&mut shuffle);

        let (mut loss, mut ponder, mut tokens, mut correct, mut steps) = (0.0, 0.0, 0, 0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let current = &model;
            let results: Vec<InstanceGrad> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = instance_rng(cfg.seed, epoch, i);
                    let sampling = (ss > 0.0).then_some((ss, &mut rng));
                    instance_gradient(current, &data.train[i], sampling)
                })
                .collect::<Result<_>>()?;
            let mut grads: Vec<Tensor> = model
                .params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for r in &results {
                if !r.loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        msg: format!("non-finite loss {}", r.loss),
                    });
                }
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                loss += r.loss;
                ponder += r.ponder;
                tokens += r.tokens;
                correct += r.correct;
                steps += r.steps;
            }
            let scale = 1.0 / results.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            let norm = clip_global_norm(&mut grads, cfg.clip);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    msg: format!("non-finite gradient norm {norm}"),
                });
            }
            adam.step(model.params.tensors_mut(), &grads, lr)?;
            step += 1;
        }
        let n = tokens as f64;
        let train_log = EpochLog {
            epoch,
            split: "train".into(),
            loss: loss / n,
            ponder: ponder / n,
            mean_steps: steps as f64 / n,
            acc: correct as f64 / n,
            bleu4: None,
            lr,
            ss_prob: ss,
        };
        on_log(&train_log);
        logs.push(train_log);

        let score = if data.val.is_empty() {
            -(epoch as f64)
        } else {
            let r = evaluate(&model, &data.val, cfg.max_decode)?;
            if !r.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    msg: format!("non-finite validation loss {}", r.loss),
                });
            }
            let val_log = EpochLog {
                epoch,
                split: "val".into(),
                loss: r.loss,
                ponder: r.ponder,
                mean_steps: r.steps_mean,
                acc: r.accuracy,
                bleu4: Some(r.bleu4),
                lr,
                ss_prob: ss,
            };
            on_log(&val_log);
            logs.push(val_log);
            r.loss
        };
        if best.as_ref().map_or(true, |b| score < b.0) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        final_model: model,
        logs,
    })
}
