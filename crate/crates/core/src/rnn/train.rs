//! SGD training for desk-scale models.
//!
//! Plain minibatch SGD with global gradient-norm clipping and a stepwise
//! learning-rate decay: after `decay_after` epochs the rate is multiplied by
//! `lr_decay` once per epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Batch, Model, ModelParams, Targets, Tracking, Unrolled};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_after: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1.0,
            lr_decay: 0.5,
            decay_after: 4,
            batch_size: 20,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

/// One supervised training example.
#[derive(Debug, Clone, PartialEq)]
pub enum Example {
    /// Next-token prediction: `inputs[t]` predicts `targets[t]`.
    Tokens { inputs: Vec<usize>, targets: Vec<usize> },
    /// A `(T, input_dim)` sequence with its class label.
    Labeled { sequence: Tensor, label: usize },
}

/// Splits a token stream into next-token windows of at most `seq_len` steps.
pub fn token_windows(stream: &[usize], seq_len: usize) -> Vec<Example> {
    if seq_len == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + seq_len).min(stream.len() - 1);
        out.push(Example::Tokens {
            inputs: stream[start..end].to_vec(),
            targets: stream[start + 1..end + 1].to_vec(),
        });
        start = end;
    }
    out
}

/// Collates examples of one kind into a padded batch with targets.
pub fn collate(examples: &[&Example]) -> Result<(Batch, Targets)> {
    match examples.first() {
        None => Err(Error::Input("empty batch".into())),
        Some(Example::Tokens { .. }) => {
            let mut inputs = Vec::with_capacity(examples.len());
            let mut targets = Vec::with_capacity(examples.len());
            for ex in examples {
                let Example::Tokens { inputs: i, targets: t } = ex else {
                    return Err(Error::Input("mixed example kinds in one batch".into()));
                };
                if i.len() != t.len() || i.is_empty() {
                    return Err(Error::Input("token example needs one target per input".into()));
                }
                inputs.push(i.clone());
                targets.push(t.clone());
            }
            let batch = Batch::tokens(&inputs);
            let steps = batch.steps();
            for t in &mut targets {
                t.resize(steps, 0);
            }
            Ok((batch, Targets::PerStep(targets)))
        }
        Some(Example::Labeled { .. }) => {
            let mut seqs = Vec::with_capacity(examples.len());
            let mut labels = Vec::with_capacity(examples.len());
            for ex in examples {
                let Example::Labeled { sequence, label } = ex else {
                    return Err(Error::Input("mixed example kinds in one batch".into()));
                };
                seqs.push(sequence.clone());
                labels.push(*label);
            }
            Ok((Batch::continuous(&seqs)?, Targets::Labels(labels)))
        }
    }
}

fn supervised_count(ex: &Example) -> usize {
    match ex {
        Example::Tokens { targets, .. } => targets.len(),
        Example::Labeled { .. } => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_perplexity: f64,
    pub valid_perplexity: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub history: Vec<EpochStats>,
}

/// Perplexity of `examples` under `model`, exp of the mean per-target NLL.
pub fn evaluate_perplexity(model: &Model, examples: &[Example], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let chunks: Vec<&[Example]> = examples.chunks(batch_size.max(1)).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| -> Result<(f64, usize)> {
            let refs: Vec<&Example> = chunk.iter().collect();
            let (batch, targets) = collate(&refs)?;
            let count: usize = chunk.iter().map(supervised_count).sum();
            let out = super::forward(model, &batch, Some(&targets), false)?;
            Ok((out.loss.unwrap_or(0.0) * count as f64, count))
        })
        .collect::<Result<Vec<_>>>()?;
    let (nll, count) = parts
        .iter()
        .fold((0.0, 0usize), |(a, n), (b, m)| (a + b, n + m));
    Ok((nll / count as f64).exp())
}

/// Classification accuracy of `examples` (labeled examples only).
pub fn evaluate_accuracy(model: &Model, examples: &[Example], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let chunks: Vec<&[Example]> = examples.chunks(batch_size.max(1)).collect();
    let correct = chunks
        .par_iter()
        .map(|chunk| -> Result<usize> {
            let refs: Vec<&Example> = chunk.iter().collect();
            let (batch, targets) = collate(&refs)?;
            let Targets::Labels(labels) = targets else {
                return Err(Error::Input("accuracy needs labeled examples".into()));
            };
            let out = super::forward(model, &batch, None, false)?;
            let k = out.logits.cols();
            Ok(labels
                .iter()
                .enumerate()
                .filter(|(b, &y)| crate::tensor::argmax(&out.logits.data()[b * k..(b + 1) * k]) == y)
                .count())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / examples.len() as f64)
}

fn clip_and_step(params: &mut ModelParams, grads: &ModelParams, lr: f64, clip: f64) {
    let norm = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let scale = if norm > clip { clip / norm } else { 1.0 };
    let step = lr * scale;
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= step * d;
        }
    }
}

/// Trains a copy of `model` and returns it with per-epoch perplexities.
pub fn train(model: &Model, train_set: &[Example], valid_set: &[Example], cfg: &TrainConfig) -> Result<Trained> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let config = model.config().clone();
    let mut params = model.params().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let decay_steps = (epoch + 1).saturating_sub(cfg.decay_after) as i32;
        let lr = cfg.learning_rate * cfg.lr_decay.powi(decay_steps);
        order.shuffle(&mut rng);
        let mut nll = 0.0;
        let mut count = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&Example> = idx.iter().map(|&i| &train_set[i]).collect();
            let (batch, targets) = collate(&refs)?;
            let current = Model::new(config.clone(), params)?;
            let mut graph = Unrolled::new(
                &current,
                &batch,
                Tracking {
                    params: true,
                    input: false,
                },
            )?;
            let loss = graph.loss(&targets)?;
            let value = graph.tape().scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let n: usize = refs.iter().map(|e| supervised_count(e)).sum();
            nll += value * n as f64;
            count += n;
            let grads = graph.param_gradients(loss);
            drop(graph);
            params = current.into_params();
            clip_and_step(&mut params, &grads, lr, cfg.clip_norm);
            if params.values().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
        }
        let current = Model::new(config.clone(), params.clone())?;
        let valid_perplexity = if valid_set.is_empty() {
            f64::NAN
        } else {
            evaluate_perplexity(&current, valid_set, cfg.batch_size.max(32))?
        };
        history.push(EpochStats {
            epoch,
            learning_rate: lr,
            train_perplexity: (nll / count as f64).exp(),
            valid_perplexity,
        });
    }

    Ok(Trained {
        model: Model::new(config, params)?,
        history,
    })
}
