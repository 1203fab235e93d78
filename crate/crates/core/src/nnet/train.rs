use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ctc::ctc_required_frames;
use super::model::{accumulate_loss_grad, loss_only};
use super::params::average_checkpoints;
use super::{DropoutMode, ModelConfig, NnetError, Params};
use crate::corpus::{spec_augment, Corpus, MaskConfig};
use crate::seeding::{derive_seed, rng_for};

/// Warmup-then-inverse-square-root learning rate:
/// `factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn lr_schedule(step: usize, factor: f64, d_model: usize, warmup: usize) -> Result<f64, NnetError> {
    if step == 0 {
        return Err(NnetError::ZeroStep);
    }
    let step = step as f64;
    let warmup = warmup.max(1) as f64;
    Ok(factor * (d_model as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5)))
}

pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: i32,
}

impl Adam {
    pub fn new(params: &mut Params) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors_mut().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9, first: zeros.clone(), second: zeros, steps: 0 }
    }

    pub fn step(&mut self, params: &mut Params, grads: &mut Params, lr: f64) {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        let lr = lr as f32;
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors_mut())
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub factor: f64,
    pub seed: u64,
    /// Feature masking applied to every training utterance; `None` disables it.
    pub augment: Option<MaskConfig>,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Number of lowest-validation-loss epoch checkpoints to average.
    pub average_best: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            warmup: 400,
            factor: 1.0,
            seed: 0,
            augment: Some(MaskConfig::default()),
            grad_clip: 5.0,
            average_best: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// End-of-epoch parameters, one per epoch.
    pub checkpoints: Vec<Params>,
    /// Mean of the `average_best` checkpoints with the lowest validation loss.
    pub averaged: Params,
    /// 1-based epochs that went into `averaged`.
    pub averaged_epochs: Vec<usize>,
    pub skipped_infeasible: usize,
}

struct Item<'a> {
    features: ndarray::ArrayView2<'a, f32>,
    label: &'a [u32],
}

fn feasible_items<'a>(config: &ModelConfig, corpus: &'a Corpus) -> (Vec<Item<'a>>, usize) {
    let mut skipped = 0;
    let items = corpus
        .utterances
        .iter()
        .filter_map(|u| {
            let label = u.transcript.as_ref()?.as_slice();
            if config.output_frames(u.n_frames()) < ctc_required_frames(label).max(1) {
                skipped += 1;
                return None;
            }
            Some(Item { features: u.features.view(), label })
        })
        .collect();
    (items, skipped)
}

fn mean_loss(params: &Params, items: &[Item<'_>]) -> Result<f64, NnetError> {
    let losses: Vec<f64> = items
        .par_iter()
        .map(|it| loss_only(params, it.features, it.label))
        .collect::<Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Train a freshly initialized model. Every random choice (initialization,
/// shuffling, dropout masks, feature masks) derives from `hyper.seed`.
pub fn train(
    config: &ModelConfig,
    train_set: &Corpus,
    valid_set: &Corpus,
    hyper: &TrainHyper,
) -> Result<TrainOutcome, NnetError> {
    config.validate()?;
    if hyper.epochs == 0 || hyper.batch_size == 0 {
        return Err(NnetError::Config("epochs and batch_size must be >= 1".into()));
    }
    if let Some(dim) = train_set.dim() {
        if dim != config.input_dim {
            return Err(NnetError::DimensionMismatch { expected: config.input_dim, found: dim });
        }
    }
    if let Some(mask) = &hyper.augment {
        if mask.n_freq_masks > 0 && mask.freq_width > config.input_dim {
            return Err(NnetError::Config(format!(
                "frequency mask width {} exceeds input dimension {}",
                mask.freq_width, config.input_dim
            )));
        }
    }
    let (items, skipped) = feasible_items(config, train_set);
    if skipped > 0 {
        log::warn!("skipping {skipped} training utterances too short for their labels");
    }
    if items.is_empty() {
        return Err(NnetError::EmptyTrainingSet(format!("{} utterances, none usable", train_set.len())));
    }
    let (valid_items, valid_skipped) = feasible_items(config, valid_set);
    if valid_skipped > 0 {
        log::warn!("skipping {valid_skipped} validation utterances too short for their labels");
    }

    let mut params = Params::init(config, derive_seed(hyper.seed, 0))?;
    let mut adam = Adam::new(&mut params);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0usize;
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut checkpoints = Vec::with_capacity(hyper.epochs);

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng_for(derive_seed(hyper.seed, 1), epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            step += 1;
            let step_seed = derive_seed(derive_seed(hyper.seed, 2), step as u64);
            let results: Vec<(f64, Params)> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    let item = &items[idx];
                    let item_seed = derive_seed(step_seed, slot as u64);
                    let augmented = match &hyper.augment {
                        Some(mask) => {
                            let mut mask = *mask;
                            if mask.time_width > item.features.nrows() {
                                mask.n_time_masks = 0;
                            }
                            Some(
                                spec_augment(&item.features.to_owned(), &mask, derive_seed(item_seed, 1))
                                    .expect("mask widths checked"),
                            )
                        }
                        None => None,
                    };
                    let features = match &augmented {
                        Some(a) => a.view(),
                        None => item.features.view(),
                    };
                    let mode = DropoutMode::Seeded { seed: derive_seed(item_seed, 2), p: config.dropout_p };
                    let mut grads = params.zeros_like();
                    let loss = accumulate_loss_grad(&params, features, item.label, mode, &mut grads)?;
                    Ok((loss, grads))
                })
                .collect::<Result<_, NnetError>>()?;

            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                grads.add_scaled(g, 1.0);
            }
            let n = results.len() as f64;
            batch_loss /= n;
            if !batch_loss.is_finite() {
                return Err(NnetError::Diverged { epoch, step, loss: batch_loss });
            }
            grads.scale((1.0 / n) as f32);
            if hyper.grad_clip > 0.0 {
                let norm = grads.l2_norm();
                if norm > hyper.grad_clip {
                    grads.scale((hyper.grad_clip / norm) as f32);
                }
            }
            let lr = lr_schedule(step, hyper.factor, config.d_model, hyper.warmup)?;
            adam.step(&mut params, &mut grads, lr);
            epoch_loss += batch_loss * n;
        }
        if !params.all_finite() {
            return Err(NnetError::Diverged { epoch, step, loss: f64::NAN });
        }
        let train_loss = epoch_loss / items.len() as f64;
        let valid_loss = if valid_items.is_empty() { train_loss } else { mean_loss(&params, &valid_items)? };
        if !valid_loss.is_finite() {
            return Err(NnetError::Diverged { epoch, step, loss: valid_loss });
        }
        log::info!("epoch {epoch}: train loss {train_loss:.4}, valid loss {valid_loss:.4}");
        history.push(EpochRecord { epoch, train_loss, valid_loss });
        checkpoints.push(params.clone());
    }

    let mut ranked: Vec<&EpochRecord> = history.iter().collect();
    ranked.sort_by(|a, b| a.valid_loss.total_cmp(&b.valid_loss).then(a.epoch.cmp(&b.epoch)));
    let mut averaged_epochs: Vec<usize> =
        ranked.iter().take(hyper.average_best.max(1)).map(|r| r.epoch).collect();
    averaged_epochs.sort_unstable();
    let chosen: Vec<Params> = averaged_epochs.iter().map(|&e| checkpoints[e - 1].clone()).collect();
    let averaged = average_checkpoints(&chosen)?;

    Ok(TrainOutcome { history, checkpoints, averaged, averaged_epochs, skipped_infeasible: skipped })
}
