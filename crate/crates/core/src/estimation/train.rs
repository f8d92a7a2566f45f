//! Mini-batch training with Adam and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{session_features, LabeledSession};
use super::model::{ModelSpec, Network, Target, Variant};
use super::{classify_read_level, ReadLevel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of positive rows in the binary cross-entropy.
    pub positive_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            positive_weight: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub model: ModelSpec,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub target: Target,
}

/// Training samples a variant learns from.
pub fn samples_for(variant: Variant, sessions: &[LabeledSession], positive_weight: f64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in sessions {
        for m in &s.messages {
            if variant.is_per_timestep() {
                out.extend(
                    m.rows.iter().map(|(x, label)| Sample { x: x.to_vec(), target: Target::Binary { label: *label, positive_weight } }),
                );
                continue;
            }
            let rows: Vec<_> = m.rows.iter().map(|(x, _)| *x).collect();
            let x = session_features(&rows);
            let target = if variant == Variant::CategoryNN {
                let words = m
                    .word_count
                    .ok_or_else(|| Error::Train(format!("no word count for section {} (needed for read-level labels)", m.section_id)))?;
                Target::Class(classify_read_level(m.true_time_s, words)?.index())
            } else {
                Target::Value(m.true_time_s)
            };
            out.push(Sample { x, target });
        }
    }
    Ok(out)
}

pub fn mean_loss(net: &Network, w: &[f64], samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += net.loss(w, &s.x, s.target)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Mean loss over `batch` and its gradient.
pub fn batch_gradient(net: &Network, w: &[f64], batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    for s in batch {
        loss += net.loss_and_grad(w, &s.x, s.target, &mut grad)?;
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, w: &mut [f64], grad: &[f64], c: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            w[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }
}

/// Fits `spec`'s network to the samples, starting from its current weights.
/// Validation loss drives early stopping; with no validation samples the
/// training loss is used.
pub fn fit(spec: &ModelSpec, train: &[Sample], validation: &[Sample], config: &TrainConfig) -> Result<TrainOutcome> {
    if !spec.variant.is_trainable() {
        return Err(Error::Train(format!("{:?} has nothing to train", spec.variant)));
    }
    if train.is_empty() {
        return Err(Error::Train("empty training set".into()));
    }
    if config.batch_size == 0 || config.max_epochs == 0 {
        return Err(Error::Train("batch size and epoch limit must be positive".into()));
    }
    let net = spec.network()?;
    if let Some(bad) = train.iter().chain(validation).find(|s| !s.target.fits(net.activation(), net.n_outputs())) {
        return Err(Error::Train(format!("target {:?} does not fit {:?}", bad.target, spec.variant)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w = spec.weights.clone();
    let mut adam = Adam { m: vec![0.0; w.len()], v: vec![0.0; w.len()], t: 0 };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, 0usize, w.clone());
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grad) = batch_gradient(&net, &w, &batch)?;
            train_loss += loss * batch.len() as f64;
            adam.step(&mut w, &grad, config);
        }
        train_loss /= train.len() as f64;
        let validation_loss = if validation.is_empty() { mean_loss(&net, &w, train)? } else { mean_loss(&net, &w, validation)? };
        if !validation_loss.is_finite() {
            return Err(Error::Train(format!("loss diverged at epoch {epoch}")));
        }
        history.push(EpochLog { epoch, train_loss, validation_loss });
        if validation_loss < best.0 {
            best = (validation_loss, epoch, w.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }
    let mut model = spec.clone();
    model.weights = best.2;
    model.seed = config.seed;
    Ok(TrainOutcome { model, epochs_run: history.len(), best_epoch: best.1, history })
}

/// Trains a freshly initialized model of `spec`'s variant and architecture
/// on labeled sessions.
pub fn train_model(
    spec: &ModelSpec,
    train: &[LabeledSession],
    validation: &[LabeledSession],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut start = spec.clone();
    if spec.variant.is_trainable() {
        start.weights = Network::from_arch(&spec.arch, spec.feature_order.len())?.init_weights(config.seed);
    }
    let train_samples = samples_for(spec.variant, train, config.positive_weight)?;
    let val_samples = samples_for(spec.variant, validation, config.positive_weight)?;
    fit(&start, &train_samples, &val_samples, config)
}

/// Read level a category model output stands for.
pub fn level_of_class(c: usize) -> ReadLevel {
    ReadLevel::ALL[c.min(2)]
}
