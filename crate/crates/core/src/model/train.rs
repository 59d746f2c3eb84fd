use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::base::BaseModel;
use crate::autodiff::{bce_mean, sgd_step, Tape};
use crate::data::Instance;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            lr: 0.01,
            batch_size: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean log-loss of each mini-batch before its update.
    pub batch_losses: Vec<f64>,
    /// Instance-weighted mean of the batch losses, per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD on log-loss, updating `θ` and every embedding table
/// jointly. A learning rate of 0 leaves the parameters untouched.
pub fn pretrain(model: &mut BaseModel, instances: &[Instance], config: &TrainConfig) -> Result<TrainTrace> {
    if instances.is_empty() {
        return Err(Error::validation("pre-training data", "is empty"));
    }
    if !(config.lr >= 0.0) || !config.lr.is_finite() {
        return Err(Error::validation(
            "learning rate",
            format!("{} must be non-negative", config.lr),
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::validation("batch size", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut trace = TrainTrace::default();
    model.set_frozen(false);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &instances[i]).collect();
            let (loss, grads) = {
                let encoded = model.encode(&batch)?;
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape)?;
                let p = model.forward(&mut tape, &bound, &encoded, None)?;
                let loss = bce_mean(&mut tape, p, encoded.labels())?;
                let wrt: Vec<_> = bound
                    .tables
                    .iter()
                    .chain(bound.dense.iter())
                    .chain(bound.indicators.iter().flatten())
                    .copied()
                    .collect();
                let grads = if config.lr > 0.0 {
                    tape.grad(loss, &wrt)?
                } else {
                    Vec::new()
                };
                (tape.value(loss).item()?, grads)
            };
            trace.batch_losses.push(loss);
            total += loss * chunk.len() as f64;
            if config.lr > 0.0 {
                let mut params: Vec<_> = model.params_mut().collect();
                sgd_step(&mut params, &grads, config.lr)?;
            }
        }
        trace.epoch_losses.push(total / instances.len() as f64);
    }
    Ok(trace)
}

/// Mean log-loss of the model on `instances` using looked-up embeddings.
pub fn mean_logloss(model: &BaseModel, instances: &[Instance], batch_size: usize) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::validation("evaluation data", "is empty"));
    }
    let mut total = 0.0;
    for chunk in instances.chunks(batch_size.max(1)) {
        let refs: Vec<&Instance> = chunk.iter().collect();
        let p = model.predict_lookup(&refs)?;
        for (pi, inst) in p.iter().zip(chunk) {
            total += crate::autodiff::bce_value(*pi, inst.label_f64())?;
        }
    }
    Ok(total / instances.len() as f64)
}
