use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generator::Generator;
use super::gradient::{meta_gradient, MetaConfig, MetaGradient};
use crate::autodiff::{sgd_step, Tensor};
use crate::data::{sample_meta_pair, AdGroup, Instance};
use crate::error::{Error, Result};
use crate::model::BaseModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTraceEntry {
    pub ad_id: u32,
    pub l_a: f64,
    pub l_b: f64,
    pub l_meta: f64,
    pub grad_norm: f64,
}

/// One outer step: entries in ascending ad-ID order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaStepTrace {
    pub epoch: usize,
    pub step: usize,
    pub entries: Vec<MetaTraceEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaTrace {
    pub steps: Vec<MetaStepTrace>,
    /// Old ads with fewer than `2K` samples.
    pub skipped: Vec<u32>,
    pub samples_consumed: usize,
}

impl MetaTrace {
    pub fn entries(&self) -> impl Iterator<Item = &MetaTraceEntry> {
        self.steps.iter().flat_map(|s| &s.entries)
    }

    /// Mean `l_meta` per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.steps.iter().map(|s| s.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let xs: Vec<f64> = self
                    .steps
                    .iter()
                    .filter(|s| s.epoch == e)
                    .flat_map(|s| s.entries.iter().map(|x| x.l_meta))
                    .collect();
                xs.iter().sum::<f64>() / xs.len().max(1) as f64
            })
            .collect()
    }
}

/// SGD on the generator weights over the old ads. The base model is only
/// read. Each epoch visits every eligible ad once, `ids_per_step` at a time
/// without replacement; per ad, two disjoint `K`-batches are drawn and the
/// per-ad gradients are summed in ascending ad-ID order before the update
/// `W -= outer_lr * sum`.
pub fn train_meta(
    model: &BaseModel,
    generator: &mut Generator,
    old: &[AdGroup],
    config: &MetaConfig,
) -> Result<MetaTrace> {
    config.validate()?;
    if (generator.l2() - config.l2).abs() > 0.0 {
        log::debug!(
            "generator L2 {} differs from config {}; using the generator's",
            generator.l2(),
            config.l2
        );
    }
    let mut trace = MetaTrace::default();
    let mut eligible: Vec<&AdGroup> = Vec::new();
    for g in old {
        if g.len() < 2 * config.k {
            log::warn!(
                "old ad {} has {} samples, fewer than 2K = {}; skipped",
                g.ad_id,
                g.len(),
                2 * config.k
            );
            trace.skipped.push(g.ad_id);
        } else {
            eligible.push(g);
        }
    }
    if eligible.is_empty() {
        return Err(Error::validation("meta-training", "no old ad has at least 2K samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order = eligible.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.ids_per_step) {
            let mut chunk = chunk.to_vec();
            chunk.sort_by_key(|g| g.ad_id);
            let pairs: Vec<(u32, Vec<&Instance>, Vec<&Instance>)> = chunk
                .iter()
                .map(|g| {
                    let (a, b) = sample_meta_pair(g, config.k, &mut rng).expect("eligible groups hold 2K samples");
                    (g.ad_id, a, b)
                })
                .collect();
            let run = |(_, a, b): &(u32, Vec<&Instance>, Vec<&Instance>)| meta_gradient(model, generator, a, b, config);
            let grads: Vec<MetaGradient> = if config.parallel {
                pairs.par_iter().map(run).collect::<Result<_>>()?
            } else {
                pairs.iter().map(run).collect::<Result<_>>()?
            };
            let w = generator.weight().tensor();
            let mut total = Tensor::zeros(w.rows(), w.cols());
            for g in &grads {
                total.axpy(1.0, &g.grad)?;
            }
            if config.outer_lr > 0.0 {
                sgd_step(&mut [generator.weight_mut()], &[total], config.outer_lr)?;
            }
            trace.samples_consumed += pairs.len() * 2 * config.k;
            trace.steps.push(MetaStepTrace {
                epoch,
                step,
                entries: pairs
                    .iter()
                    .zip(&grads)
                    .map(|((ad_id, _, _), g)| MetaTraceEntry {
                        ad_id: *ad_id,
                        l_a: g.l_a,
                        l_b: g.l_b,
                        l_meta: g.l_meta,
                        grad_norm: g.grad_norm,
                    })
                    .collect(),
            });
            step += 1;
        }
        log::info!(
            "meta epoch {}: mean l_meta {:.5}",
            epoch + 1,
            trace.epoch_means().last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(trace)
}
