//! Synthetic CTR data with a known generating model.
//!
//! Each ad draws one category per ad-feature field; each impression draws
//! one category per user field. The click probability is
//! `sigmoid(bias + sum beta[u] + sum gamma[v] + tau_ad)`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::instance::{Dataset, FieldValue, Instance};
use crate::error::{Error, Result};
use crate::model::{FieldGroup, FieldKind, FieldSpec, Schema};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tier {
    pub ads: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Groups of ads sharing a sample count, generated in order.
    pub tiers: Vec<Tier>,
    pub n_ad_features: usize,
    pub n_user_features: usize,
    /// Categories per ad-feature field (index 0 stays reserved).
    pub ad_vocab: usize,
    /// Distinct categories each ad draws per ad-feature field. Above 1 the
    /// fields become token lists and a field contributes the mean of its
    /// tokens' weights.
    pub ad_tokens: usize,
    pub user_vocab: usize,
    pub beta_scale: f64,
    pub gamma_scale: f64,
    pub tau_scale: f64,
    pub bias: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tiers: vec![Tier { ads: 100, samples: 100 }],
            n_ad_features: 2,
            n_user_features: 2,
            ad_vocab: 10,
            ad_tokens: 1,
            user_vocab: 10,
            beta_scale: 1.0,
            gamma_scale: 0.5,
            tau_scale: 0.1,
            bias: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn new(n_ads: usize, samples_per_ad: usize, n_ad_features: usize, n_user_features: usize, seed: u64) -> Self {
        SynthConfig {
            tiers: vec![Tier {
                ads: n_ads,
                samples: samples_per_ad,
            }],
            n_ad_features,
            n_user_features,
            seed,
            ..SynthConfig::default()
        }
    }

    /// `old_ads` ads with `old_samples` impressions each followed by
    /// `new_ads` with `new_samples`.
    pub fn cold_start(old_ads: usize, old_samples: usize, new_ads: usize, new_samples: usize, seed: u64) -> Self {
        SynthConfig {
            tiers: vec![
                Tier {
                    ads: old_ads,
                    samples: old_samples,
                },
                Tier {
                    ads: new_ads,
                    samples: new_samples,
                },
            ],
            seed,
            ..SynthConfig::default()
        }
    }

    pub fn n_ads(&self) -> usize {
        self.tiers.iter().map(|t| t.ads).sum()
    }
}

/// The generating parameters, for oracle checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// `beta[f][c]` for ad-feature field `f`, category `c`.
    pub beta: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    /// Per-ad offset, indexed by ad ID.
    pub tau: Vec<f64>,
    /// Per-ad categories of each ad-feature field, indexed by ad ID.
    pub ad_features: Vec<Vec<Vec<u32>>>,
    pub bias: f64,
}

impl SynthTruth {
    pub fn logit(&self, ad_id: u32, user: &[u32]) -> f64 {
        let a = ad_id as usize;
        let ad: f64 = self.ad_features[a]
            .iter()
            .zip(&self.beta)
            .map(|(cs, b)| cs.iter().map(|&c| b[c as usize]).sum::<f64>() / cs.len().max(1) as f64)
            .sum();
        let us: f64 = user.iter().zip(&self.gamma).map(|(&c, g)| g[c as usize]).sum();
        self.bias + ad + us + self.tau[a]
    }
}

fn normal_table(rng: &mut ChaCha8Rng, fields: usize, vocab: usize, scale: f64) -> Result<Vec<Vec<f64>>> {
    let dist = Normal::new(0.0, scale).map_err(|e| Error::validation("synthetic scale", e.to_string()))?;
    Ok((0..fields)
        .map(|_| {
            let mut row: Vec<f64> = (0..=vocab).map(|_| dist.sample(rng)).collect();
            row[0] = 0.0;
            row
        })
        .collect())
}

pub fn synth_generate(config: &SynthConfig) -> Result<(Dataset, SynthTruth)> {
    let n_ads = config.n_ads();
    if n_ads == 0 || config.tiers.iter().any(|t| t.samples == 0) {
        return Err(Error::validation(
            "synthetic config",
            "ad and sample counts must be positive",
        ));
    }
    if config.n_ad_features == 0 || config.n_user_features == 0 || config.ad_vocab == 0 || config.user_vocab == 0 {
        return Err(Error::validation(
            "synthetic config",
            "field and vocabulary counts must be positive",
        ));
    }
    if config.ad_tokens == 0 || config.ad_tokens > config.ad_vocab {
        return Err(Error::validation(
            "synthetic config",
            format!("ad_tokens = {} must lie in 1..={}", config.ad_tokens, config.ad_vocab),
        ));
    }
    for (name, s) in [
        ("beta", config.beta_scale),
        ("gamma", config.gamma_scale),
        ("tau", config.tau_scale),
    ] {
        if !(s >= 0.0) {
            return Err(Error::validation(
                "synthetic config",
                format!("{name}_scale must be non-negative"),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let beta = normal_table(&mut rng, config.n_ad_features, config.ad_vocab, config.beta_scale)?;
    let gamma = normal_table(&mut rng, config.n_user_features, config.user_vocab, config.gamma_scale)?;
    let tau_dist = Normal::new(0.0, config.tau_scale).map_err(|e| Error::validation("tau_scale", e.to_string()))?;
    // ad IDs start at 1; slot 0 is the reserved index
    let mut tau = vec![0.0];
    let mut ad_features = vec![vec![vec![0]; config.n_ad_features]];
    for _ in 0..n_ads {
        tau.push(tau_dist.sample(&mut rng));
        ad_features.push(
            (0..config.n_ad_features)
                .map(|_| {
                    if config.ad_tokens == 1 {
                        vec![rng.random_range(1..=config.ad_vocab as u32)]
                    } else {
                        let mut t: Vec<u32> = index::sample(&mut rng, config.ad_vocab, config.ad_tokens)
                            .into_iter()
                            .map(|i| i as u32 + 1)
                            .collect();
                        t.sort_unstable();
                        t
                    }
                })
                .collect(),
        );
    }
    let truth = SynthTruth {
        beta,
        gamma,
        tau,
        ad_features,
        bias: config.bias,
    };

    let mut instances = Vec::new();
    let mut ad = 0u32;
    for tier in &config.tiers {
        for _ in 0..tier.ads {
            ad += 1;
            for _ in 0..tier.samples {
                let user: Vec<u32> = (0..config.n_user_features)
                    .map(|_| rng.random_range(1..=config.user_vocab as u32))
                    .collect();
                let p = 1.0 / (1.0 + (-truth.logit(ad, &user)).exp());
                let label = u8::from(rng.random::<f64>() < p);
                let mut features = vec![FieldValue::Cat(ad)];
                features.extend(truth.ad_features[ad as usize].iter().map(|cs| match config.ad_tokens {
                    1 => FieldValue::Cat(cs[0]),
                    _ => FieldValue::Tokens(cs.clone()),
                }));
                features.extend(user.into_iter().map(FieldValue::Cat));
                instances.push(Instance { features, label });
            }
        }
    }

    let mut fields = vec![FieldSpec::new(
        "ad_id",
        FieldKind::Categorical,
        n_ads + 1,
        FieldGroup::AdId,
    )];
    for f in 0..config.n_ad_features {
        let kind = if config.ad_tokens == 1 {
            FieldKind::Categorical
        } else {
            FieldKind::TokenList
        };
        fields.push(FieldSpec::new(
            format!("ad_f{f}"),
            kind,
            config.ad_vocab + 1,
            FieldGroup::AdFeature,
        ));
    }
    for g in 0..config.n_user_features {
        fields.push(FieldSpec::new(
            format!("user_f{g}"),
            FieldKind::Categorical,
            config.user_vocab + 1,
            FieldGroup::OtherFeature,
        ));
    }
    Ok((Dataset::new(Schema::new(fields)?, instances)?, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_signal_is_balanced() {
        let cfg = SynthConfig {
            beta_scale: 0.0,
            gamma_scale: 0.0,
            tau_scale: 0.0,
            ..SynthConfig::new(100, 1000, 2, 2, 3)
        };
        let (d, _) = synth_generate(&cfg).unwrap();
        assert_eq!(d.len(), 100_000);
        assert!((d.positive_rate() - 0.5).abs() < 0.01, "{}", d.positive_rate());
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::new(20, 30, 2, 3, 9);
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        let other = SynthConfig { seed: 10, ..cfg };
        assert_ne!(
            synth_generate(&other).unwrap().0,
            synth_generate(&SynthConfig::new(20, 30, 2, 3, 9)).unwrap().0
        );
    }

    #[test]
    fn rejects_zero_counts() {
        assert!(synth_generate(&SynthConfig::new(0, 10, 1, 1, 0)).is_err());
        assert!(synth_generate(&SynthConfig::new(3, 0, 1, 1, 0)).is_err());
    }
}
