#![allow(dead_code)]

use metaemb::data::{synth_generate, AdGroup, SynthConfig};
use metaemb::{BaseModel, Dataset, Instance, ModelConfig, Variant};

/// A small synthetic dataset: `ads` ads with `per_ad` samples each.
pub fn tiny_data(ads: usize, per_ad: usize, seed: u64) -> Dataset {
    let cfg = SynthConfig {
        ad_vocab: 6,
        user_vocab: 6,
        ..SynthConfig::new(ads, per_ad, 2, 2, seed)
    };
    synth_generate(&cfg).unwrap().0
}

/// A model with embeddings large enough that gradients are well above the
/// relative-error floor.
pub fn tiny_model(variant: Variant, data: &Dataset, dim: usize, seed: u64) -> BaseModel {
    let config = ModelConfig {
        init_std: 0.5,
        ..ModelConfig::new(variant, dim, seed).with_hidden(vec![6, 4])
    };
    BaseModel::build(config, data.schema.clone()).unwrap()
}

pub fn group_of(data: &Dataset, ad_id: u32) -> AdGroup {
    AdGroup {
        ad_id,
        instances: data
            .instances
            .iter()
            .filter(|i| i.ad_id(&data.schema) == ad_id)
            .cloned()
            .collect(),
    }
}

pub fn refs(xs: &[Instance]) -> Vec<&Instance> {
    xs.iter().collect()
}
