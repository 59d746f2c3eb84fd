//! Fixtures shared by the benchmarks.

use metaemb::data::{synth_generate, SynthConfig};
use metaemb::{BaseModel, Dataset, ModelConfig, Variant};

/// 40 ads with 100 impressions each.
pub fn dataset() -> Dataset {
    synth_generate(&SynthConfig::new(40, 100, 2, 2, 1))
        .expect("valid synthetic config")
        .0
}

pub fn model(variant: Variant, data: &Dataset) -> BaseModel {
    BaseModel::build(ModelConfig::new(variant, 16, 1), data.schema.clone()).expect("valid model config")
}
