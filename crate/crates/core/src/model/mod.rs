//! The six base CTR models over a shared feature-embedding layer.

mod base;
mod encode;
mod fields;
mod train;

pub use base::{BaseModel, Bound, ModelConfig, Variant};
pub use encode::EncodedBatch;
pub use fields::{FieldGroup, FieldKind, FieldSpec, Schema};
pub use train::{mean_logloss, pretrain, TrainConfig, TrainTrace};
