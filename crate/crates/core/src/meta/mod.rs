//! The embedding generator, its two-phase objective and training loop.

mod generator;
mod gradient;
mod train;
mod warmup;

pub use generator::{Generator, Pooling};
pub use gradient::{
    adapt_embedding, cold_loss, encode_ad_batch, meta_gradient, meta_gradient_explicit, meta_loss, meta_objective,
    MetaConfig, MetaGradient, SecondOrder,
};
pub use train::{train_meta, MetaStepTrace, MetaTrace, MetaTraceEntry};
pub use warmup::warmup_update;
