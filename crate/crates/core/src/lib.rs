//! Meta-Embedding: learning initial ID embeddings for cold-start ads.
//!
//! The crate bundles a small reverse-mode autodiff engine that can
//! differentiate through a gradient step, six Embedding & MLP CTR models,
//! the meta-trained embedding generator, data loading and splitting, and the
//! cold-start / warm-up evaluation pipeline.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod seed;

pub use autodiff::{Parameter, Tape, Tensor, Var};
pub use data::{Dataset, FieldValue, Instance};
pub use error::{Error, Result};
pub use meta::{Generator, MetaConfig, Pooling};
pub use model::{BaseModel, FieldGroup, FieldKind, FieldSpec, ModelConfig, Schema, Variant};
