//! Dataset loading, vocabularies, old/new splitting and warm-up carving.

mod instance;
mod manifest;
pub mod movielens;
mod split;
mod synth;
pub mod tabular;
mod vocab;

pub use instance::{Dataset, FieldValue, Instance, SeenVocab};
pub use manifest::SplitManifest;
pub use movielens::{load_movielens, load_movielens_dir};
pub use split::{
    ad_seed, carve_warmup, carve_with_order, sample_meta_pair, split_old_new, AdGroup, Split, SplitCounts, SplitSpec,
    WarmupCarve,
};
pub use synth::{synth_generate, SynthConfig, SynthTruth, Tier};
pub use tabular::{load_csv, write_csv};
pub use vocab::Vocab;
