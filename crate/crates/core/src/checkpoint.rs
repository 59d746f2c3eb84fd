//! Versioned binary container for model and generator parameters.
//!
//! Layout: the 8-byte magic `MEMBCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! tensor's values as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Parameter, Tensor};
use crate::error::{Error, Result};
use crate::meta::{Generator, Pooling};
use crate::model::{BaseModel, ModelConfig, Schema};

pub const MAGIC: &[u8; 8] = b"MEMBCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    BaseModel {
        model: ModelConfig,
        schema: Schema,
        tensors: Vec<TensorEntry>,
    },
    Generator {
        pooling: Pooling,
        l2: f64,
        /// SHA-256 of the base-model checkpoint whose tables it reads.
        base_sha256: String,
        tensors: Vec<TensorEntry>,
    },
}

impl Header {
    fn tensors(&self) -> &[TensorEntry] {
        match self {
            Header::BaseModel { tensors, .. } | Header::Generator { tensors, .. } => tensors,
        }
    }
}

fn encode<'a>(
    header_of: impl FnOnce(Vec<TensorEntry>) -> Header,
    params: impl IntoIterator<Item = &'a Parameter>,
) -> Result<Vec<u8>> {
    let params: Vec<&Parameter> = params.into_iter().collect();
    let entries = params
        .iter()
        .map(|p| TensorEntry {
            name: p.name().to_string(),
            shape: p.tensor().shape().to_vec(),
            trainable: p.trainable(),
        })
        .collect();
    let header = serde_json::to_vec(&header_of(entries))?;
    let mut out = Vec::with_capacity(20 + header.len() + params.iter().map(|p| p.tensor().len() * 8).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in params {
        for v in p.tensor().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Header, Vec<Tensor>)> {
    let bad = |why: &str| Error::Checkpoint(why.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..)
        .filter(|b| b.len() >= len)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&body[..len])?;
    let mut data = body[len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let need: usize = header.tensors().iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if body.len() - len != need * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} data bytes, found {}",
            need * 8,
            body.len() - len
        )));
    }
    let tensors = header
        .tensors()
        .iter()
        .map(|t| Tensor::new(t.shape.clone(), data.by_ref().take(t.shape.iter().product()).collect()))
        .collect::<Result<_>>()?;
    Ok((header, tensors))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn model_to_bytes(model: &BaseModel) -> Result<Vec<u8>> {
    encode(
        |tensors| Header::BaseModel {
            model: model.config().clone(),
            schema: model.schema().clone(),
            tensors,
        },
        model.params(),
    )
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<BaseModel> {
    let (header, tensors) = decode(bytes)?;
    let Header::BaseModel {
        model: config,
        schema,
        tensors: entries,
    } = header
    else {
        return Err(Error::Checkpoint("expected a base-model checkpoint".into()));
    };
    let mut model = BaseModel::build(config, schema)?;
    if model.params().count() != entries.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            entries.len(),
            model.params().count()
        )));
    }
    for (entry, tensor) in entries.iter().zip(tensors) {
        let p = model
            .param_mut(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", entry.name)))?;
        p.set(tensor)?;
        p.set_trainable(entry.trainable);
    }
    Ok(model)
}

pub fn save_model(model: &BaseModel, path: &Path) -> Result<String> {
    let bytes = model_to_bytes(model)?;
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Loads a model checkpoint and returns it with the file's SHA-256.
pub fn load_model(path: &Path) -> Result<(BaseModel, String)> {
    let bytes = fs::read(path)?;
    Ok((model_from_bytes(&bytes)?, sha256_hex(&bytes)))
}

pub fn generator_to_bytes(generator: &Generator, base_sha256: &str) -> Result<Vec<u8>> {
    encode(
        |tensors| Header::Generator {
            pooling: generator.pooling(),
            l2: generator.l2(),
            base_sha256: base_sha256.to_string(),
            tensors,
        },
        [generator.weight()],
    )
}

/// Restores a generator over `model`; `base_sha256` must be the hash of the
/// checkpoint `model` was loaded from.
pub fn generator_from_bytes(bytes: &[u8], model: &BaseModel, base_sha256: &str) -> Result<Generator> {
    let (header, mut tensors) = decode(bytes)?;
    let Header::Generator {
        pooling,
        l2,
        base_sha256: want,
        ..
    } = header
    else {
        return Err(Error::Checkpoint("expected a generator checkpoint".into()));
    };
    if want != base_sha256 {
        return Err(Error::Checkpoint(format!(
            "generator was trained on base checkpoint {want}, not {base_sha256}"
        )));
    }
    let mut generator = Generator::new(model, pooling, l2, 0)?;
    let w = tensors
        .pop()
        .ok_or_else(|| Error::Checkpoint("missing generator weights".into()))?;
    generator.set_weight(w)?;
    Ok(generator)
}

pub fn save_generator(generator: &Generator, base_sha256: &str, path: &Path) -> Result<()> {
    fs::write(path, generator_to_bytes(generator, base_sha256)?)?;
    Ok(())
}

pub fn load_generator(path: &Path, model: &BaseModel, base_sha256: &str) -> Result<Generator> {
    generator_from_bytes(&fs::read(path)?, model, base_sha256)
}
