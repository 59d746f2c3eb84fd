//! Embedding & MLP click-through-rate models.
//!
//! Every variant maps per-field embeddings to a click probability. The
//! ad-ID embedding is an explicit input of [`BaseModel::forward`], so the
//! same code scores looked-up rows of the ID table and generated
//! embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use super::encode::EncodedBatch;
use super::fields::Schema;
use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::data::Instance;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fm,
    #[serde(alias = "wide&deep", alias = "wide-deep")]
    WideDeep,
    Ipnn,
    Opnn,
    #[serde(alias = "pnn*", alias = "pnn-star")]
    PnnStar,
    #[serde(rename = "deepfm", alias = "deep_fm")]
    DeepFm,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Fm,
        Variant::WideDeep,
        Variant::Ipnn,
        Variant::Opnn,
        Variant::PnnStar,
        Variant::DeepFm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Fm => "fm",
            Variant::WideDeep => "wide_deep",
            Variant::Ipnn => "ipnn",
            Variant::Opnn => "opnn",
            Variant::PnnStar => "pnn_star",
            Variant::DeepFm => "deepfm",
        }
    }

    fn is_deep(self) -> bool {
        self != Variant::Fm
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase().replace(['-', '&'], "_"))
            .ok_or_else(|| Error::validation("model variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Embedding width `m`.
    pub dim: usize,
    pub hidden: Vec<usize>,
    /// Standard deviation of the normal init of embedding rows.
    pub init_std: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, dim: usize, seed: u64) -> Self {
        ModelConfig {
            variant,
            dim,
            hidden: vec![64, 32, 16],
            init_std: 0.01,
            seed,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Dense {
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct Mlp {
    hidden: Vec<Dense>,
    out: Dense,
}

#[derive(Clone, Debug, PartialEq)]
enum Head {
    Fm {
        linear: Dense,
    },
    WideDeep {
        bias: usize,
        deep: Mlp,
    },
    Pnn {
        inner: bool,
        outer: bool,
        deep: Mlp,
    },
    DeepFm {
        linear: Dense,
        hidden: Vec<Dense>,
        out: Dense,
    },
}

/// Parameters of one model bound to a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub tables: Vec<Var>,
    pub indicators: Vec<Option<Var>>,
    pub dense: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    config: ModelConfig,
    schema: Schema,
    tables: Vec<Parameter>,
    /// Wide & Deep only: per-field `[vocab, 1]` weights (none for the ad ID).
    indicators: Vec<Option<Parameter>>,
    dense: Vec<Parameter>,
    head: Head,
}

struct Init {
    rng: ChaCha8Rng,
    dense: Vec<Parameter>,
}

impl Init {
    fn glorot(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        self.push(name, vec![fan_in, fan_out], data)
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.push(name, vec![rows, cols], vec![0.0; rows * cols])
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) -> usize {
        let t = Tensor::new(shape, data).expect("init shapes are consistent");
        self.dense.push(Parameter::new(name, t));
        self.dense.len() - 1
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Dense {
        let w = self.glorot(format!("{prefix}.w"), fan_in, fan_out);
        let b = bias.then(|| self.zeros(format!("{prefix}.b"), 1, fan_out));
        Dense { w, b }
    }

    fn mlp(&mut self, prefix: &str, input: usize, hidden: &[usize]) -> Mlp {
        let mut width = input;
        let mut layers = Vec::with_capacity(hidden.len());
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(self.dense(&format!("{prefix}.{i}"), width, h, true));
            width = h;
        }
        let out = self.dense(&format!("{prefix}.out"), width, 1, true);
        Mlp { hidden: layers, out }
    }
}

/// Standard normal rows with row 0 (the reserved index) left at zero.
fn embedding_table(rng: &mut ChaCha8Rng, rows: usize, dim: usize, std: f64) -> Result<Tensor> {
    let mut data = vec![0.0; rows * dim];
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| Error::validation("init_std", e.to_string()))?;
        for v in data.iter_mut().skip(dim) {
            *v = normal.sample(rng);
        }
    }
    Tensor::new(vec![rows, dim], data)
}

impl BaseModel {
    pub fn build(config: ModelConfig, schema: Schema) -> Result<Self> {
        let m = config.dim;
        if m < 2 {
            return Err(Error::validation("embedding dim", format!("{m} < 2")));
        }
        if !(config.init_std >= 0.0) {
            return Err(Error::validation("init_std", "must be non-negative"));
        }
        if config.variant.is_deep() && (config.hidden.is_empty() || config.hidden.contains(&0)) {
            return Err(Error::validation(
                "hidden dims",
                format!("{} needs non-empty, non-zero hidden layers", config.variant),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tables = schema
            .fields()
            .iter()
            .map(|f| {
                Ok(Parameter::new(
                    format!("emb.{}", f.name),
                    embedding_table(&mut rng, f.vocab_size, m, config.init_std)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let with_wide = config.variant == Variant::WideDeep;
        let indicators = schema
            .fields()
            .iter()
            .enumerate()
            .map(|(i, f)| {
                (with_wide && i != schema.ad_id_field())
                    .then(|| Parameter::new(format!("wide.{}", f.name), Tensor::zeros(f.vocab_size, 1)))
            })
            .collect();

        let n_fields = schema.len();
        let flat = n_fields * m;
        let pairs = n_fields * (n_fields - 1) / 2;
        let mut init = Init { rng, dense: Vec::new() };
        let head = match config.variant {
            Variant::Fm => Head::Fm {
                linear: init.dense("fm.linear", flat, 1, true),
            },
            Variant::WideDeep => {
                let bias = init.zeros("wide.bias".into(), 1, 1);
                Head::WideDeep {
                    bias,
                    deep: init.mlp("deep", flat, &config.hidden),
                }
            }
            Variant::Ipnn | Variant::Opnn | Variant::PnnStar => {
                let inner = config.variant != Variant::Opnn;
                let outer = config.variant != Variant::Ipnn;
                let width = flat + if inner { pairs } else { 0 } + if outer { m * m } else { 0 };
                Head::Pnn {
                    inner,
                    outer,
                    deep: init.mlp("pnn", width, &config.hidden),
                }
            }
            Variant::DeepFm => {
                let linear = init.dense("fm.linear", flat, 1, false);
                let mut hidden = Vec::new();
                let mut width = flat;
                for (i, &h) in config.hidden.iter().enumerate() {
                    hidden.push(init.dense(&format!("deep.{i}"), width, h, true));
                    width = h;
                }
                let out = init.dense("deepfm.out", width + 2, 1, true);
                Head::DeepFm { linear, hidden, out }
            }
        };
        Ok(BaseModel {
            config,
            schema,
            tables,
            indicators,
            dense: init.dense,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    /// Embedding table of field `f`; the ad-ID field's table is `Φ`.
    pub fn table(&self, f: usize) -> &Parameter {
        &self.tables[f]
    }

    pub fn tables(&self) -> &[Parameter] {
        &self.tables
    }

    pub fn id_table(&self) -> &Parameter {
        &self.tables[self.schema.ad_id_field()]
    }

    /// Shared parameters `θ` (dense layers and wide weights).
    pub fn theta(&self) -> impl Iterator<Item = &Parameter> {
        self.dense.iter().chain(self.indicators.iter().flatten())
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.tables.iter().chain(self.theta())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.tables
            .iter_mut()
            .chain(self.dense.iter_mut())
            .chain(self.indicators.iter_mut().flatten())
    }

    pub(crate) fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params_mut().find(|p| p.name() == name)
    }

    /// Replaces the value of the parameter called `name`; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.param_mut(name)
            .ok_or_else(|| Error::validation("parameter", format!("no parameter named `{name}`")))?
            .set(value)
    }

    /// Marks every parameter frozen (or trainable again).
    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            p.set_trainable(!frozen);
        }
    }

    pub fn ad_embedding(&self, ad_id: u32) -> Result<Tensor> {
        self.id_table().tensor().row_tensor(ad_id as usize)
    }

    /// Overwrites row `ad_id` of `Φ`.
    pub fn set_ad_embedding(&mut self, ad_id: u32, row: &Tensor) -> Result<()> {
        let m = self.dim();
        if row.shape() != [1, m] {
            return Err(Error::shape("set_ad_embedding", row.shape(), &[1, m]));
        }
        let f = self.schema.ad_id_field();
        let n = self.tables[f].tensor().rows();
        if ad_id as usize >= n {
            return Err(Error::index("ad id", ad_id as usize, n));
        }
        self.tables[f]
            .tensor_mut()
            .row_slice_mut(ad_id as usize)
            .copy_from_slice(row.data());
        Ok(())
    }

    pub fn encode(&self, instances: &[&Instance]) -> Result<EncodedBatch> {
        EncodedBatch::new(&self.schema, instances, self.config.variant == Variant::WideDeep)
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        Ok(Bound {
            tables: self.tables.iter().map(|p| tape.param(p)).collect::<Result<_>>()?,
            indicators: self
                .indicators
                .iter()
                .map(|p| p.as_ref().map(|p| tape.param(p)).transpose())
                .collect::<Result<_>>()?,
            dense: self.dense.iter().map(|p| tape.param(p)).collect::<Result<_>>()?,
        })
    }

    /// Binds every parameter as a constant, whatever its trainable flag.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Bound> {
        let mut leaf = |p: &Parameter| tape.leaf_shared(p.shared(), false);
        Ok(Bound {
            tables: self.tables.iter().map(&mut leaf).collect::<Result<_>>()?,
            indicators: self
                .indicators
                .iter()
                .map(|p| p.as_ref().map(&mut leaf).transpose())
                .collect::<Result<_>>()?,
            dense: self.dense.iter().map(&mut leaf).collect::<Result<_>>()?,
        })
    }

    /// Per-field embeddings for the batch; the ad-ID slot is `phi` when
    /// given, else the looked-up rows of `Φ`.
    pub fn field_embeddings(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &EncodedBatch,
        phi: Option<Var>,
    ) -> Result<Vec<Var>> {
        let id = self.schema.ad_id_field();
        let m = self.dim();
        (0..self.schema.len())
            .map(|f| match phi {
                Some(phi) if f == id => {
                    let shape = tape.shape(phi);
                    if shape != [batch.rows, m] {
                        return Err(Error::shape("ad embedding", shape, &[batch.rows, m]));
                    }
                    Ok(phi)
                }
                _ => tape.gather_rows(bound.tables[f], batch.fields[f].clone()),
            })
            .collect()
    }

    /// Click probabilities `[B, 1]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &EncodedBatch, phi: Option<Var>) -> Result<Var> {
        let embs = self.field_embeddings(tape, bound, batch, phi)?;
        let logit = self.logit(tape, bound, batch, &embs)?;
        tape.sigmoid(logit)
    }

    fn logit(&self, tape: &mut Tape, bound: &Bound, batch: &EncodedBatch, embs: &[Var]) -> Result<Var> {
        let flat = tape.concat(embs)?;
        let dense = |d: &Dense, tape: &mut Tape, x: Var| tape.affine(x, bound.dense[d.w], d.b.map(|b| bound.dense[b]));
        let mlp = |m: &Mlp, tape: &mut Tape, mut x: Var| {
            for layer in &m.hidden {
                let z = dense(layer, tape, x)?;
                x = tape.relu(z)?;
            }
            dense(&m.out, tape, x)
        };
        match &self.head {
            Head::Fm { linear } => {
                let lin = dense(linear, tape, flat)?;
                let pairs = fm_pairwise(tape, embs)?;
                tape.add(lin, pairs)
            }
            Head::WideDeep { bias, deep } => {
                let mut wide = tape.broadcast_rows(bound.dense[*bias], batch.rows)?;
                for (sel, w) in batch.indicators.iter().zip(&bound.indicators) {
                    if let (Some(sel), Some(w)) = (sel, w) {
                        let part = tape.gather_rows(*w, sel.clone())?;
                        wide = tape.add(wide, part)?;
                    }
                }
                let deep = mlp(deep, tape, flat)?;
                tape.add(wide, deep)
            }
            Head::Pnn { inner, outer, deep } => {
                let mut parts = vec![flat];
                if *inner {
                    parts.push(inner_products(tape, embs)?);
                }
                if *outer {
                    parts.push(pooled_outer_product(tape, embs)?);
                }
                let x = tape.concat(&parts)?;
                mlp(deep, tape, x)
            }
            Head::DeepFm { linear, hidden, out } => {
                let lin = dense(linear, tape, flat)?;
                let pairs = fm_pairwise(tape, embs)?;
                let mut h = flat;
                for layer in hidden {
                    let z = dense(layer, tape, h)?;
                    h = tape.relu(z)?;
                }
                let x = tape.concat(&[lin, pairs, h])?;
                dense(out, tape, x)
            }
        }
    }

    /// Per-field embedding vectors of one instance, each `[1, m]`.
    pub fn embed_fields(&self, instance: &Instance) -> Result<Vec<Tensor>> {
        let batch = self.encode(&[instance])?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape)?;
        let embs = self.field_embeddings(&mut tape, &bound, &batch, None)?;
        Ok(embs.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Probability for one instance with ad embedding `phi` (`[1, m]`).
    pub fn predict(&self, phi: &Tensor, instance: &Instance) -> Result<f64> {
        Ok(self.predict_batch(phi, &[instance])?[0])
    }

    /// Probabilities for instances of a single ad sharing embedding `phi`.
    pub fn predict_batch(&self, phi: &Tensor, instances: &[&Instance]) -> Result<Vec<f64>> {
        if !phi.is_finite() {
            return Err(Error::validation("ad embedding", "non-finite value"));
        }
        let batch = self.encode(instances)?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape)?;
        let phi = tape.constant(phi.clone())?;
        let phi = tape.broadcast_rows(phi, batch.rows)?;
        let p = self.forward(&mut tape, &bound, &batch, Some(phi))?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Probabilities using each instance's own row of `Φ`.
    pub fn predict_lookup(&self, instances: &[&Instance]) -> Result<Vec<f64>> {
        let batch = self.encode(instances)?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape)?;
        let p = self.forward(&mut tape, &bound, &batch, None)?;
        Ok(tape.value(p).data().to_vec())
    }
}

/// `sum_{f<g} <e_f, e_g>` per row via `(|sum e|^2 - sum |e|^2) / 2`.
fn fm_pairwise(tape: &mut Tape, embs: &[Var]) -> Result<Var> {
    let mut sum = embs[0];
    let mut sq = tape.row_dot(embs[0], embs[0])?;
    for &e in &embs[1..] {
        sum = tape.add(sum, e)?;
        let s = tape.row_dot(e, e)?;
        sq = tape.add(sq, s)?;
    }
    let total = tape.row_dot(sum, sum)?;
    let diff = tape.sub(total, sq)?;
    tape.scale(diff, 0.5)
}

/// All pairwise inner products, one column per field pair.
fn inner_products(tape: &mut Tape, embs: &[Var]) -> Result<Var> {
    let mut cols = Vec::new();
    for f in 0..embs.len() {
        for g in f + 1..embs.len() {
            cols.push(tape.row_dot(embs[f], embs[g])?);
        }
    }
    tape.concat(&cols)
}

/// Flattened outer product `s s^T` of the summed field embeddings.
fn pooled_outer_product(tape: &mut Tape, embs: &[Var]) -> Result<Var> {
    let mut s = embs[0];
    for &e in &embs[1..] {
        s = tape.add(s, e)?;
    }
    let m = tape.value(s).cols();
    let blocks = (0..m)
        .map(|i| {
            let c = tape.slice_cols(s, i, 1)?;
            let c = tape.broadcast_cols(c, m)?;
            tape.mul(c, s)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&blocks)
}
