use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::model::BaseModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Average,
    Max,
    Concat,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Average => "average",
            Pooling::Max => "max",
            Pooling::Concat => "concat",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Pooling::Average, Pooling::Max, Pooling::Concat]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::validation("pooling", format!("unknown pooling `{s}`")))
    }
}

/// Maps an ad's features to an initial ID embedding:
/// `tanh(pool(e_1, ..., e_F) · W)`.
///
/// The feature embeddings `e_f` come from the base model's own ad-feature
/// tables, which are only read. `W` (`[pooled width, m]`, no bias) is the
/// only trainable part and carries an L2 penalty `l2 · |W|^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pooling: Pooling,
    fields: Vec<usize>,
    dim: usize,
    weight: Parameter,
    l2: f64,
}

impl Generator {
    /// Glorot-uniform `W` for the ad-feature fields of `model`.
    pub fn new(model: &BaseModel, pooling: Pooling, l2: f64, seed: u64) -> Result<Self> {
        let fields = model.schema().ad_feature_fields();
        if fields.is_empty() {
            return Err(Error::validation("generator", "the schema has no ad-feature fields"));
        }
        if !(l2 >= 0.0) {
            return Err(Error::validation("generator L2", format!("{l2} must be non-negative")));
        }
        let dim = model.dim();
        let width = match pooling {
            Pooling::Concat => fields.len() * dim,
            _ => dim,
        };
        let limit = (6.0 / (width + dim) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..width * dim).map(|_| rng.random_range(-limit..limit)).collect();
        Ok(Generator {
            pooling,
            fields,
            dim,
            weight: Parameter::new("generator.w", Tensor::new(vec![width, dim], data)?),
            l2,
        })
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &Parameter {
        &self.weight
    }

    pub(crate) fn weight_mut(&mut self) -> &mut Parameter {
        &mut self.weight
    }

    pub fn set_weight(&mut self, w: Tensor) -> Result<()> {
        self.weight.set(w)
    }

    /// Field vectors of `u` from the reused tables, pooled to `[1, width]`.
    pub fn pooled_features(&self, model: &BaseModel, ad: &Instance) -> Result<Tensor> {
        let schema = model.schema();
        if ad.features.len() != schema.len() {
            return Err(Error::shape("generator input", &[ad.features.len()], &[schema.len()]));
        }
        let m = self.dim;
        let vectors = self
            .fields
            .iter()
            .map(|&f| {
                let table = model.table(f).tensor();
                let idx = ad.features[f].indices();
                let mut v = vec![0.0; m];
                for &i in idx {
                    if i as usize >= table.rows() {
                        return Err(Error::index(
                            format!("vocabulary of `{}`", schema.field(f).name),
                            i as usize,
                            table.rows(),
                        ));
                    }
                    for (a, b) in v.iter_mut().zip(table.row_slice(i as usize)) {
                        *a += b;
                    }
                }
                let n = idx.len().max(1) as f64;
                v.iter_mut().for_each(|a| *a /= n);
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        let pooled = match self.pooling {
            Pooling::Average => {
                let n = vectors.len() as f64;
                (0..m).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n).collect()
            }
            Pooling::Max => (0..m)
                .map(|j| vectors.iter().map(|v| v[j]).fold(f64::NEG_INFINITY, f64::max))
                .collect(),
            Pooling::Concat => vectors.concat(),
        };
        Ok(Tensor::row(pooled))
    }

    /// Records `phi_init = tanh(x W)` on `tape`; returns `(W, phi_init)`.
    pub fn record(&self, tape: &mut Tape, model: &BaseModel, ad: &Instance) -> Result<(Var, Var)> {
        let x = tape.constant(self.pooled_features(model, ad)?)?;
        let w = tape.param(&self.weight)?;
        let z = tape.matmul(x, w)?;
        Ok((w, tape.tanh(z)?))
    }

    /// The generated initial embedding `[1, m]` for the ad of `ad`.
    pub fn generate_initial_embedding(&self, model: &BaseModel, ad: &Instance) -> Result<Tensor> {
        let x = self.pooled_features(model, ad)?;
        Ok(x.matmul(self.weight.tensor())?.map(f64::tanh))
    }
}
