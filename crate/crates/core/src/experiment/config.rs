use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::meta::MetaConfig;
use crate::model::{TrainConfig, Variant};

/// Environment variable naming the root that relative dataset paths are
/// resolved against.
pub const DATA_DIR_ENV: &str = "METAEMB_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SynthConfig),
    /// Directory holding `ratings.dat`, `movies.dat` and `users.dat`.
    Movielens {
        dir: PathBuf,
    },
    /// CSV with a JSON schema sidecar.
    Csv {
        path: PathBuf,
        schema: PathBuf,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SynthConfig::cold_start(150, 400, 50, 120, 0))
    }
}

impl DatasetSpec {
    pub fn label(&self) -> String {
        match self {
            DatasetSpec::Synthetic(_) => "synthetic".into(),
            DatasetSpec::Movielens { .. } => "movielens-1m".into(),
            DatasetSpec::Csv { path, .. } => path
                .file_stem()
                .map_or("csv".into(), |s| s.to_string_lossy().into_owned()),
        }
    }

    /// Resolves relative paths against `$METAEMB_DATA_DIR` (or leaves them
    /// relative to the working directory when it is unset).
    pub fn resolved(&self) -> DatasetSpec {
        let root = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        let fix = |p: &Path| match &root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p.to_path_buf(),
        };
        match self {
            DatasetSpec::Synthetic(c) => DatasetSpec::Synthetic(c.clone()),
            DatasetSpec::Movielens { dir } => DatasetSpec::Movielens { dir: fix(dir) },
            DatasetSpec::Csv { path, schema } => DatasetSpec::Csv {
                path: fix(path),
                schema: fix(schema),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// The untrained normal-initialized row; the 0% anchor.
    Random,
    Meta,
}

impl InitPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            InitPolicy::Random => "random",
            InitPolicy::Meta => "meta",
        }
    }
}

impl fmt::Display for InitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitPolicy::Random),
            "meta" => Ok(InitPolicy::Meta),
            _ => Err(Error::validation("init policy", format!("unknown policy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset label in reports; defaults to one derived from the dataset.
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub models: Vec<Variant>,
    pub dim: usize,
    pub hidden: Vec<usize>,
    /// Standard deviation of the normal embedding init, including the
    /// random-policy rows of new ads.
    pub init_std: f64,
    pub pretrain: TrainConfig,
    pub meta: MetaConfig,
    /// Warm-up step size; the meta inner step size when unset.
    pub warmup_lr: Option<f64>,
    pub policies: Vec<InitPolicy>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    /// Single-threaded execution.
    pub deterministic: bool,
    /// Also render the percentage curves as SVG.
    pub svg: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: None,
            dataset: DatasetSpec::default(),
            split: SplitSpec::default(),
            models: vec![Variant::DeepFm],
            dim: 16,
            hidden: vec![64, 32, 16],
            init_std: 0.01,
            pretrain: TrainConfig::default(),
            meta: MetaConfig::default(),
            warmup_lr: None,
            policies: vec![InitPolicy::Random, InitPolicy::Meta],
            seeds: vec![1, 2, 3],
            output_dir: None,
            deterministic: false,
            svg: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn dataset_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.dataset.label())
    }

    pub fn warmup_lr(&self) -> f64 {
        self.warmup_lr.unwrap_or(self.meta.inner_lr)
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the JSON
    /// form (`meta.alpha`, `dataset.dir`); values parse as JSON when they
    /// can and are taken as strings otherwise. A comma-separated value for
    /// a list key becomes a list (`models=deepfm,ipnn`).
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(&self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::validation("override", format!("`{item}` is not key=value")))?;
            let key = key.trim_start_matches("--");
            let path: Vec<&str> = key.split('.').collect();
            let mut slot = &mut root;
            for part in &path {
                let obj = slot
                    .as_object_mut()
                    .ok_or_else(|| Error::validation("override", format!("`{key}` does not name a config key")))?;
                if !obj.contains_key(*part) && !(obj.contains_key("kind") && path.len() > 1) {
                    return Err(Error::validation("override", format!("unknown config key `{key}`")));
                }
                slot = obj.entry(part.to_string()).or_insert(Value::Null);
            }
            let parse = |s: &str| serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()));
            *slot = match (&*slot, serde_json::from_str::<Value>(raw)) {
                (_, Ok(v)) if !(slot.is_array() && !v.is_array()) => v,
                (Value::Array(_), _) => Value::Array(raw.split(',').filter(|s| !s.is_empty()).map(parse).collect()),
                _ => Value::String(raw.to_string()),
            };
        }
        serde_json::from_value(root).map_err(|e| Error::validation("config", e.to_string()))
    }

    /// Checks everything that can be checked before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, why: String| Err(Error::validation(format!("config {what}"), why));
        if self.seeds.is_empty() {
            return bad("seeds", "must not be empty".into());
        }
        if self.models.is_empty() {
            return bad("models", "must not be empty".into());
        }
        if self.policies.is_empty() {
            return bad("policies", "must not be empty".into());
        }
        if !self.policies.contains(&InitPolicy::Random) {
            return bad(
                "policies",
                "must include `random`, the anchor of all percentages".into(),
            );
        }
        if self.dim < 2 {
            return bad("dim", format!("{} < 2", self.dim));
        }
        let lr = self.warmup_lr();
        if !(lr >= 0.0) || !lr.is_finite() {
            return bad("warmup_lr", format!("{lr} must be non-negative"));
        }
        self.split.validate()?;
        self.meta.validate()?;
        if self.meta.k != self.split.k {
            return bad(
                "meta.k",
                format!("{} differs from split.k = {}", self.meta.k, self.split.k),
            );
        }
        match self.dataset.resolved() {
            DatasetSpec::Synthetic(_) => {}
            DatasetSpec::Movielens { dir } => {
                for f in [
                    crate::data::movielens::RATINGS_FILE,
                    crate::data::movielens::MOVIES_FILE,
                    crate::data::movielens::USERS_FILE,
                ] {
                    if !dir.join(f).is_file() {
                        return bad("dataset", format!("{} does not exist", dir.join(f).display()));
                    }
                }
            }
            DatasetSpec::Csv { path, schema } => {
                for p in [path, schema] {
                    if !p.is_file() {
                        return bad("dataset", format!("{} does not exist", p.display()));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides() {
        let c = ExperimentConfig::default()
            .with_overrides(&[
                "--meta.alpha=0.5",
                "models=ipnn,fm",
                "seeds=[4]",
                "deterministic=true",
                "dim=8",
            ])
            .unwrap();
        assert_eq!(c.meta.alpha, 0.5);
        assert_eq!(c.models, vec![Variant::Ipnn, Variant::Fm]);
        assert_eq!(c.seeds, vec![4]);
        assert!(c.deterministic);
        assert_eq!(c.dim, 8);
        assert!(ExperimentConfig::default().with_overrides(&["nope=1"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["dim"]).is_err());
        let c = ExperimentConfig::default()
            .with_overrides(&["dataset={\"kind\":\"movielens\",\"dir\":\"ml\"}"])
            .unwrap();
        assert_eq!(c.dataset, DatasetSpec::Movielens { dir: "ml".into() });
        let c = c.with_overrides(&["dataset.dir=ml-1m"]).unwrap();
        assert_eq!(c.dataset, DatasetSpec::Movielens { dir: "ml-1m".into() });
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(ExperimentConfig::from_json("{\"bogus\": 1}").is_err());
        let c = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        assert!(c.validate().unwrap_err().is_validation());
        let c = ExperimentConfig {
            policies: vec![InitPolicy::Meta],
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            dataset: DatasetSpec::Movielens {
                dir: "/nonexistent/ml".into(),
            },
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
