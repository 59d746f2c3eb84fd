use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FieldGroup, FieldKind, Schema};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Cat(u32),
    Tokens(Vec<u32>),
}

impl FieldValue {
    pub fn indices(&self) -> &[u32] {
        match self {
            FieldValue::Cat(i) => std::slice::from_ref(i),
            FieldValue::Tokens(t) => t,
        }
    }

    pub fn map_indices(&self, f: impl Fn(u32) -> u32) -> FieldValue {
        match self {
            FieldValue::Cat(i) => FieldValue::Cat(f(*i)),
            FieldValue::Tokens(t) => FieldValue::Tokens(t.iter().map(|&i| f(i)).collect()),
        }
    }
}

/// One labelled example. `features` is aligned with the schema's fields;
/// the ad-ID field's entry holds the ad ID.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Instance {
    pub features: Vec<FieldValue>,
    pub label: u8,
}

impl Instance {
    pub fn ad_id(&self, schema: &Schema) -> u32 {
        match &self.features[schema.ad_id_field()] {
            FieldValue::Cat(i) => *i,
            FieldValue::Tokens(t) => t[0],
        }
    }

    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }

    /// Checks field count, field kinds, vocabulary closure and the label.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if self.features.len() != schema.len() {
            return Err(Error::shape("instance", &[self.features.len()], &[schema.len()]));
        }
        if self.label > 1 {
            return Err(Error::validation("label", format!("{} is not 0 or 1", self.label)));
        }
        for (spec, value) in schema.fields().iter().zip(&self.features) {
            match (spec.kind, value) {
                (FieldKind::Categorical, FieldValue::Cat(_)) | (FieldKind::TokenList, FieldValue::Tokens(_)) => {}
                _ => {
                    return Err(Error::validation(
                        format!("field `{}`", spec.name),
                        "value kind does not match schema",
                    ))
                }
            }
            if let Some(&bad) = value.indices().iter().find(|&&i| i as usize >= spec.vocab_size) {
                return Err(Error::index(
                    format!("vocabulary of `{}`", spec.name),
                    bad as usize,
                    spec.vocab_size,
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: Schema,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(schema: Schema, instances: Vec<Instance>) -> Result<Self> {
        for inst in &instances {
            inst.validate(&schema)?;
        }
        Ok(Dataset { schema, instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.instances.is_empty() {
            return 0.0;
        }
        self.instances.iter().map(|i| f64::from(i.label)).sum::<f64>() / self.instances.len() as f64
    }
}

/// Per-field flags recording which vocabulary entries occur in `instances`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeenVocab {
    seen: Vec<Vec<bool>>,
}

impl SeenVocab {
    pub fn from_instances<'a>(schema: &Schema, instances: impl IntoIterator<Item = &'a Instance>) -> Self {
        let mut seen: Vec<Vec<bool>> = schema.fields().iter().map(|f| vec![false; f.vocab_size]).collect();
        for inst in instances {
            for (f, v) in inst.features.iter().enumerate() {
                for &i in v.indices() {
                    seen[f][i as usize] = true;
                }
            }
        }
        SeenVocab { seen }
    }

    pub fn contains(&self, field: usize, index: u32) -> bool {
        self.seen[field].get(index as usize).copied().unwrap_or(false)
    }

    /// Maps indices of ad-feature fields that were never seen to the
    /// reserved index 0.
    pub fn remap_ad_features(&self, schema: &Schema, inst: &Instance) -> Instance {
        let features = inst
            .features
            .iter()
            .enumerate()
            .map(|(f, v)| {
                if schema.field(f).group == FieldGroup::AdFeature {
                    v.map_indices(|i| if self.contains(f, i) { i } else { 0 })
                } else {
                    v.clone()
                }
            })
            .collect();
        Instance {
            features,
            label: inst.label,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FieldSpec;

    fn schema() -> Schema {
        Schema::new(vec![
            FieldSpec::new("ad", FieldKind::Categorical, 5, FieldGroup::AdId),
            FieldSpec::new("title", FieldKind::TokenList, 6, FieldGroup::AdFeature),
            FieldSpec::new("user", FieldKind::Categorical, 3, FieldGroup::OtherFeature),
        ])
        .unwrap()
    }

    #[test]
    fn validate_checks_vocab_and_kind() {
        let s = schema();
        let ok = Instance {
            features: vec![FieldValue::Cat(4), FieldValue::Tokens(vec![1, 5]), FieldValue::Cat(2)],
            label: 1,
        };
        ok.validate(&s).unwrap();
        assert_eq!(ok.ad_id(&s), 4);
        let mut oov = ok.clone();
        oov.features[1] = FieldValue::Tokens(vec![6]);
        assert!(matches!(oov.validate(&s), Err(Error::Index { .. })));
        let mut kind = ok.clone();
        kind.features[2] = FieldValue::Tokens(vec![]);
        assert!(kind.validate(&s).is_err());
        let mut label = ok;
        label.label = 2;
        assert!(label.validate(&s).is_err());
    }

    #[test]
    fn unseen_ad_features_map_to_zero() {
        let s = schema();
        let old = Instance {
            features: vec![FieldValue::Cat(1), FieldValue::Tokens(vec![2]), FieldValue::Cat(1)],
            label: 0,
        };
        let seen = SeenVocab::from_instances(&s, [&old]);
        let new = Instance {
            features: vec![FieldValue::Cat(3), FieldValue::Tokens(vec![2, 4]), FieldValue::Cat(2)],
            label: 1,
        };
        let r = seen.remap_ad_features(&s, &new);
        assert_eq!(r.features[1], FieldValue::Tokens(vec![2, 0]));
        assert_eq!(r.features[0], FieldValue::Cat(3));
        assert_eq!(r.features[2], FieldValue::Cat(2));
    }
}
