use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Categorical,
    TokenList,
}

/// Which part of the input a field belongs to: the ad identifier, the ad's
/// own attributes, or everything else (user, context).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldGroup {
    AdId,
    AdFeature,
    OtherFeature,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub vocab_size: usize,
    pub group: FieldGroup,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, kind: FieldKind, vocab_size: usize, group: FieldGroup) -> Self {
        FieldSpec {
            name: name.into(),
            kind,
            vocab_size,
            group,
        }
    }
}

/// Ordered field list. Exactly one categorical field is the ad ID.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FieldSpec>", into = "Vec<FieldSpec>")]
pub struct Schema {
    fields: Vec<FieldSpec>,
    ad_id: usize,
}

impl Schema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        let ids: Vec<usize> = fields
            .iter()
            .enumerate()
            .filter(|(_, f)| f.group == FieldGroup::AdId)
            .map(|(i, _)| i)
            .collect();
        let [ad_id] = ids[..] else {
            return Err(Error::validation(
                "schema",
                format!("expected exactly one ad_id field, found {}", ids.len()),
            ));
        };
        if fields[ad_id].kind != FieldKind::Categorical {
            return Err(Error::validation("schema", "the ad_id field must be categorical"));
        }
        if let Some(f) = fields.iter().find(|f| f.vocab_size == 0) {
            return Err(Error::validation(
                "schema",
                format!("field `{}` has an empty vocabulary", f.name),
            ));
        }
        let mut names: Vec<&str> = fields.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("schema", "duplicate field names"));
        }
        Ok(Schema { fields, ad_id })
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn field(&self, i: usize) -> &FieldSpec {
        &self.fields[i]
    }

    pub fn ad_id_field(&self) -> usize {
        self.ad_id
    }

    pub fn num_ads(&self) -> usize {
        self.fields[self.ad_id].vocab_size
    }

    pub fn indices_in(&self, group: FieldGroup) -> Vec<usize> {
        (0..self.fields.len())
            .filter(|&i| self.fields[i].group == group)
            .collect()
    }

    pub fn ad_feature_fields(&self) -> Vec<usize> {
        self.indices_in(FieldGroup::AdFeature)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }
}

impl TryFrom<Vec<FieldSpec>> for Schema {
    type Error = Error;

    fn try_from(fields: Vec<FieldSpec>) -> Result<Self> {
        Schema::new(fields)
    }
}

impl From<Schema> for Vec<FieldSpec> {
    fn from(s: Schema) -> Self {
        s.fields
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, group: FieldGroup) -> FieldSpec {
        FieldSpec::new(name, FieldKind::Categorical, 4, group)
    }

    #[test]
    fn requires_exactly_one_ad_id() {
        assert!(Schema::new(vec![spec("a", FieldGroup::AdFeature)]).is_err());
        assert!(Schema::new(vec![spec("a", FieldGroup::AdId), spec("b", FieldGroup::AdId)]).is_err());
        let s = Schema::new(vec![spec("u", FieldGroup::AdFeature), spec("id", FieldGroup::AdId)]).unwrap();
        assert_eq!(s.ad_id_field(), 1);
        assert_eq!(s.ad_feature_fields(), vec![0]);
    }

    #[test]
    fn serde_roundtrip_validates() {
        let s = Schema::new(vec![spec("id", FieldGroup::AdId), spec("v", FieldGroup::OtherFeature)]).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Schema>(&json).unwrap(), s);
        let bad = json.replace("ad_id", "ad_feature");
        assert!(serde_json::from_str::<Schema>(&bad).is_err());
    }
}
