use std::collections::BTreeSet;
use std::sync::Arc;

use crate::autodiff::SparseRows;
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::model::{FieldGroup, Schema};

/// Instances turned into per-field row selectors over the embedding tables.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub(crate) rows: usize,
    /// Per field: look-up (categorical) or average pooling (token list).
    pub(crate) fields: Vec<Arc<SparseRows>>,
    /// Per field: bag-of-tokens indicators capped at 1; `None` for the ad ID.
    pub(crate) indicators: Vec<Option<Arc<SparseRows>>>,
    pub(crate) labels: Vec<f64>,
    pub(crate) ad_ids: Vec<u32>,
}

impl EncodedBatch {
    pub fn new(schema: &Schema, instances: &[&Instance], with_indicators: bool) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::validation("batch", "is empty"));
        }
        for inst in instances {
            inst.validate(schema)?;
        }
        let mut fields = Vec::with_capacity(schema.len());
        let mut indicators = Vec::with_capacity(schema.len());
        for (f, spec) in schema.fields().iter().enumerate() {
            let lists: Vec<Vec<usize>> = instances
                .iter()
                .map(|i| i.features[f].indices().iter().map(|&x| x as usize).collect())
                .collect();
            let refs: Vec<&[usize]> = lists.iter().map(Vec::as_slice).collect();
            fields.push(Arc::new(SparseRows::average(&refs, spec.vocab_size)?));
            indicators.push(if with_indicators && spec.group != FieldGroup::AdId {
                let rows = lists.iter().map(|l| {
                    let distinct: BTreeSet<usize> = l.iter().copied().collect();
                    distinct.into_iter().map(|i| (i, 1.0)).collect()
                });
                Some(Arc::new(SparseRows::new(rows, spec.vocab_size)?))
            } else {
                None
            });
        }
        Ok(EncodedBatch {
            rows: instances.len(),
            fields,
            indicators,
            labels: instances.iter().map(|i| i.label_f64()).collect(),
            ad_ids: instances.iter().map(|i| i.ad_id(schema)).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn ad_ids(&self) -> &[u32] {
        &self.ad_ids
    }
}
