//! Generic CSV data with a JSON schema sidecar.
//!
//! The sidecar names the label column and lists every field with its kind
//! and group; `vocab_size` is optional and defaults to the largest index
//! seen plus one. Categorical cells hold one integer, token-list cells hold
//! space-separated integers (possibly none).

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::instance::{Dataset, FieldValue, Instance};
use crate::error::{Error, Result};
use crate::model::{FieldGroup, FieldKind, FieldSpec, Schema};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarField {
    pub name: String,
    pub kind: FieldKind,
    pub group: FieldGroup,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub label: String,
    pub fields: Vec<SidecarField>,
}

pub fn load_csv(csv_path: &Path, schema_path: &Path) -> Result<Dataset> {
    let sidecar: Sidecar = serde_json::from_reader(File::open(schema_path)?)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(csv_path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::validation("csv header", format!("missing column `{name}`")))
    };
    let label_col = col(&sidecar.label)?;
    let cols = sidecar
        .fields
        .iter()
        .map(|f| col(&f.name))
        .collect::<Result<Vec<_>>>()?;

    let mut max_seen = vec![0u32; sidecar.fields.len()];
    let mut instances = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        // header is line 1
        let line = row + 2;
        let err = |reason: String| Error::Parse {
            path: csv_path.to_path_buf(),
            line,
            reason,
        };
        let label = match record.get(label_col).map(str::trim) {
            Some("0") => 0,
            Some("1") => 1,
            other => return Err(err(format!("label `{}` is not 0 or 1", other.unwrap_or("")))),
        };
        let mut features = Vec::with_capacity(cols.len());
        for (f, (&c, spec)) in cols.iter().zip(&sidecar.fields).enumerate() {
            let cell = record.get(c).unwrap_or("").trim();
            let parse = |t: &str| {
                t.parse::<u32>()
                    .map_err(|_| err(format!("field `{}`: bad index `{t}`", spec.name)))
            };
            let value = match spec.kind {
                FieldKind::Categorical => FieldValue::Cat(parse(cell)?),
                FieldKind::TokenList => FieldValue::Tokens(cell.split_whitespace().map(parse).collect::<Result<_>>()?),
            };
            if let Some(&m) = value.indices().iter().max() {
                max_seen[f] = max_seen[f].max(m);
            }
            features.push(value);
        }
        instances.push(Instance { features, label });
    }

    let fields = sidecar
        .fields
        .iter()
        .zip(&max_seen)
        .map(|(f, &m)| FieldSpec::new(&f.name, f.kind, f.vocab_size.unwrap_or(m as usize + 1), f.group))
        .collect();
    Dataset::new(Schema::new(fields)?, instances)
}

/// Writes a dataset in the CSV + sidecar layout read by [`load_csv`].
pub fn write_csv(dataset: &Dataset, csv_path: &Path, schema_path: &Path) -> Result<()> {
    let sidecar = Sidecar {
        label: "label".into(),
        fields: dataset
            .schema
            .fields()
            .iter()
            .map(|f| SidecarField {
                name: f.name.clone(),
                kind: f.kind,
                group: f.group,
                vocab_size: Some(f.vocab_size),
            })
            .collect(),
    };
    serde_json::to_writer_pretty(File::create(schema_path)?, &sidecar)?;
    let mut w = csv::Writer::from_path(csv_path)?;
    let mut header: Vec<String> = dataset.schema.fields().iter().map(|f| f.name.clone()).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for inst in &dataset.instances {
        let mut rec: Vec<String> = inst
            .features
            .iter()
            .map(|v| v.indices().iter().map(u32::to_string).collect::<Vec<_>>().join(" "))
            .collect();
        rec.push(inst.label.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
