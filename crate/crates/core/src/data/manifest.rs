use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::instance::Instance;
use super::split::{carve_with_order, AdGroup, Split, SplitCounts, SplitSpec, WarmupCarve};
use crate::error::{Error, Result};
use crate::model::Schema;

/// Which bucket every ad went to and, for new ads, the carve permutation.
/// Re-applying it to the same instances reproduces the split exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub counts: SplitCounts,
    pub old: Vec<u32>,
    pub new: Vec<u32>,
    pub discarded: Vec<u32>,
    /// New-ad ID to the carve order over that ad's instances.
    pub carves: BTreeMap<u32, Vec<usize>>,
}

impl SplitManifest {
    pub fn new(spec: SplitSpec, split: &Split, carves: &[WarmupCarve]) -> Self {
        let ids = |gs: &[AdGroup]| gs.iter().map(|g| g.ad_id).collect();
        SplitManifest {
            spec,
            counts: split.counts(),
            old: ids(&split.old),
            new: ids(&split.new),
            discarded: ids(&split.discarded),
            carves: carves.iter().map(|c| (c.ad_id, c.order.clone())).collect(),
        }
    }

    /// Rebuilds the split and carves from the original instances.
    pub fn apply(&self, schema: &Schema, instances: Vec<Instance>) -> Result<(Split, Vec<WarmupCarve>)> {
        let mut groups: BTreeMap<u32, Vec<Instance>> = BTreeMap::new();
        for inst in instances {
            groups.entry(inst.ad_id(schema)).or_default().push(inst);
        }
        let mut bucket: HashMap<u32, u8> = HashMap::new();
        for (b, ids) in [&self.old, &self.new, &self.discarded].into_iter().enumerate() {
            for &id in ids {
                if bucket.insert(id, b as u8).is_some() {
                    return Err(Error::validation("manifest", format!("ad {id} listed twice")));
                }
            }
        }
        let mut split = Split::default();
        for (ad_id, instances) in groups {
            let group = AdGroup { ad_id, instances };
            match bucket.remove(&ad_id) {
                Some(0) => split.old.push(group),
                Some(1) => split.new.push(group),
                Some(_) => split.discarded.push(group),
                None => return Err(Error::validation("manifest", format!("ad {ad_id} is not listed"))),
            }
        }
        if let Some(id) = bucket.keys().next() {
            return Err(Error::validation("manifest", format!("ad {id} has no instances")));
        }
        if split.counts() != self.counts {
            return Err(Error::validation(
                "manifest",
                "bucket sizes differ from the recorded counts",
            ));
        }
        let carves = split
            .new
            .iter()
            .map(|g| {
                let order = self
                    .carves
                    .get(&g.ad_id)
                    .ok_or_else(|| Error::validation("manifest", format!("no carve for new ad {}", g.ad_id)))?;
                carve_with_order(g, self.spec.k, order.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((split, carves))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}
