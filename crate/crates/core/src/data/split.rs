use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instance::Instance;
use crate::error::{Error, Result};
use crate::model::Schema;

/// Size thresholds for old/new ads and the warm-up minibatch size `K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Ads with strictly more samples than this are old.
    pub old_threshold: usize,
    /// New ads need strictly more samples than this.
    pub new_min: usize,
    pub k: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            old_threshold: 300,
            new_min: 80,
            k: 20,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::validation("split spec", "K must be positive"));
        }
        if self.new_min <= 3 * self.k {
            return Err(Error::validation(
                "split spec",
                format!("N_min = {} must exceed 3K = {}", self.new_min, 3 * self.k),
            ));
        }
        if self.old_threshold <= self.new_min {
            return Err(Error::validation(
                "split spec",
                format!("N = {} must exceed N_min = {}", self.old_threshold, self.new_min),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdGroup {
    pub ad_id: u32,
    pub instances: Vec<Instance>,
}

impl AdGroup {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub old: Vec<AdGroup>,
    pub new: Vec<AdGroup>,
    pub discarded: Vec<AdGroup>,
}

impl Split {
    pub fn old_instances(&self) -> impl Iterator<Item = &Instance> {
        self.old.iter().flat_map(|g| &g.instances)
    }

    pub fn counts(&self) -> SplitCounts {
        let sum = |gs: &[AdGroup]| gs.iter().map(AdGroup::len).sum();
        SplitCounts {
            old_ids: self.old.len(),
            old_samples: sum(&self.old),
            new_ids: self.new.len(),
            new_samples: sum(&self.new),
            discarded_ids: self.discarded.len(),
            discarded_samples: sum(&self.discarded),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub old_ids: usize,
    pub old_samples: usize,
    pub new_ids: usize,
    pub new_samples: usize,
    pub discarded_ids: usize,
    pub discarded_samples: usize,
}

/// Groups instances by ad and buckets the groups by size: `N_i > N` is old,
/// `N_min < N_i <= N` is new, everything else is discarded. Groups come out
/// in ascending ad-ID order with instances in input order.
pub fn split_old_new(schema: &Schema, instances: Vec<Instance>, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut groups: BTreeMap<u32, Vec<Instance>> = BTreeMap::new();
    for inst in instances {
        groups.entry(inst.ad_id(schema)).or_default().push(inst);
    }
    let mut split = Split::default();
    for (ad_id, instances) in groups {
        let n = instances.len();
        let group = AdGroup { ad_id, instances };
        if n > spec.old_threshold {
            split.old.push(group);
        } else if n > spec.new_min {
            split.new.push(group);
        } else {
            split.discarded.push(group);
        }
    }
    Ok(split)
}

/// Warm-up batches a, b, c of `K` instances each, plus the hold-out rest.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmupCarve {
    pub ad_id: u32,
    pub batch_a: Vec<Instance>,
    pub batch_b: Vec<Instance>,
    pub batch_c: Vec<Instance>,
    pub holdout: Vec<Instance>,
    /// Positions within the group, in carve order (a, b, c, hold-out).
    pub order: Vec<usize>,
}

impl WarmupCarve {
    pub fn batches(&self) -> [&[Instance]; 3] {
        [&self.batch_a, &self.batch_b, &self.batch_c]
    }
}

/// Seeded shuffle of the group; the first `3K` become batches a, b, c.
pub fn carve_warmup(group: &AdGroup, k: usize, seed: u64) -> Result<WarmupCarve> {
    let mut order: Vec<usize> = (0..group.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    carve_with_order(group, k, order)
}

/// Carves using an explicit permutation of the group's positions.
pub fn carve_with_order(group: &AdGroup, k: usize, order: Vec<usize>) -> Result<WarmupCarve> {
    if k == 0 || group.len() <= 3 * k {
        return Err(Error::validation(
            format!("ad {}", group.ad_id),
            format!("{} samples cannot fill 3 batches of {k} plus a hold-out", group.len()),
        ));
    }
    let mut sorted = order.clone();
    sorted.sort_unstable();
    if sorted != (0..group.len()).collect::<Vec<_>>() {
        return Err(Error::validation(
            format!("carve order of ad {}", group.ad_id),
            "not a permutation",
        ));
    }
    let take = |r: std::ops::Range<usize>| order[r].iter().map(|&i| group.instances[i].clone()).collect();
    Ok(WarmupCarve {
        ad_id: group.ad_id,
        batch_a: take(0..k),
        batch_b: take(k..2 * k),
        batch_c: take(2 * k..3 * k),
        holdout: take(3 * k..group.len()),
        order,
    })
}

/// Two disjoint batches of `K` drawn without replacement, or `None` when
/// the group has fewer than `2K` samples.
pub fn sample_meta_pair<'a, R: Rng + ?Sized>(
    group: &'a AdGroup,
    k: usize,
    rng: &mut R,
) -> Option<(Vec<&'a Instance>, Vec<&'a Instance>)> {
    if k == 0 || group.len() < 2 * k {
        return None;
    }
    let picks = index::sample(rng, group.len(), 2 * k).into_vec();
    let (a, b) = picks.split_at(k);
    let get = |ix: &[usize]| ix.iter().map(|&i| &group.instances[i]).collect();
    Some((get(a), get(b)))
}

/// Per-ad seed derived from a stage seed.
pub fn ad_seed(seed: u64, ad_id: u32) -> u64 {
    crate::seed::derive(seed, &format!("ad/{ad_id}"))
}
