use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Identity-balanced batches: `p` identities with `k` samples each.
#[derive(Clone, Debug)]
pub struct PkSampler {
    pub p: usize,
    pub k: usize,
    by_id: Vec<(usize, Vec<usize>)>,
}

impl PkSampler {
    pub fn new(labels: &[usize], p: usize, k: usize) -> Result<Self> {
        if p < 2 || k < 2 {
            return Err(Error::Invalid(format!("PK sampling needs p >= 2 and k >= 2, got p={p} k={k}")));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        if let Some((&id, _)) = groups.iter().find(|(_, v)| v.len() < 2) {
            return Err(Error::Mining {
                identity: id,
                missing: "positive",
            });
        }
        if groups.len() < p {
            return Err(Error::Invalid(format!(
                "batch.p = {p} exceeds the {} identities available",
                groups.len()
            )));
        }
        Ok(Self {
            p,
            k,
            by_id: groups.into_iter().collect(),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.by_id.len() / self.p
    }

    /// One epoch of batches. Identities with fewer than `k` samples are drawn
    /// with replacement.
    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.by_id.len()).collect();
        order.shuffle(rng);
        order
            .chunks_exact(self.p)
            .map(|ids| {
                let mut batch = Vec::with_capacity(self.p * self.k);
                for &g in ids {
                    let pool = &self.by_id[g].1;
                    if pool.len() >= self.k {
                        batch.extend(pool.choose_multiple(rng, self.k).cloned());
                    } else {
                        batch.extend((0..self.k).map(|_| *pool.choose(rng).unwrap()));
                    }
                }
                batch
            })
            .collect()
    }
}
