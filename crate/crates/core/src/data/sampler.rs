//! Concept-sharing partner sampling.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::{Dataset, Split};
use crate::rng::keyed_rng;

/// A training target with an attribute-sharing and an object-sharing
/// partner, as record indices into the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSample {
    pub target: usize,
    pub attr_partner: usize,
    pub obj_partner: usize,
}

#[derive(Clone, Debug)]
pub struct PairSampler {
    by_attr: HashMap<usize, Vec<usize>>,
    by_obj: HashMap<usize, Vec<usize>>,
    train: Vec<usize>,
    attrs: Vec<usize>,
    objs: Vec<usize>,
}

impl PairSampler {
    pub fn new(dataset: &Dataset) -> Self {
        let mut by_attr: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut by_obj: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut train = Vec::new();
        for (i, r) in dataset.split_records(Split::Train) {
            by_attr.entry(r.attr).or_default().push(i);
            by_obj.entry(r.obj).or_default().push(i);
            train.push(i);
        }
        let attrs = dataset.records.iter().map(|r| r.attr).collect();
        let objs = dataset.records.iter().map(|r| r.obj).collect();
        PairSampler {
            by_attr,
            by_obj,
            train,
            attrs,
            objs,
        }
    }

    /// Record indices of the training split, in manifest order.
    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    /// Draws partners for record `target`. Partners come from the training
    /// split; candidates whose other concept differs from the target's are
    /// preferred, then same-composition images, then the target itself.
    /// The draw is a pure function of `(seed, epoch, target)`.
    pub fn sample(&self, target: usize, epoch: u64, seed: u64) -> PairSample {
        let mut rng = keyed_rng(seed, "pair", &[epoch, target as u64]);
        let (attr, obj) = (self.attrs[target], self.objs[target]);
        let empty = Vec::new();

        let pick =
            |pool: &[usize], differs: &dyn Fn(usize) -> bool, rng: &mut rand_chacha::ChaCha8Rng| {
                let preferred: Vec<usize> = pool
                    .iter()
                    .copied()
                    .filter(|&i| i != target && differs(i))
                    .collect();
                if let Some(&i) = preferred.choose(rng) {
                    return i;
                }
                let fallback: Vec<usize> = pool.iter().copied().filter(|&i| i != target).collect();
                fallback.choose(rng).copied().unwrap_or(target)
            };

        let attr_pool = self.by_attr.get(&attr).unwrap_or(&empty);
        let attr_partner = pick(attr_pool, &|i| self.objs[i] != obj, &mut rng);
        let obj_pool = self.by_obj.get(&obj).unwrap_or(&empty);
        let obj_partner = pick(obj_pool, &|i| self.attrs[i] != attr, &mut rng);
        PairSample {
            target,
            attr_partner,
            obj_partner,
        }
    }

    /// Eligible attribute partners of `target` under the preference rule.
    pub fn attr_candidates(&self, target: usize) -> Vec<usize> {
        let (attr, obj) = (self.attrs[target], self.objs[target]);
        let pool = self.by_attr.get(&attr).cloned().unwrap_or_default();
        let preferred: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&i| i != target && self.objs[i] != obj)
            .collect();
        if !preferred.is_empty() {
            return preferred;
        }
        let rest: Vec<usize> = pool.into_iter().filter(|&i| i != target).collect();
        if rest.is_empty() {
            vec![target]
        } else {
            rest
        }
    }
}
