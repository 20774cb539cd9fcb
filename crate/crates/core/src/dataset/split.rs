// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded train/val/test partitions.
//!
//! Sizes are computed per group as `floor(n * fraction)`; the remaining
//! triples go one at a time to train, val, test, cycling in that order.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FactSet, FactTriple, TripleKey};
use crate::error::{Error, Result};
use crate::manifest::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Every relation is split independently.
    WithinRelation,
    /// Held-out relations form the test set; the rest is split into train
    /// and val at the ratio of the train and val fractions.
    AcrossRelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub strategy: SplitStrategy,
    pub fractions: (f64, f64, f64),
    pub seed: u64,
    #[serde(default)]
    pub held_out_relations: Vec<String>,
}

impl SplitSpec {
    pub fn within_relation(seed: u64) -> Self {
        Self {
            strategy: SplitStrategy::WithinRelation,
            fractions: (0.40, 0.10, 0.50),
            seed,
            held_out_relations: Vec::new(),
        }
    }

    pub fn across_relation(seed: u64, held_out: Vec<String>) -> Self {
        Self {
            strategy: SplitStrategy::AcrossRelation,
            held_out_relations: held_out,
            ..Self::within_relation(seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: FactSet,
    pub val: FactSet,
    pub test: FactSet,
}

/// JSON record of a split's membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub train: Vec<TripleKey>,
    pub val: Vec<TripleKey>,
    pub test: Vec<TripleKey>,
}

impl Split {
    pub fn manifest(&self, spec: &SplitSpec) -> SplitManifest {
        let keys = |s: &FactSet| s.triples().iter().map(FactTriple::key).collect();
        SplitManifest {
            spec: spec.clone(),
            train: keys(&self.train),
            val: keys(&self.val),
            test: keys(&self.test),
        }
    }
}

/// Sizes for `n` items under `fractions`, floor-then-distribute.
pub(crate) fn partition_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let mut sizes = fractions.map(|f| (n as f64 * f + 1e-9).floor() as usize);
    let mut i = 0;
    while sizes.iter().sum::<usize>() < n {
        sizes[i % 3] += 1;
        i += 1;
    }
    sizes
}

fn shuffled<'a>(mut group: Vec<&'a FactTriple>, seed: u64, label: &str) -> Vec<&'a FactTriple> {
    group.sort_by_key(|t| t.key());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
    group.shuffle(&mut rng);
    group
}

pub fn split(set: &FactSet, spec: &SplitSpec) -> Result<Split> {
    let (a, b, c) = spec.fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Spec(format!(
            "fractions ({a}, {b}, {c}) must be in [0, 1] and sum to 1"
        )));
    }
    let mut parts: [Vec<FactTriple>; 3] = Default::default();
    match spec.strategy {
        SplitStrategy::WithinRelation => {
            for relation in set.relations() {
                let group: Vec<&FactTriple> = set.of_relation(relation).collect();
                if group.len() < 3 {
                    return Err(Error::Spec(format!(
                        "relation `{relation}` has {} triples; within-relation split needs at least 3",
                        group.len()
                    )));
                }
                let sizes = partition_sizes(group.len(), [a, b, c]);
                let group = shuffled(group, spec.seed, &format!("split/{relation}"));
                let mut it = group.into_iter();
                for (part, size) in parts.iter_mut().zip(sizes) {
                    part.extend(it.by_ref().take(size).cloned());
                }
            }
        }
        SplitStrategy::AcrossRelation => {
            if spec.held_out_relations.is_empty() {
                return Err(Error::Spec("across-relation split needs held-out relations".into()));
            }
            let known: BTreeSet<&str> = set.relations().collect();
            for r in &spec.held_out_relations {
                if !known.contains(r.as_str()) {
                    return Err(Error::Spec(format!("held-out relation `{r}` not in dataset")));
                }
            }
            let held: BTreeSet<&str> = spec.held_out_relations.iter().map(String::as_str).collect();
            let seen: Vec<&FactTriple> = set
                .triples()
                .iter()
                .filter(|t| !held.contains(t.relation_id.as_str()))
                .collect();
            let denom = a + b;
            let fr = if denom > 0.0 { [a / denom, b / denom, 0.0] } else { [1.0, 0.0, 0.0] };
            let sizes = partition_sizes(seen.len(), fr);
            let seen = shuffled(seen, spec.seed, "split/across");
            let mut it = seen.into_iter();
            parts[0].extend(it.by_ref().take(sizes[0]).cloned());
            parts[1].extend(it.cloned());
            parts[2].extend(
                set.triples()
                    .iter()
                    .filter(|t| held.contains(t.relation_id.as_str()))
                    .cloned(),
            );
        }
    }
    let [train, val, test] = parts;
    Ok(Split {
        train: FactSet::new(train)?,
        val: FactSet::new(val)?,
        test: FactSet::new(test)?,
    })
}
