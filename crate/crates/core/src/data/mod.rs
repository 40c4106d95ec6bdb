//! Image records, the five-way dataset split, and mini-batching.

mod directory;
mod synthetic;

pub use directory::{export_directory, load_directory_dataset, write_png};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    /// `(C, H, W)` with values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Cohort (person) the image belongs to.
    pub identity: u64,
}

impl ImageRecord {
    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.label.hash(&mut h);
        self.identity.hash(&mut h);
        self.image.shape().hash(&mut h);
        for v in self.image.data() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Forget,
    Retain,
    Test,
    Unseen,
}

impl Split {
    /// Tag used in `labels.csv`.
    pub fn tag(self) -> &'static str {
        match self {
            Split::Forget => "train_forget",
            Split::Retain => "train_retain",
            Split::Test => "test",
            Split::Unseen => "unseen",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [Split::Forget, Split::Retain, Split::Test, Split::Unseen]
            .into_iter()
            .find(|s| s.tag() == tag)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Train / test / forget / retain / unseen splits.
///
/// `train` is exactly `forget ∪ retain` (as a multiset); forget, retain and
/// unseen identities are pairwise disjoint; no test record occurs in train.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub num_classes: usize,
    pub image_shape: [usize; 3],
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub forget: Vec<ImageRecord>,
    pub retain: Vec<ImageRecord>,
    pub unseen: Vec<ImageRecord>,
}

impl DatasetBundle {
    /// Builds a bundle from split-tagged records (train keeps input order)
    /// and validates it.
    pub fn assemble(
        num_classes: usize,
        image_shape: [usize; 3],
        tagged: impl IntoIterator<Item = (Split, ImageRecord)>,
    ) -> Result<Self> {
        let mut b = DatasetBundle {
            num_classes,
            image_shape,
            train: Vec::new(),
            test: Vec::new(),
            forget: Vec::new(),
            retain: Vec::new(),
            unseen: Vec::new(),
        };
        for (split, r) in tagged {
            match split {
                Split::Forget | Split::Retain => b.train.push(r.clone()),
                _ => {}
            }
            b.split_mut(split).push(r);
        }
        b.validate()?;
        Ok(b)
    }

    pub fn split(&self, split: Split) -> &[ImageRecord] {
        match split {
            Split::Forget => &self.forget,
            Split::Retain => &self.retain,
            Split::Test => &self.test,
            Split::Unseen => &self.unseen,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<ImageRecord> {
        match split {
            Split::Forget => &mut self.forget,
            Split::Retain => &mut self.retain,
            Split::Test => &mut self.test,
            Split::Unseen => &mut self.unseen,
        }
    }

    pub fn identities(&self, split: Split) -> BTreeSet<u64> {
        self.split(split).iter().map(|r| r.identity).collect()
    }

    /// SHA-256 over class count, shape and every record of every split, in order.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend((self.num_classes as u64).to_le_bytes());
        for d in self.image_shape {
            bytes.extend((d as u64).to_le_bytes());
        }
        for split in [Split::Forget, Split::Retain, Split::Test, Split::Unseen] {
            let recs = self.split(split);
            bytes.extend((recs.len() as u64).to_le_bytes());
            for r in recs {
                bytes.extend((r.label as u64).to_le_bytes());
                bytes.extend(r.identity.to_le_bytes());
                for v in r.image.data() {
                    bytes.extend(v.to_le_bytes());
                }
            }
        }
        crate::checksum::sha256_hex(&bytes)
    }

    /// Re-checks every bundle invariant.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::contract("bundle needs at least 2 classes"));
        }
        for split in [Split::Forget, Split::Retain, Split::Test, Split::Unseen] {
            for (i, r) in self.split(split).iter().enumerate() {
                if r.image.shape() != self.image_shape {
                    return Err(Error::contract(format!(
                        "{split} record {i} has shape {:?}, expected {:?}",
                        r.image.shape(),
                        self.image_shape
                    )));
                }
                if r.label >= self.num_classes {
                    return Err(Error::contract(format!(
                        "{split} record {i} has label {} >= {}",
                        r.label, self.num_classes
                    )));
                }
                if !r.image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
                    return Err(Error::contract(format!(
                        "{split} record {i} has pixels outside [0, 1]"
                    )));
                }
            }
        }

        let mut counts: HashMap<u64, i64> = HashMap::new();
        for r in &self.train {
            *counts.entry(r.fingerprint()).or_default() += 1;
        }
        for r in self.forget.iter().chain(&self.retain) {
            *counts.entry(r.fingerprint()).or_default() -= 1;
        }
        if counts.values().any(|&c| c != 0) {
            return Err(Error::contract("train is not exactly forget ∪ retain"));
        }
        if let Some(i) = self
            .test
            .iter()
            .position(|r| counts.contains_key(&r.fingerprint()))
        {
            return Err(Error::contract(format!("test record {i} also occurs in train")));
        }

        let pairs = [
            (Split::Forget, Split::Retain),
            (Split::Forget, Split::Unseen),
            (Split::Retain, Split::Unseen),
        ];
        for (a, b) in pairs {
            let ia = self.identities(a);
            if let Some(id) = self.split(b).iter().map(|r| r.identity).find(|id| ia.contains(id)) {
                return Err(Error::contract(format!("identity {id} appears in both {a} and {b}")));
            }
        }
        Ok(())
    }
}

/// One mini-batch: stacked images `(B, C, H, W)`, labels, and the positions
/// of the rows in the source slice.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

pub struct BatchIter<'a> {
    records: &'a [ImageRecord],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let images = Tensor::stack(indices.iter().map(|&i| &self.records[i].image))
            .expect("records share one shape");
        let labels = indices.iter().map(|&i| self.records[i].label).collect();
        Some(Batch {
            images,
            labels,
            indices,
        })
    }
}

/// One pass over `records` in batches of `batch_size` (the last batch may be
/// short). With a seed the order is a seeded permutation; without one it is
/// the input order.
pub fn batch_iterator(
    records: &[ImageRecord],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<BatchIter<'_>> {
    if records.is_empty() {
        return Err(Error::contract("cannot batch an empty record set"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    if let Some(s) = shuffle_seed {
        order.shuffle(&mut seed::rng(s));
    }
    Ok(BatchIter {
        records,
        order,
        batch_size,
        pos: 0,
    })
}

/// Stacks records into a batch tensor plus labels, in order.
pub fn stack_records(records: &[ImageRecord]) -> Result<(Tensor, Vec<usize>)> {
    let images = Tensor::stack(records.iter().map(|r| &r.image))?;
    Ok((images, records.iter().map(|r| r.label).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn rec(v: f32, label: usize, identity: u64) -> ImageRecord {
        ImageRecord {
            image: Tensor::filled(&[1, 2, 2], v),
            label,
            identity,
        }
    }

    #[test]
    fn batches_of_4_4_2() {
        let records: Vec<_> = (0..10).map(|i| rec(i as f32 / 10.0, 0, 0)).collect();
        let sizes: Vec<usize> = batch_iterator(&records, 4, Some(3))
            .unwrap()
            .map(|b| b.labels.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn seeded_order_is_reproducible_and_a_permutation() {
        let records: Vec<_> = (0..10).map(|i| rec(i as f32 / 10.0, 0, 0)).collect();
        let order = |s| -> Vec<usize> {
            batch_iterator(&records, 3, Some(s)).unwrap().flat_map(|b| b.indices).collect()
        };
        assert_eq!(order(5), order(5));
        assert_ne!(order(5), order(6));
        let mut sorted = order(5);
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let plain: Vec<usize> = batch_iterator(&records, 3, None).unwrap().flat_map(|b| b.indices).collect();
        assert_eq!(plain, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn empty_records_rejected() {
        assert!(matches!(batch_iterator(&[], 4, None), Err(Error::Contract(_))));
    }

    #[test]
    fn assemble_enforces_invariants() {
        let ok = DatasetBundle::assemble(
            2,
            [1, 2, 2],
            vec![
                (Split::Forget, rec(0.1, 0, 1)),
                (Split::Retain, rec(0.2, 1, 2)),
                (Split::Test, rec(0.3, 1, 3)),
                (Split::Unseen, rec(0.4, 0, 4)),
            ],
        )
        .unwrap();
        assert_eq!(ok.train.len(), 2);

        let shared_identity = DatasetBundle::assemble(
            2,
            [1, 2, 2],
            vec![(Split::Forget, rec(0.1, 0, 1)), (Split::Unseen, rec(0.4, 0, 1))],
        );
        assert!(shared_identity.is_err());

        let test_in_train = DatasetBundle::assemble(
            2,
            [1, 2, 2],
            vec![(Split::Retain, rec(0.1, 0, 1)), (Split::Test, rec(0.1, 0, 1))],
        );
        assert!(test_in_train.is_err());

        let mut broken = ok.clone();
        broken.train.pop();
        assert!(broken.validate().is_err());
    }
}
