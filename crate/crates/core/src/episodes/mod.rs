//! Datasets and episode sampling.
//!
//! A [`Dataset`] is a flat list of (tensor, class-id) items with a class
//! index on top. Episodes are N-way k-shot tasks drawn without replacement:
//! support and query items never overlap within an episode, and query rows
//! are stored class-grouped so labels are just row-block positions.

pub mod io;
pub mod synth;

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Which split a dataset plays in a run. Not stored in the on-disk
/// container; the loader tags everything [`Split::Train`] and callers retag
/// by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<T = f64> {
    items: Vec<(Tensor<T>, u32)>,
    /// Class id -> indices into `items`, ordered; iteration over classes is
    /// therefore deterministic.
    class_index: BTreeMap<u32, Vec<usize>>,
    split: Split,
}

impl<T: Scalar> Dataset<T> {
    /// Builds a dataset from items. Every item must share one shape, either
    /// [D] feature vectors or [H, W, C] images.
    pub fn new(items: Vec<(Tensor<T>, u32)>, split: Split) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("dataset has no items".into()));
        }
        let shape = items[0].0.shape().to_vec();
        if shape.len() != 1 && shape.len() != 3 {
            return Err(Error::ShapeExpectation {
                op: "Dataset::new",
                expected: "[D] features or [H, W, C] images".into(),
                got: shape,
            });
        }
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, (tensor, class)) in items.iter().enumerate() {
            if tensor.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "Dataset::new",
                    lhs: shape,
                    rhs: tensor.shape().to_vec(),
                });
            }
            class_index.entry(*class).or_default().push(i);
        }
        Ok(Dataset {
            items,
            class_index,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_index.len()
    }

    /// Class ids present, ascending.
    pub fn classes(&self) -> Vec<u32> {
        self.class_index.keys().copied().collect()
    }

    pub fn items_of(&self, class: u32) -> &[usize] {
        self.class_index
            .get(&class)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn item(&self, index: usize) -> (&Tensor<T>, u32) {
        let (tensor, class) = &self.items[index];
        (tensor, *class)
    }

    /// Shape of one item, e.g. [D] or [H, W, C].
    pub fn item_shape(&self) -> &[usize] {
        self.items[0].0.shape()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Draws an `n`-way episode with `k` support and `q` query items per
    /// class, all without replacement, so support and query sets are
    /// disjoint by construction.
    pub fn sample_episode(&self, n: usize, k: usize, q: usize, rng: &mut impl Rng) -> Result<Episode<T>> {
        if n < 2 || k < 1 || q < 1 {
            return Err(Error::InvalidArgument(format!(
                "episode needs n >= 2, k >= 1, q >= 1 (got n={n}, k={k}, q={q})"
            )));
        }
        let classes = self.classes();
        if classes.len() < n {
            return Err(Error::NotEnoughClasses {
                available: classes.len(),
                requested: n,
            });
        }
        let picked = rand::seq::index::sample(rng, classes.len(), n);
        let class_ids: Vec<u32> = picked.iter().map(|i| classes[i]).collect();

        let item_shape = self.item_shape().to_vec();
        let item_len: usize = item_shape.iter().product();
        let mut support = Vec::with_capacity(n * k * item_len);
        let mut query = Vec::with_capacity(n * q * item_len);
        let mut query_labels = Vec::with_capacity(n * q);

        for (label, &class) in class_ids.iter().enumerate() {
            let pool = self.items_of(class);
            if pool.len() < k + q {
                return Err(Error::NotEnoughItems {
                    class,
                    available: pool.len(),
                    requested: k + q,
                });
            }
            let chosen = rand::seq::index::sample(rng, pool.len(), k + q);
            for (pos, pi) in chosen.iter().enumerate() {
                let data = self.items[pool[pi]].0.data();
                if pos < k {
                    support.extend_from_slice(data);
                } else {
                    query.extend_from_slice(data);
                    query_labels.push(label);
                }
            }
        }

        let mut support_shape = vec![n, k];
        support_shape.extend_from_slice(&item_shape);
        let mut query_shape = vec![n * q];
        query_shape.extend_from_slice(&item_shape);
        Ok(Episode {
            class_ids,
            support: Tensor::from_vec(support_shape, support)?,
            query: Tensor::from_vec(query_shape, query)?,
            query_labels,
        })
    }

    /// Partitions classes into train/val/test by a seeded shuffle. With 20
    /// classes and the default 60/20/20 fractions this yields 12/4/4.
    pub fn split_by_class(&self, seed: u64) -> Result<(Dataset<T>, Dataset<T>, Dataset<T>)> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;

        let mut classes = self.classes();
        let c = classes.len();
        let n_train = c * 6 / 10;
        let n_val = c * 2 / 10;
        let n_test = c - n_train - n_val;
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot split {c} classes 60/20/20 with at least one class per split"
            )));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        classes.shuffle(&mut rng);

        let take = |ids: &[u32], split: Split| -> Result<Dataset<T>> {
            let wanted: std::collections::BTreeSet<u32> = ids.iter().copied().collect();
            let items: Vec<(Tensor<T>, u32)> = self
                .items
                .iter()
                .filter(|(_, class)| wanted.contains(class))
                .cloned()
                .collect();
            Dataset::new(items, split)
        };
        Ok((
            take(&classes[..n_train], Split::Train)?,
            take(&classes[n_train..n_train + n_val], Split::Val)?,
            take(&classes[n_train + n_val..], Split::Test)?,
        ))
    }
}

/// Errors if any class id appears in more than one of the given datasets.
pub fn check_disjoint_classes<T: Scalar>(datasets: &[&Dataset<T>]) -> Result<()> {
    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    for ds in datasets {
        for class in ds.classes() {
            *seen.entry(class).or_insert(0) += 1;
        }
    }
    let dupes: Vec<u32> = seen
        .into_iter()
        .filter_map(|(class, count)| (count > 1).then_some(class))
        .collect();
    if dupes.is_empty() {
        Ok(())
    } else {
        Err(Error::SplitsOverlap(dupes))
    }
}

/// One sampled N-way k-shot task with episode-local labels.
#[derive(Debug, Clone)]
pub struct Episode<T = f64> {
    /// Global class ids of the episode; position = episode-local label.
    pub class_ids: Vec<u32>,
    /// [n, k, D] or [n, k, H, W, C].
    pub support: Tensor<T>,
    /// [n*q, D] or [n*q, H, W, C], rows grouped by class.
    pub query: Tensor<T>,
    /// Episode-local label per query row, values in [0, n).
    pub query_labels: Vec<usize>,
}

impl<T: Scalar> Episode<T> {
    pub fn way(&self) -> usize {
        self.support.shape()[0]
    }

    pub fn shot(&self) -> usize {
        self.support.shape()[1]
    }

    pub fn query_count(&self) -> usize {
        self.query.shape()[0]
    }

    /// Support collapsed to a batch: [n*k, item...].
    pub fn support_flat(&self) -> Tensor<T> {
        let mut shape = vec![self.way() * self.shot()];
        shape.extend_from_slice(&self.support.shape()[2..]);
        self.support.reshaped(shape).expect("support reshape cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Dataset where item value encodes (class, index) so provenance of any
    /// sampled row can be recovered.
    fn tagged_dataset(classes: u32, per_class: usize) -> Dataset {
        let mut items = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                let v = c as f64 * 1000.0 + i as f64;
                items.push((Tensor::from_vec(vec![2], vec![v, -v]).unwrap(), c));
            }
        }
        Dataset::new(items, Split::Train).unwrap()
    }

    #[test]
    fn episode_shapes_and_label_grouping() {
        let ds = tagged_dataset(8, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ep = ds.sample_episode(5, 1, 15, &mut rng).unwrap();
        assert_eq!(ep.support.shape(), &[5, 1, 2]);
        assert_eq!(ep.query.shape(), &[75, 2]);
        assert_eq!(ep.query_labels.len(), 75);
        for (row, &label) in ep.query_labels.iter().enumerate() {
            assert_eq!(label, row / 15, "queries must be class-grouped");
        }

        let ep5 = ds.sample_episode(5, 5, 15, &mut rng).unwrap();
        assert_eq!(ep5.support.shape(), &[5, 5, 2]);
        assert_eq!(ep5.query.shape(), &[75, 2]);
    }

    #[test]
    fn support_and_query_never_share_items() {
        let ds = tagged_dataset(6, 25);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..200 {
            let ep = ds.sample_episode(5, 3, 10, &mut rng).unwrap();
            let mut support_tags = std::collections::BTreeSet::new();
            for row in 0..15 {
                support_tags.insert(ep.support.data()[row * 2].to_bits());
            }
            for row in 0..ep.query_count() {
                let tag = ep.query.data()[row * 2].to_bits();
                assert!(!support_tags.contains(&tag), "item sampled twice");
            }
        }
    }

    #[test]
    fn episode_rejects_oversized_requests() {
        let ds = tagged_dataset(4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match ds.sample_episode(5, 1, 5, &mut rng) {
            Err(Error::NotEnoughClasses { available: 4, requested: 5 }) => {}
            other => panic!("expected NotEnoughClasses, got {other:?}"),
        }
        match ds.sample_episode(3, 5, 6, &mut rng) {
            Err(Error::NotEnoughItems { available: 10, requested: 11, .. }) => {}
            other => panic!("expected NotEnoughItems, got {other:?}"),
        }
    }

    #[test]
    fn split_by_class_is_disjoint_and_covers() {
        let ds = tagged_dataset(20, 20);
        let (train, val, test) = ds.split_by_class(99).unwrap();
        assert_eq!(train.class_count(), 12);
        assert_eq!(val.class_count(), 4);
        assert_eq!(test.class_count(), 4);
        assert_eq!(train.split(), Split::Train);
        assert_eq!(val.split(), Split::Val);
        assert_eq!(test.split(), Split::Test);
        check_disjoint_classes(&[&train, &val, &test]).unwrap();
        assert_eq!(train.len() + val.len() + test.len(), ds.len());

        // Same seed, same partition.
        let (train2, _, _) = ds.split_by_class(99).unwrap();
        assert_eq!(train.classes(), train2.classes());
    }

    #[test]
    fn overlapping_splits_are_reported() {
        let a = tagged_dataset(5, 20);
        let b = tagged_dataset(7, 20);
        match check_disjoint_classes(&[&a, &b]) {
            Err(Error::SplitsOverlap(ids)) => assert_eq!(ids, vec![0, 1, 2, 3, 4]),
            other => panic!("expected SplitsOverlap, got {other:?}"),
        }
    }

    #[test]
    fn identical_seeds_give_identical_episodes() {
        let ds = tagged_dataset(10, 20);
        let ep1 = ds
            .sample_episode(5, 2, 5, &mut ChaCha8Rng::seed_from_u64(42))
            .unwrap();
        let ep2 = ds
            .sample_episode(5, 2, 5, &mut ChaCha8Rng::seed_from_u64(42))
            .unwrap();
        assert_eq!(ep1.support, ep2.support);
        assert_eq!(ep1.query, ep2.query);
        assert_eq!(ep1.class_ids, ep2.class_ids);
    }
}
