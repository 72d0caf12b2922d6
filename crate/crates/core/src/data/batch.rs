use serde::{Deserialize, Serialize};

use super::DatasetBundle;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Shuffled mini-batches over a fixed pool of sample indices.
///
/// The pool is sorted on construction, so the batch sequence depends only on
/// the seed and the set of indices, never on the order they were listed in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchIterator {
    pool: Vec<usize>,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    epochs_started: u64,
    rng: Rng,
}

impl BatchIterator {
    pub fn new(mut pool: Vec<usize>, batch_size: usize, rng: Rng) -> Result<Self> {
        pool.sort_unstable();
        pool.dedup();
        if batch_size == 0 || batch_size > pool.len() {
            return Err(Error::Config(format!(
                "batch size {batch_size} must be in 1..={}",
                pool.len()
            )));
        }
        Ok(BatchIterator {
            pool,
            batch_size,
            order: Vec::new(),
            cursor: 0,
            epochs_started: 0,
            rng,
        })
    }

    /// Whether both iterators draw from the same indices in the same batch size.
    pub fn same_pool(&self, other: &Self) -> bool {
        self.pool == other.pool && self.batch_size == other.batch_size
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pool.len().div_ceil(self.batch_size)
    }

    pub fn epochs_started(&self) -> u64 {
        self.epochs_started
    }

    /// Reshuffles and rewinds.
    pub fn start_epoch(&mut self) {
        self.order = self.pool.clone();
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
        self.epochs_started += 1;
    }

    /// Next batch of the current epoch; `None` once it is exhausted. The last
    /// batch may be short.
    pub fn next_in_epoch(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(out)
    }

    /// Next batch, starting a new epoch whenever the current one runs out.
    pub fn next_cycling(&mut self) -> Vec<usize> {
        match self.next_in_epoch() {
            Some(b) => b,
            None => {
                self.start_epoch();
                self.next_in_epoch().expect("pool is nonempty")
            }
        }
    }
}

/// One materialized mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    pub indices: Vec<usize>,
    /// `[B × d]`
    pub x: Tensor<S>,
    pub y: Vec<i64>,
    /// `[B × k]`, the attribute row of each sample's class.
    pub a: Tensor<S>,
    /// Distinct labels of the batch, ascending.
    pub y_unique: Vec<i64>,
    /// `[N_c × k]`, aligned with `y_unique`.
    pub a_unique: Tensor<S>,
}

impl DatasetBundle {
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Batch<S> {
        let y = self.labels_of(indices);
        let mut y_unique = y.clone();
        y_unique.sort_unstable();
        y_unique.dedup();
        Batch {
            indices: indices.to_vec(),
            x: self.rows(indices),
            a: self.class_attributes(&y),
            a_unique: self.class_attributes(&y_unique),
            y,
            y_unique,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BundleParts;

    fn bundle(labels: Vec<i64>) -> DatasetBundle {
        let n = labels.len();
        DatasetBundle::new(BundleParts {
            features: Some(Tensor::matrix(n, 2, (0..2 * n).map(|v| v as f32).collect()).unwrap()),
            labels,
            attributes: Some(Tensor::matrix(7, 1, (0..7).map(|v| v as f32).collect()).unwrap()),
            seen_classes: vec![0, 1, 2, 3, 4, 5],
            unseen_classes: vec![6],
            train_seen_idx: (0..n as i64).collect(),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn repeated_labels_collapse() {
        let b = bundle(vec![3, 3, 5]).batch::<f32>(&[0, 1, 2]);
        assert_eq!(b.y_unique, vec![3, 5]);
        assert_eq!(b.a_unique.data(), &[3.0, 5.0]);
        assert_eq!(b.a.data(), &[3.0, 3.0, 5.0]);
        assert_eq!(b.x.shape(), &[3, 2]);
    }

    #[test]
    fn epoch_partitions_the_pool() {
        let mut it = BatchIterator::new((0..23).collect(), 5, Rng::new(1, "batches")).unwrap();
        for _ in 0..3 {
            it.start_epoch();
            let mut seen = Vec::new();
            let mut sizes = Vec::new();
            while let Some(b) = it.next_in_epoch() {
                sizes.push(b.len());
                seen.extend(b);
            }
            assert_eq!(sizes, vec![5, 5, 5, 5, 3]);
            seen.sort_unstable();
            assert_eq!(seen, (0..23).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sequence_depends_on_seed_not_listing_order() {
        let run = |pool: Vec<usize>, seed| {
            let mut it = BatchIterator::new(pool, 4, Rng::new(seed, "batches")).unwrap();
            (0..10).map(|_| it.next_cycling()).collect::<Vec<_>>()
        };
        let fwd: Vec<usize> = (0..13).collect();
        let rev: Vec<usize> = (0..13).rev().collect();
        assert_eq!(run(fwd.clone(), 5), run(rev, 5));
        assert_ne!(run(fwd.clone(), 5), run(fwd, 6));
    }

    #[test]
    fn oversized_batch_is_rejected() {
        assert!(BatchIterator::new(vec![1, 2], 3, Rng::new(0, "b")).is_err());
        assert!(BatchIterator::new(vec![1, 2], 0, Rng::new(0, "b")).is_err());
    }

    proptest::proptest! {
        #[test]
        fn unique_classes_never_exceed_batch(labels in proptest::collection::vec(0i64..6, 1..40), b in 1usize..40, seed in 0u64..50) {
            let b = b.min(labels.len());
            let bundle = bundle(labels);
            let mut it = BatchIterator::new(bundle.train_seen_idx().to_vec(), b, Rng::new(seed, "b")).unwrap();
            let batch: Batch<f32> = bundle.batch(&it.next_cycling());
            proptest::prop_assert!(batch.y_unique.len() <= batch.y.len());
            proptest::prop_assert!(batch.y_unique.windows(2).all(|w| w[0] < w[1]));
            proptest::prop_assert!(batch.y.iter().all(|y| batch.y_unique.contains(y)));
            proptest::prop_assert_eq!(batch.a_unique.rows(), batch.y_unique.len());
            let target: Tensor<f32> = crate::objectives::compatibility_matrix(&batch.y, &batch.y_unique).unwrap();
            for t in 0..target.rows() {
                proptest::prop_assert_eq!(target.row(t).iter().sum::<f32>(), 1.0);
            }
        }
    }
}
