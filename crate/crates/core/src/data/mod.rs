//! Datasets, train/test splitting, partitioning across clients and batching.

mod pgm;
mod synth;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, TAG_EPOCH, TAG_PARTITION, TAG_SPLIT};
use crate::tensor::{Scalar, Tensor};

pub use pgm::{load_image_dir, parse_pgm, read_pgm, write_pgm, Pgm};
pub use synth::{synth_dataset, SynthParams};

/// Side length of every image.
pub const IMAGE_SIDE: usize = 64;
pub const IMAGE_LEN: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Grayscale 64×64 images in `[0, 1]` with binary labels. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    /// `images` holds one flat 64×64 image per label.
    pub fn new(images: Vec<Vec<f32>>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Invalid(format!("{} images but {} labels", images.len(), labels.len())));
        }
        let mut pixels = Vec::with_capacity(images.len() * IMAGE_LEN);
        for (i, (img, &label)) in images.iter().zip(&labels).enumerate() {
            if img.len() != IMAGE_LEN {
                return Err(Error::Invalid(format!("image {i} has {} pixels, expected {IMAGE_LEN}", img.len())));
            }
            if label > 1 {
                return Err(Error::Invalid(format!("image {i} has label {label}, expected 0 or 1")));
            }
            if let Some(v) = img.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Invalid(format!("image {i} has pixel {v} outside [0, 1]")));
            }
            pixels.extend_from_slice(img);
        }
        Ok(Dataset { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.pixels[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// `(negatives, positives)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (self.len() - pos, pos)
    }

    /// Images `[n, 1, 64, 64]` and labels `[n, 1]` for the given indices.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Invalid(format!("sample index {bad} out of range for {} samples", self.len())));
        }
        let mut x = Vec::with_capacity(indices.len() * IMAGE_LEN);
        for &i in indices {
            x.extend(self.image(i).iter().map(|&v| T::from_f64(v as f64)));
        }
        let y = indices.iter().map(|&i| T::from_f64(self.labels[i] as f64)).collect();
        Ok((
            Tensor::new(vec![indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE], x)?,
            Tensor::new(vec![indices.len(), 1], y)?,
        ))
    }
}

/// Held-out evaluation split: `(train, test)` index lists, both ascending.
///
/// Each class contributes `round(test_fraction · class_size)` test samples,
/// chosen by a seeded shuffle of that class.
pub fn train_test_split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config("test_fraction", "must be in [0, 1)"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..=1u8 {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.label(i) == class).collect();
        members.shuffle(&mut seeded(derive_seed(seed, &[TAG_SPLIT, class as u64])));
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Apportions `total` items to `weights` by largest remainder. Floors first,
/// then hands out the leftovers by descending fractional part; fractional
/// parts within 1e-9 of each other count as tied and go to the lower index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    let frac = |i: usize| exact[i] - exact[i].floor();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (frac(a), frac(b));
        if (fa - fb).abs() <= 1e-9 {
            a.cmp(&b)
        } else {
            fb.total_cmp(&fa)
        }
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// How training samples are divided among clients.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    ratios: Vec<f64>,
    pub seed: u64,
}

impl PartitionPlan {
    /// Ratios need not be normalized but must be positive and finite.
    pub fn new(ratios: Vec<f64>, seed: u64) -> Result<Self> {
        if ratios.is_empty() {
            return Err(Error::config("ratios", "at least one client is required"));
        }
        if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::config("ratios", format!("ratios must be positive, got {ratios:?}")));
        }
        let sum: f64 = ratios.iter().sum();
        Ok(PartitionPlan {
            ratios: ratios.iter().map(|r| r / sum).collect(),
            seed,
        })
    }

    /// 1:1:1.
    pub fn equal(seed: u64) -> Self {
        Self::new(vec![1.0; 3], seed).expect("valid preset")
    }

    /// 7:2:1.
    pub fn setup(seed: u64) -> Self {
        Self::new(vec![7.0, 2.0, 1.0], seed).expect("valid preset")
    }

    /// 8:1:1.
    pub fn imbalanced(seed: u64) -> Self {
        Self::new(vec![8.0, 1.0, 1.0], seed).expect("valid preset")
    }

    /// Normalized ratios.
    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn clients(&self) -> usize {
        self.ratios.len()
    }

    pub fn sizes(&self, n: usize) -> Vec<usize> {
        largest_remainder(n, &self.ratios)
    }
}

/// Splits `indices` into one disjoint set per client: a seeded shuffle, then
/// consecutive runs of the largest-remainder sizes.
pub fn partition(indices: &[usize], plan: &PartitionPlan) -> Result<Vec<Vec<usize>>> {
    if indices.is_empty() {
        return Err(Error::Invalid("cannot partition an empty dataset".into()));
    }
    if plan.clients() > indices.len() {
        return Err(Error::Invalid(format!(
            "{} clients but only {} samples",
            plan.clients(),
            indices.len()
        )));
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut seeded(derive_seed(plan.seed, &[TAG_PARTITION])));
    let mut out = Vec::with_capacity(plan.clients());
    let mut start = 0;
    for size in plan.sizes(indices.len()) {
        out.push(shuffled[start..start + size].to_vec());
        start += size;
    }
    Ok(out)
}

/// Seed of the shuffle for `epoch` of the feed tagged `stream`.
fn epoch_seed(seed: u64, epoch: u64, stream: u64) -> u64 {
    derive_seed(seed, &[TAG_EPOCH, epoch, stream])
}

/// One epoch of batches: the indices reshuffled for `epoch`, cut into runs
/// of `quota` with a short final batch.
pub fn batch_iter(indices: &[usize], quota: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if quota == 0 {
        return Err(Error::Invalid("batch quota must be >= 1".into()));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut seeded(epoch_seed(seed, epoch, u64::MAX)));
    Ok(order.chunks(quota).map(|c| c.to_vec()).collect())
}

/// A client's view of its partition: hands out samples in a per-epoch
/// shuffled order, starting the next epoch once the current one is used up.
#[derive(Debug, Clone)]
pub struct ClientFeed {
    indices: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
    client_id: u64,
}

impl ClientFeed {
    pub fn new(indices: Vec<usize>, seed: u64, client_id: u32) -> Self {
        ClientFeed {
            indices,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            seed,
            client_id: client_id as u64,
        }
    }

    pub fn partition_size(&self) -> usize {
        self.indices.len()
    }

    /// Epochs started so far.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Samples left in the current epoch.
    pub fn remaining(&self) -> usize {
        self.order.len() - self.cursor
    }

    /// The next `quota` samples, beginning a fresh epoch when the current
    /// one is exhausted. Fails if `quota` exceeds what the epoch has left.
    pub fn take(&mut self, quota: usize) -> Result<Vec<usize>> {
        if quota == 0 {
            return Ok(Vec::new());
        }
        if self.remaining() == 0 {
            self.epoch += 1;
            self.order = self.indices.clone();
            self.order
                .shuffle(&mut seeded(epoch_seed(self.seed, self.epoch, self.client_id)));
            self.cursor = 0;
        }
        if quota > self.remaining() {
            return Err(Error::Protocol(format!(
                "quota {quota} exceeds the {} samples left this epoch",
                self.remaining()
            )));
        }
        let batch = self.order[self.cursor..self.cursor + quota].to_vec();
        self.cursor += quota;
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(864, &[7.0, 2.0, 1.0]), vec![605, 173, 86]);
        assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(600, &[8.0, 1.0, 1.0]), vec![480, 60, 60]);
        assert_eq!(largest_remainder(480, &[0.8, 0.1, 0.1]), vec![384, 48, 48]);
        assert_eq!(largest_remainder(7, &[1.0]), vec![7]);
    }

    #[test]
    fn presets() {
        assert_eq!(PartitionPlan::setup(0).sizes(864), vec![605, 173, 86]);
        assert_eq!(PartitionPlan::imbalanced(0).sizes(600), vec![480, 60, 60]);
        assert_eq!(PartitionPlan::equal(0).sizes(10), vec![4, 3, 3]);
        assert!(PartitionPlan::new(vec![1.0, 0.0], 0).is_err());
        assert!(PartitionPlan::new(vec![], 0).is_err());
    }

    #[test]
    fn single_client_gets_everything() {
        let idx: Vec<usize> = (0..17).collect();
        let parts = partition(&idx, &PartitionPlan::new(vec![1.0], 3).unwrap()).unwrap();
        let mut all = parts[0].clone();
        all.sort_unstable();
        assert_eq!(all, idx);
    }

    #[test]
    fn too_many_clients() {
        assert!(partition(&[0, 1], &PartitionPlan::equal(0)).is_err());
        assert!(partition(&[], &PartitionPlan::new(vec![1.0], 0).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_cover(n in 1usize..400, ratios in proptest::collection::vec(0.01f64..10.0, 1..6), seed: u64) {
            prop_assume!(ratios.len() <= n);
            let plan = PartitionPlan::new(ratios.clone(), seed).unwrap();
            let idx: Vec<usize> = (0..n).map(|i| i * 3).collect();
            let parts = partition(&idx, &plan).unwrap();
            let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(&all, &idx);
            for (p, r) in parts.iter().zip(plan.ratios()) {
                prop_assert!((p.len() as f64 - r * n as f64).abs() < 1.0);
            }
            prop_assert_eq!(parts, partition(&idx, &plan).unwrap());
        }

        #[test]
        fn batch_iter_covers_once(n in 1usize..200, quota in 1usize..40, epoch in 0u64..5) {
            let idx: Vec<usize> = (0..n).collect();
            let batches = batch_iter(&idx, quota, 9, epoch).unwrap();
            let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, idx.clone());
            prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == quota));
            prop_assert_eq!(batches, batch_iter(&idx, quota, 9, epoch).unwrap());
        }
    }

    #[test]
    fn batch_iter_sizes() {
        let idx: Vec<usize> = (0..10).collect();
        let sizes: Vec<usize> = batch_iter(&idx, 4, 1, 1).unwrap().iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_ne!(batch_iter(&idx, 10, 1, 1).unwrap(), batch_iter(&idx, 10, 1, 2).unwrap());
        assert!(batch_iter(&idx, 0, 1, 1).is_err());
    }

    #[test]
    fn stratified_split_counts() {
        let ds = synth_dataset(&SynthParams { n: 600, class_balance: 0.4, seed: 42 }).unwrap();
        let (train, test) = train_test_split(&ds, 0.2, 42).unwrap();
        assert_eq!((train.len(), test.len()), (480, 120));
        let pos = |ix: &[usize]| ix.iter().filter(|&&i| ds.label(i) == 1).count();
        assert_eq!((pos(&train), pos(&test)), (192, 48));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..600).collect::<Vec<_>>());
    }

    #[test]
    fn feed_walks_epochs() {
        let mut feed = ClientFeed::new((0..5).collect(), 7, 1);
        assert_eq!(feed.remaining(), 0);
        let a = feed.take(3).unwrap();
        assert_eq!((feed.epoch(), feed.remaining()), (1, 2));
        let b = feed.take(2).unwrap();
        let mut seen: Vec<usize> = a.iter().chain(&b).copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert!(feed.take(0).unwrap().is_empty());
        assert_eq!(feed.epoch(), 1);
        feed.take(1).unwrap();
        assert_eq!(feed.epoch(), 2);
        assert!(feed.take(5).is_err());
    }

    #[test]
    fn batch_tensors() {
        let ds = Dataset::new(vec![vec![0.0; IMAGE_LEN], vec![1.0; IMAGE_LEN]], vec![0, 1]).unwrap();
        let (x, y) = ds.batch::<f32>(&[1, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 1, 64, 64]);
        assert_eq!(x.data()[0], 1.0);
        assert_eq!(y.data(), &[1.0, 0.0]);
        assert!(ds.batch::<f32>(&[2]).is_err());
        assert!(Dataset::new(vec![vec![2.0; IMAGE_LEN]], vec![0]).is_err());
        assert!(Dataset::new(vec![vec![0.0; IMAGE_LEN]], vec![3]).is_err());
    }
}
