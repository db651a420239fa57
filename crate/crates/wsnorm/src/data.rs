//! Datasets: CIFAR-10 binary batches and a deterministic synthetic
//! fallback, plus per-channel standardization, augmentation, and batching.
//!
//! Images are 3×32×32, stored row-major CHW as f64 in [0, 1] (CIFAR) or
//! unbounded (synthetic) before standardization.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const IMAGE_LEN: usize = CHANNELS * SIDE * SIDE;
/// CIFAR-10 binary record: 1 label byte + 3072 CHW pixel bytes.
pub const RECORD_LEN: usize = 1 + IMAGE_LEN;
/// Amplitude of the per-pixel Gaussian noise in the synthetic dataset,
/// relative to prototype amplitude O(1).
const BLOB_NOISE: f64 = 0.8;

/// An in-memory labeled image set.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_LEN {
            return Err(Error::ShapeMismatch {
                context: "dataset",
                expected: format!("{} pixel values", labels.len() * IMAGE_LEN),
                got: format!("{}", images.len()),
            });
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes,
                    index: i,
                });
            }
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// First `n` records as a new dataset.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "requested {n} records from a dataset of {}",
                self.len()
            )));
        }
        Ok(Dataset {
            images: self.images[..n * IMAGE_LEN].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        })
    }

    /// Per-channel mean/std over every pixel of every image.
    pub fn channel_moments(&self) -> Result<ChannelMoments> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("moments of an empty dataset".into()));
        }
        let plane = SIDE * SIDE;
        let n = (self.len() * plane) as f64;
        let mut mean = vec![0.0; CHANNELS];
        let mut std = vec![0.0; CHANNELS];
        for img in self.labels.iter().enumerate().map(|(i, _)| self.image(i)) {
            for c in 0..CHANNELS {
                for v in &img[c * plane..(c + 1) * plane] {
                    mean[c] += v;
                }
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        for i in 0..self.len() {
            let img = self.image(i);
            for c in 0..CHANNELS {
                for v in &img[c * plane..(c + 1) * plane] {
                    let d = v - mean[c];
                    std[c] += d * d;
                }
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                return Err(Error::ConstraintViolated(
                    "channel with zero variance; cannot standardize".into(),
                ));
            }
        }
        Ok(ChannelMoments { mean, std })
    }

    /// Standardizes every image in place with the given (train-split)
    /// moments.
    pub fn standardize(&mut self, m: &ChannelMoments) {
        let plane = SIDE * SIDE;
        for img in self.images.chunks_mut(IMAGE_LEN) {
            for c in 0..CHANNELS {
                for v in &mut img[c * plane..(c + 1) * plane] {
                    *v = (*v - m.mean[c]) / m.std[c];
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChannelMoments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format

/// Reads one CIFAR-10 binary batch file (label byte + 3072 CHW pixel
/// bytes per record), mapping pixels to [0, 1].
pub fn load_cifar10_file(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let size = file.metadata()?.len() as usize;
    if size == 0 || size % RECORD_LEN != 0 {
        return Err(Error::Parse(format!(
            "{}: size {size} is not a multiple of the {RECORD_LEN}-byte record",
            path.display()
        )));
    }
    let n = size / RECORD_LEN;
    read_cifar_records(BufReader::new(file), n, path)
}

/// Reads the first `n` records of a batch file (bounded memory for subset
/// runs).
pub fn load_cifar10_prefix(path: &Path, n: usize) -> Result<Dataset> {
    let file = File::open(path)?;
    let size = file.metadata()?.len() as usize;
    if size % RECORD_LEN != 0 {
        return Err(Error::Parse(format!(
            "{}: size {size} is not a multiple of the {RECORD_LEN}-byte record",
            path.display()
        )));
    }
    if n > size / RECORD_LEN {
        return Err(Error::InvalidArgument(format!(
            "{}: requested {n} records, file holds {}",
            path.display(),
            size / RECORD_LEN
        )));
    }
    read_cifar_records(BufReader::new(file), n, path)
}

fn read_cifar_records(mut r: impl Read, n: usize, path: &Path) -> Result<Dataset> {
    let mut record = [0u8; RECORD_LEN];
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        r.read_exact(&mut record).map_err(|e| {
            Error::Parse(format!("{}: record {i} truncated: {e}", path.display()))
        })?;
        let label = record[0] as usize;
        if label > 9 {
            return Err(Error::LabelOutOfRange {
                label,
                classes: 10,
                index: i,
            });
        }
        labels.push(label);
        images.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(images, labels, 10)
}

/// Loads a train/val subset from a CIFAR-10 directory: `n_train` records
/// from `data_batch_1.bin` onward, `n_val` from `test_batch.bin`.
pub fn load_cifar10_subset(dir: &Path, n_train: usize, n_val: usize) -> Result<(Dataset, Dataset)> {
    let mut images = Vec::with_capacity(n_train * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n_train);
    let mut remaining = n_train;
    for batch in 1..=5 {
        if remaining == 0 {
            break;
        }
        let path = dir.join(format!("data_batch_{batch}.bin"));
        let ds = load_cifar10_prefix(&path, remaining.min(10_000))?;
        remaining -= ds.len();
        labels.extend((0..ds.len()).map(|i| ds.label(i)));
        images.extend_from_slice(&ds.images);
    }
    if remaining > 0 {
        return Err(Error::InvalidArgument(format!(
            "requested {n_train} train records, directory holds fewer"
        )));
    }
    let train = Dataset::new(images, labels, 10)?;
    let val = load_cifar10_prefix(&dir.join("test_batch.bin"), n_val)?;
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// Synthetic blobs

/// Deterministic 10-class-style synthetic images: each class has a smooth
/// low-frequency prototype (a sum of random cosine waves per channel) and
/// every image is its class prototype plus iid Gaussian pixel noise.
/// Labels cycle round-robin, so classes are balanced. Prototypes depend
/// only on (seed, class) and noise only on (seed, image index); the bytes
/// are reproducible regardless of generation order.
pub fn synth_blobs(seed: u64, n: usize, classes: usize) -> Result<Dataset> {
    synth_blobs_range(seed, 0, n, classes)
}

/// Like [`synth_blobs`], but draws the records at indices
/// `start .. start + n` of the stream. The class prototypes depend only on
/// `seed`, and each record's noise only on `(seed, index)`, so disjoint
/// ranges of the same seed yield disjoint samples of the *same* task —
/// which is how a validation split must be built. A fresh seed instead
/// redraws the prototypes, i.e. defines a different task.
pub fn synth_blobs_range(seed: u64, start: usize, n: usize, classes: usize) -> Result<Dataset> {
    if n == 0 || classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synth_blobs needs n >= 1 and classes >= 2, got n={n}, classes={classes}"
        )));
    }
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|k| blob_prototype(seeds::derive2(seed, seeds::stream::BLOB_CLASS, k as u64)))
        .collect();
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for i in start..start + n {
        let class = i % classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(
            seed,
            seeds::stream::BLOB_IMAGE,
            i as u64,
        ));
        images.extend(
            prototypes[class]
                .iter()
                .map(|&p| p + BLOB_NOISE * rng.sample::<f64, _>(StandardNormal)),
        );
        labels.push(class);
    }
    Dataset::new(images, labels, classes)
}

fn blob_prototype(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0; IMAGE_LEN];
    let tau = std::f64::consts::TAU;
    for c in 0..CHANNELS {
        // A few low-frequency waves; 3×3 convs plus pooling can separate
        // these while single pixels cannot.
        for _ in 0..4 {
            let amp: f64 = rng.gen_range(0.4..1.0);
            let fx: f64 = rng.gen_range(0.5..3.0);
            let fy: f64 = rng.gen_range(0.5..3.0);
            let phase: f64 = rng.gen_range(0.0..tau);
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let arg = tau * (fx * x as f64 + fy * y as f64) / SIDE as f64 + phase;
                    img[(c * SIDE + y) * SIDE + x] += amp * arg.cos();
                }
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Batching and augmentation

/// Train-time augmentation: horizontal flip with probability 1/2, then a
/// random crop from a zero-padded canvas.
#[derive(Clone, Copy, Debug)]
pub struct Augment {
    pub flip: bool,
    pub pad: usize,
}

impl Default for Augment {
    fn default() -> Self {
        Augment { flip: true, pad: 4 }
    }
}

/// A shuffled copy of 0..n.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Assembles `[b, 3, 32, 32]` inputs and labels for the given record
/// indices, applying augmentation when given. Per image the RNG draws, in
/// order: flip decision, row offset, column offset.
pub fn make_batch(
    ds: &Dataset,
    indices: &[usize],
    aug: Option<&Augment>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let b = indices.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut out = Vec::with_capacity(b * IMAGE_LEN);
    let mut labels = Vec::with_capacity(b);
    for &i in indices {
        let src = ds.image(i);
        match aug {
            None => out.extend_from_slice(src),
            Some(a) => {
                let flip = a.flip && rng.gen_bool(0.5);
                let (dy, dx) = if a.pad > 0 {
                    (rng.gen_range(0..=2 * a.pad), rng.gen_range(0..=2 * a.pad))
                } else {
                    (a.pad, a.pad)
                };
                append_shifted(src, flip, a.pad, dy, dx, &mut out);
            }
        }
        labels.push(ds.label(i));
    }
    Ok((Tensor::new(vec![b, CHANNELS, SIDE, SIDE], out)?, labels))
}

/// Writes `src` flipped/shifted into `out`: output pixel (y, x) reads the
/// padded canvas at (y + dy, x + dx), where the canvas holds the (possibly
/// mirrored) image at offset `pad` and zeros elsewhere.
fn append_shifted(src: &[f64], flip: bool, pad: usize, dy: usize, dx: usize, out: &mut Vec<f64>) {
    for c in 0..CHANNELS {
        for y in 0..SIDE {
            let sy = (y + dy) as isize - pad as isize;
            for x in 0..SIDE {
                let sx = (x + dx) as isize - pad as isize;
                if sy < 0 || sy >= SIDE as isize || sx < 0 || sx >= SIDE as isize {
                    out.push(0.0);
                } else {
                    let col = if flip { SIDE - 1 - sx as usize } else { sx as usize };
                    out.push(src[(c * SIDE + sy as usize) * SIDE + col]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_records(path: &Path, records: &[(u8, u8)]) {
        // (label, fill byte) per record
        let mut f = File::create(path).unwrap();
        for &(label, fill) in records {
            let mut rec = vec![fill; RECORD_LEN];
            rec[0] = label;
            f.write_all(&rec).unwrap();
        }
    }

    #[test]
    fn cifar_loader_reads_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        write_records(&path, &[(3, 255), (9, 0)]);
        let ds = load_cifar10_file(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.label(0), 3);
        assert_eq!(ds.label(1), 9);
        assert!((ds.image(0)[0] - 1.0).abs() < 1e-15);
        assert_eq!(ds.image(1)[IMAGE_LEN - 1], 0.0);
    }

    #[test]
    fn cifar_loader_rejects_bad_sizes_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let truncated = dir.path().join("short.bin");
        std::fs::write(&truncated, vec![0u8; RECORD_LEN - 1]).unwrap();
        assert!(matches!(load_cifar10_file(&truncated), Err(Error::Parse(_))));

        let bad_label = dir.path().join("label.bin");
        write_records(&bad_label, &[(10, 0)]);
        assert!(matches!(
            load_cifar10_file(&bad_label),
            Err(Error::LabelOutOfRange { label: 10, .. })
        ));
    }

    #[test]
    fn canonical_batch_file_holds_ten_thousand_records() {
        // A canonical batch file is exactly 10,000 records; build one
        // sparsely and confirm the loader counts it.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let f = File::create(&path).unwrap();
        f.set_len((10_000 * RECORD_LEN) as u64).unwrap();
        drop(f);
        let ds = load_cifar10_file(&path).unwrap();
        assert_eq!(ds.len(), 10_000);
    }

    #[test]
    fn standardization_zeroes_channel_moments() {
        let mut ds = synth_blobs(5, 60, 3).unwrap();
        let m = ds.channel_moments().unwrap();
        ds.standardize(&m);
        let m2 = ds.channel_moments().unwrap();
        for c in 0..CHANNELS {
            assert!(m2.mean[c].abs() < 1e-6, "mean {}", m2.mean[c]);
            assert!((m2.std[c] - 1.0).abs() < 1e-6, "std {}", m2.std[c]);
        }
    }

    #[test]
    fn synth_blobs_deterministic_and_balanced() {
        let a = synth_blobs(1, 100, 10).unwrap();
        let b = synth_blobs(1, 100, 10).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let mut counts = [0usize; 10];
        for i in 0..a.len() {
            counts[a.label(i)] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));

        let c = synth_blobs(2, 100, 10).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn blob_classes_are_separated() {
        // Nearest-prototype distances: an image should sit closer to its
        // own class prototype than to most others.
        let ds = synth_blobs(3, 40, 4).unwrap();
        let protos: Vec<Vec<f64>> = (0..4)
            .map(|k| blob_prototype(seeds::derive2(3, seeds::stream::BLOB_CLASS, k as u64)))
            .collect();
        let mut correct = 0;
        for i in 0..ds.len() {
            let img = ds.image(i);
            let mut best = (f64::INFINITY, 0);
            for (k, p) in protos.iter().enumerate() {
                let d: f64 = img.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            if best.1 == ds.label(i) {
                correct += 1;
            }
        }
        assert!(correct >= 36, "only {correct}/40 nearest-prototype correct");
    }

    #[test]
    fn augmentation_identity_when_disabled() {
        let ds = synth_blobs(7, 6, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (batch, labels) = make_batch(&ds, &[2, 4], None, &mut rng).unwrap();
        assert_eq!(batch.shape(), &[2, 3, 32, 32]);
        assert_eq!(labels, vec![ds.label(2), ds.label(4)]);
        assert_eq!(&batch.data()[..IMAGE_LEN], ds.image(2));
    }

    #[test]
    fn augmentation_centered_crop_without_flip_is_identity() {
        let ds = synth_blobs(7, 3, 3).unwrap();
        let mut out = Vec::new();
        append_shifted(ds.image(0), false, 4, 4, 4, &mut out);
        assert_eq!(out.as_slice(), ds.image(0));
    }

    #[test]
    fn augmentation_flip_mirrors_columns() {
        let ds = synth_blobs(9, 3, 3).unwrap();
        let mut out = Vec::new();
        append_shifted(ds.image(1), true, 0, 0, 0, &mut out);
        let src = ds.image(1);
        for c in 0..CHANNELS {
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let a = out[(c * SIDE + y) * SIDE + x];
                    let b = src[(c * SIDE + y) * SIDE + (SIDE - 1 - x)];
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let idx = shuffled_indices(100, &mut rng);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(idx, (0..100).collect::<Vec<_>>());
    }
}
