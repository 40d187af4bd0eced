//! Datasets, IDX ingestion and non-IID partitioning across devices.
//!
//! Feature rows are stored as `f32` (MNIST alone is 60,000 x 785) with a
//! trailing constant-1 column that carries the bias. All arithmetic on them
//! happens in `f64`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

/// A labelled dataset with a bias column appended to every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    n_features: usize,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    /// Builds a dataset from row-major `features` whose rows already include
    /// the bias column.
    pub fn new(
        features: Vec<f32>,
        n_features: usize,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        if n_features == 0 || n_classes == 0 {
            return Err(Error::invalid("feature and class counts must be positive"));
        }
        if labels.is_empty() {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::Consistency(format!(
                "{} feature values do not form {} rows of {}",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("feature values must be finite"));
        }
        Ok(Dataset {
            features,
            n_features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row length, bias column included.
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Model dimension `D` for a softmax model over this dataset.
    pub fn model_dim(&self) -> usize {
        self.n_features * self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Widens the class count, e.g. so a test split agrees with its train split.
    pub fn with_n_classes(mut self, n_classes: usize) -> Result<Self> {
        if n_classes < self.n_classes {
            return Err(Error::invalid(format!(
                "cannot shrink class count from {} to {n_classes}",
                self.n_classes
            )));
        }
        self.n_classes = n_classes;
        Ok(self)
    }

    /// Splits off the first `n` samples; returns `(head, tail)`.
    pub fn split_at(self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::invalid(format!(
                "split point {n} must lie strictly inside 1..{}",
                self.len()
            )));
        }
        let Dataset {
            mut features,
            n_features,
            mut labels,
            n_classes,
        } = self;
        let tail_features = features.split_off(n * n_features);
        let tail_labels = labels.split_off(n);
        Ok((
            Dataset {
                features,
                n_features,
                labels,
                n_classes,
            },
            Dataset {
                features: tail_features,
                n_features,
                labels: tail_labels,
                n_classes,
            },
        ))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an IDX image file and its label file.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_file(images_path.as_ref())?;
    let labels = read_file(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> IdxReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format(format!("{} file truncated in header", self.what)))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
    }

    fn body(&self, len: usize) -> Result<&'a [u8]> {
        let body = &self.bytes[self.pos..];
        if body.len() != len {
            return Err(Error::Format(format!(
                "{} file has {} data bytes, header promises {len}",
                self.what,
                body.len()
            )));
        }
        Ok(body)
    }
}

/// Decodes in-memory IDX image and label files.
///
/// Pixels are scaled by 1/255 and a constant 1 is appended to every row. The
/// class count is one more than the largest label present.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut img = IdxReader {
        bytes: images,
        pos: 0,
        what: "image",
    };
    let magic = img.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image file magic {magic}, expected {IDX_IMAGES_MAGIC}"
        )));
    }
    let n_images = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;
    let pixels = rows * cols;
    let raw = img.body(n_images * pixels)?;

    let mut lab = IdxReader {
        bytes: labels,
        pos: 0,
        what: "label",
    };
    let magic = lab.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label file magic {magic}, expected {IDX_LABELS_MAGIC}"
        )));
    }
    let n_labels = lab.u32()? as usize;
    let raw_labels = lab.body(n_labels)?;

    if n_images != n_labels {
        return Err(Error::Consistency(format!(
            "{n_images} images but {n_labels} labels"
        )));
    }

    let n_features = pixels + 1;
    let mut features = Vec::with_capacity(n_images * n_features);
    for image in raw.chunks_exact(pixels.max(1)).take(n_images) {
        features.extend(image.iter().map(|&b| f32::from(b) / 255.0));
        features.push(1.0);
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| usize::from(b)).collect();
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(features, n_features, labels, n_classes)
}

/// Gaussian class clusters: one mean per class drawn from N(0, 2^2) per
/// coordinate, unit-variance samples around it, labels uniform over classes.
/// `n_features` excludes the appended bias column.
pub fn generate_synthetic(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 || n_features == 0 || n_classes == 0 {
        return Err(Error::invalid(format!(
            "synthetic dataset needs positive sizes, got ({n_samples}, {n_features}, {n_classes})"
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let spread = Normal::new(0.0, 2.0).expect("valid normal");
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..n_features).map(|_| spread.sample(&mut rng)).collect())
        .collect();

    let row_len = n_features + 1;
    let mut features = Vec::with_capacity(n_samples * row_len);
    let mut labels = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let class = rng.random_range(0..n_classes);
        labels.push(class);
        for &mu in &means[class] {
            features.push((mu + unit.sample(&mut rng)) as f32);
        }
        features.push(1.0);
    }
    Dataset::new(features, row_len, labels, n_classes)
}

/// Per-device sample indices into a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    devices: Vec<Vec<usize>>,
}

impl Partition {
    /// Wraps explicit index lists, checking they are nonempty, disjoint and in
    /// range for `dataset`.
    pub fn new(devices: Vec<Vec<usize>>, dataset: &Dataset) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::invalid("partition needs at least one device"));
        }
        let mut seen = vec![false; dataset.len()];
        for (device, indices) in devices.iter().enumerate() {
            if indices.is_empty() {
                return Err(Error::invalid(format!("device {device} has no samples")));
            }
            for &i in indices {
                match seen.get_mut(i) {
                    None => {
                        return Err(Error::invalid(format!(
                            "sample index {i} out of range for {} samples",
                            dataset.len()
                        )))
                    }
                    Some(true) => {
                        return Err(Error::invalid(format!(
                            "sample {i} assigned to more than one device"
                        )))
                    }
                    Some(flag) => *flag = true,
                }
            }
        }
        Ok(Partition { devices })
    }

    pub fn n_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn indices(&self, device: usize) -> &[usize] {
        &self.devices[device]
    }

    /// `m_i`.
    pub fn sample_count(&self, device: usize) -> usize {
        self.devices[device].len()
    }

    pub fn sample_counts(&self) -> Vec<usize> {
        self.devices.iter().map(Vec::len).collect()
    }

    /// `M`, the number of samples held across all devices.
    pub fn total_samples(&self) -> usize {
        self.devices.iter().map(Vec::len).sum()
    }
}

/// Label-sorted shard partitioning.
///
/// Samples are sorted by label (stable, so ties keep index order), cut into
/// `n_devices * shards_per_device` shards of `floor(M / shards)` samples, and
/// the shards are dealt to devices in a seeded random order. Samples beyond
/// the last full shard are dropped.
pub fn partition_shards(
    dataset: &Dataset,
    n_devices: usize,
    shards_per_device: usize,
    seed: u64,
) -> Result<Partition> {
    if n_devices == 0 || shards_per_device == 0 {
        return Err(Error::invalid("device and shard counts must be positive"));
    }
    let n_shards = n_devices * shards_per_device;
    let shard_size = dataset.len() / n_shards;
    if shard_size == 0 {
        return Err(Error::invalid(format!(
            "{} samples cannot fill {n_shards} shards",
            dataset.len()
        )));
    }

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| dataset.label(i));

    let mut shard_ids: Vec<usize> = (0..n_shards).collect();
    shard_ids.shuffle(&mut stream_rng(seed, 0));

    let devices = shard_ids
        .chunks_exact(shards_per_device)
        .map(|shards| {
            shards
                .iter()
                .flat_map(|&s| order[s * shard_size..(s + 1) * shard_size].iter().copied())
                .collect()
        })
        .collect();
    Partition::new(devices, dataset)
}

/// Gives every device `classes_per_device` classes with `floor(M / (N C))`
/// samples of each.
///
/// Class slots are dealt round-robin over a seeded permutation of the
/// classes, so every class is requested by the same number of devices (up to
/// one). Fails when some class cannot supply its requested samples.
pub fn partition_by_classes(
    dataset: &Dataset,
    n_devices: usize,
    classes_per_device: usize,
    seed: u64,
) -> Result<Partition> {
    let n_classes = dataset.n_classes();
    if n_devices == 0 || classes_per_device == 0 {
        return Err(Error::invalid("device and class counts must be positive"));
    }
    if classes_per_device > n_classes {
        return Err(Error::invalid(format!(
            "{classes_per_device} classes per device but only {n_classes} classes exist"
        )));
    }
    let per_class = dataset.len() / (n_devices * classes_per_device);
    if per_class == 0 {
        return Err(Error::invalid(format!(
            "{} samples cannot give {n_devices} devices {classes_per_device} nonempty classes",
            dataset.len()
        )));
    }

    let mut rng = stream_rng(seed, 0);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for i in 0..dataset.len() {
        pools[dataset.label(i)].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut class_order: Vec<usize> = (0..n_classes).collect();
    class_order.shuffle(&mut rng);

    let assignment: Vec<Vec<usize>> = (0..n_devices)
        .map(|d| {
            (0..classes_per_device)
                .map(|j| class_order[(d * classes_per_device + j) % n_classes])
                .collect()
        })
        .collect();

    let mut demand = vec![0usize; n_classes];
    for classes in &assignment {
        for &c in classes {
            demand[c] += per_class;
        }
    }
    for (class, (&need, pool)) in demand.iter().zip(&pools).enumerate() {
        if need > pool.len() {
            return Err(Error::invalid(format!(
                "class {class} has {} samples but {need} are required",
                pool.len()
            )));
        }
    }

    let mut cursor = vec![0usize; n_classes];
    let devices = assignment
        .iter()
        .map(|classes| {
            let mut indices = Vec::with_capacity(per_class * classes_per_device);
            for &c in classes {
                indices.extend_from_slice(&pools[c][cursor[c]..cursor[c] + per_class]);
                cursor[c] += per_class;
            }
            indices
        })
        .collect();
    Partition::new(devices, dataset)
}
