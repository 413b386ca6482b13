//! Datasets, loaders, lot sampling and non-IID partitioning.

mod cifar;
mod idx;
mod partition;
mod sampling;

pub use cifar::{
    load_cifar10, load_cifar10_split, load_cifar10_with_stats, parse_cifar10, ChannelStats, CIFAR_RECORD_LEN,
};
pub use idx::{
    load_mnist, load_mnist_split, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, IdxImages,
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use partition::{dirichlet_partition, sample_dirichlet, Partition};
pub use sampling::{sample_lot, LotSampler, SamplingMode};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::numerics::{RngState, Tensor};
use crate::scalar::Scalar;

/// Canonical split of a benchmark dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Labelled examples stored as an `N x input_dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    inputs: Tensor<T>,
    labels: Vec<usize>,
    num_classes: usize,
    sample_shape: Vec<usize>,
    provenance: String,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        inputs: Tensor<T>,
        labels: Vec<usize>,
        num_classes: usize,
        sample_shape: Vec<usize>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let (n, d) = inputs.dims2()?;
        if n != labels.len() {
            return Err(Error::shape(format!("{n} inputs but {} labels", labels.len())));
        }
        if sample_shape.iter().product::<usize>() != d {
            return Err(Error::shape(format!(
                "sample shape {sample_shape:?} does not match input width {d}"
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelRange { label, num_classes });
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            sample_shape,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn with_provenance(mut self, tag: impl Into<String>) -> Self {
        self.provenance = tag.into();
        self
    }

    /// Gathers the examples at `indices` into a new dataset, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::shape(format!(
                    "index {i} out of range for {} examples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            inputs: Tensor::new(vec![indices.len(), d], data)?,
            labels,
            num_classes: self.num_classes,
            sample_shape: self.sample_shape.clone(),
            provenance: self.provenance.clone(),
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        let sub = self.subset(indices)?;
        Batch::new(sub.inputs, sub.labels, self.num_classes)
    }

    /// Examples of `self` followed by those of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.input_dim() != other.input_dim() || self.num_classes != other.num_classes {
            return Err(Error::shape("datasets differ in input width or class count"));
        }
        let mut data = self.inputs.data().to_vec();
        data.extend_from_slice(other.inputs.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Dataset {
            inputs: Tensor::new(vec![labels.len(), self.input_dim()], data)?,
            labels,
            num_classes: self.num_classes,
            sample_shape: self.sample_shape.clone(),
            provenance: self.provenance.clone(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of each class, ascending.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// First `n` examples (or all, if fewer).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Environment variable naming the directory that holds benchmark datasets.
pub const DATA_DIR_ENV: &str = "HERO_DP_DATA_DIR";

/// Data root from `HERO_DP_DATA_DIR`, if set.
pub fn data_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

fn first_dir_with(root: &Path, subdirs: &[&str], marker: &str) -> Option<PathBuf> {
    std::iter::once(root.to_path_buf())
        .chain(subdirs.iter().map(|s| root.join(s)))
        .find(|d| d.join(marker).is_file())
}

/// Directory under `root` holding the uncompressed MNIST IDX files.
pub fn locate_mnist(root: &Path) -> Option<PathBuf> {
    first_dir_with(root, &["mnist", "MNIST", "MNIST/raw"], "train-images-idx3-ubyte")
}

/// Directory under `root` holding the CIFAR-10 binary batches.
pub fn locate_cifar10(root: &Path) -> Option<PathBuf> {
    first_dir_with(root, &["cifar-10-batches-bin", "cifar10"], "data_batch_1.bin")
}

/// Gaussian class-cluster data: class `c` has a random prototype and each
/// example is `prototype + spread * N(0, I)`.
///
/// Used when the benchmark files are not available and for tests.
pub fn synthetic_clusters<T: Scalar>(
    n: usize,
    sample_shape: &[usize],
    num_classes: usize,
    spread: f64,
    rng: &mut RngState,
) -> Result<Dataset<T>> {
    if num_classes == 0 {
        return Err(Error::validation("need at least one class"));
    }
    let d: usize = sample_shape.iter().product();
    let mut proto_rng = rng.derive(&[0x5052_4f54]);
    let prototypes: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..d).map(|_| proto_rng.standard_normal()).collect())
        .collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        labels.push(c);
        data.extend(prototypes[c].iter().map(|&p| T::of(p + spread * rng.standard_normal())));
    }
    Dataset::new(
        Tensor::new(vec![n, d], data)?,
        labels,
        num_classes,
        sample_shape.to_vec(),
        "synthetic",
    )
}

/// Synthetic 28x28 digit-like images in `[0, 1]` with labels `0..10`: each
/// class lights a distinct set of pixel blobs, blurred by per-example noise.
pub fn synthetic_digits<T: Scalar>(n: usize, noise: f64, rng: &mut RngState) -> Result<Dataset<T>> {
    const SIDE: usize = 28;
    let mut proto_rng = rng.derive(&[0x44_4947_4954]);
    let mut prototypes = vec![vec![0.0f64; SIDE * SIDE]; 10];
    for proto in &mut prototypes {
        for _ in 0..6 {
            let cy = 4 + proto_rng.below(SIDE - 8);
            let cx = 4 + proto_rng.below(SIDE - 8);
            for y in cy - 3..=cy + 3 {
                for x in cx - 3..=cx + 3 {
                    let r2 = (y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2);
                    proto[y * SIDE + x] = f64::max(proto[y * SIDE + x], (-r2 / 4.0).exp());
                }
            }
        }
    }
    let mut data = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        labels.push(c);
        data.extend(
            prototypes[c]
                .iter()
                .map(|&p| T::of((p + noise * rng.standard_normal()).clamp(0.0, 1.0))),
        );
    }
    Dataset::new(
        Tensor::new(vec![n, SIDE * SIDE], data)?,
        labels,
        10,
        vec![1, SIDE, SIDE],
        "synthetic-digits",
    )
}
