//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue pixel bytes (row-major 32x32 planes).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const CIFAR_RECORD_LEN: usize = 3073;
const PLANE: usize = 1024;

/// Per-channel mean and standard deviation of `pixel / 255`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn from_records(labels_and_pixels: &[(u8, &[u8])]) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sum_sq = [0.0f64; 3];
        for (_, px) in labels_and_pixels {
            for c in 0..3 {
                for &p in &px[c * PLANE..(c + 1) * PLANE] {
                    let v = f64::from(p) / 255.0;
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
        }
        let n = (labels_and_pixels.len() * PLANE).max(1) as f64;
        let mut mean = [0.0; 3];
        let mut std = [1.0; 3];
        for c in 0..3 {
            mean[c] = sum[c] / n;
            let var = (sum_sq[c] / n - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        ChannelStats { mean, std }
    }
}

/// Splits a batch file into `(label, pixels)` records.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<(u8, &[u8])>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(Error::Format(format!(
            "CIFAR-10 batch length {} is not a positive multiple of {CIFAR_RECORD_LEN}",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_LEN)
        .map(|rec| {
            if rec[0] >= 10 {
                Err(Error::LabelRange {
                    label: rec[0] as usize,
                    num_classes: 10,
                })
            } else {
                Ok((rec[0], &rec[1..]))
            }
        })
        .collect()
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<Vec<u8>>> {
    paths
        .iter()
        .map(|p| std::fs::read(p).map_err(|e| Error::io(p, e)))
        .collect()
}

fn build<T: Scalar>(records: &[(u8, &[u8])], stats: &ChannelStats, tag: &str) -> Result<Dataset<T>> {
    let mut data = Vec::with_capacity(records.len() * 3 * PLANE);
    for (_, px) in records {
        for c in 0..3 {
            let (m, s) = (stats.mean[c], stats.std[c]);
            data.extend(
                px[c * PLANE..(c + 1) * PLANE]
                    .iter()
                    .map(|&p| T::of((f64::from(p) / 255.0 - m) / s)),
            );
        }
    }
    let labels = records.iter().map(|(l, _)| *l as usize).collect();
    Dataset::new(
        Tensor::new(vec![records.len(), 3 * PLANE], data)?,
        labels,
        10,
        vec![3, 32, 32],
        tag,
    )
}

/// Loads batch files and standardizes channels with statistics of the loaded data.
pub fn load_cifar10<T: Scalar>(batch_paths: &[PathBuf]) -> Result<(Dataset<T>, ChannelStats)> {
    let raw = read_all(batch_paths)?;
    let mut records = Vec::new();
    for bytes in &raw {
        records.extend(parse_cifar10(bytes)?);
    }
    let stats = ChannelStats::from_records(&records);
    Ok((build(&records, &stats, "cifar10")?, stats))
}

/// Loads batch files standardized with externally supplied statistics.
pub fn load_cifar10_with_stats<T: Scalar>(batch_paths: &[PathBuf], stats: &ChannelStats) -> Result<Dataset<T>> {
    let raw = read_all(batch_paths)?;
    let mut records = Vec::new();
    for bytes in &raw {
        records.extend(parse_cifar10(bytes)?);
    }
    build(&records, stats, "cifar10")
}

/// Loads the canonical train (5 x 10,000) and test (10,000) batches from
/// `dir`; both are standardized with the training statistics.
pub fn load_cifar10_split<T: Scalar>(dir: impl AsRef<Path>) -> Result<(Dataset<T>, Dataset<T>)> {
    let dir = dir.as_ref();
    let train_paths: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let (train, stats) = load_cifar10::<T>(&train_paths)?;
    if train.len() != 50_000 {
        return Err(Error::Format(format!(
            "cifar10-train: expected 50000 examples, found {}",
            train.len()
        )));
    }
    let test = load_cifar10_with_stats::<T>(&[dir.join("test_batch.bin")], &stats)?;
    if test.len() != 10_000 {
        return Err(Error::Format(format!(
            "cifar10-test: expected 10000 examples, found {}",
            test.len()
        )));
    }
    Ok((
        train.with_provenance("cifar10-train"),
        test.with_provenance("cifar10-test"),
    ))
}
