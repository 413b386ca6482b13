//! IDX files as used by MNIST.
//!
//! Layout: a 32-bit big-endian magic (`0x00000803` for rank-3 `u8` images,
//! `0x00000801` for rank-1 `u8` labels), one big-endian `u32` per dimension,
//! then the raw bytes.

use std::path::Path;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "IDX images magic is {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let expected = count * rows * cols;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "IDX images body has {} bytes, header declares {expected}",
            body.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "IDX labels magic is {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format(format!(
            "IDX labels body has {} bytes, header declares {count}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an MNIST image/label file pair; pixels are scaled into `[0, 1]`.
pub fn load_mnist<T: Scalar>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let images = parse_idx_images(&read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels_path.as_ref())?)?;
    if images.count != labels.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    if let Some(&label) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::LabelRange { label, num_classes: 10 });
    }
    let d = images.rows * images.cols;
    let scale = T::of(1.0 / 255.0);
    let data = images.pixels.iter().map(|&p| T::of(f64::from(p)) * scale).collect();
    let name = images_path
        .as_ref()
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(
        Tensor::new(vec![images.count, d], data)?,
        labels,
        10,
        vec![1, images.rows, images.cols],
        format!("mnist:{name}"),
    )
}

/// Loads a canonical split from `dir` (uncompressed files with the standard
/// names) and checks the 60,000 / 10,000 example counts.
pub fn load_mnist_split<T: Scalar>(dir: impl AsRef<Path>, split: Split) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let (images, labels, expected, tag) = match split {
        Split::Train => (
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            60_000,
            "mnist-train",
        ),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 10_000, "mnist-test"),
    };
    let ds = load_mnist(dir.join(images), dir.join(labels))?;
    if ds.len() != expected {
        return Err(Error::Format(format!(
            "{tag}: expected {expected} examples, found {}",
            ds.len()
        )));
    }
    Ok(ds.with_provenance(tag))
}

pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let count = pixels.len() / (rows * cols);
    if count * rows * cols != pixels.len() {
        return Err(Error::shape("pixel buffer is not a whole number of images"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    std::fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}
