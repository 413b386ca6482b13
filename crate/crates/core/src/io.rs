//! On-disk formats: the binary model file and CSV record streams.
//!
//! Model file layout (all integers little-endian):
//!
//! ```text
//! "HDPM"                      4-byte magic
//! u32 version                 currently 1
//! u32 n, n bytes              architecture as UTF-8 JSON
//! u32 layer count
//! per layer:
//!   u32 n, n bytes            parameter name (UTF-8)
//!   u32 rank, rank x u64      shape
//!   prod(shape) x f64         values, row-major
//! ```
//!
//! Values are always stored as `f64`; `f32` models widen on save.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{Architecture, ModelState};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 4] = b"HDPM";
pub const MODEL_VERSION: u32 = 1;

pub fn encode_model<T: Scalar>(model: &ModelState<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let arch = serde_json::to_vec(model.arch())?;
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for (name, t) in model.layers() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("model file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in model file".into()))
    }
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<ModelState<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model file version {version}")));
    }
    let arch: Architecture = serde_json::from_str(&r.string()?)?;
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("layer size overflows".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        layers.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after model data".into()));
    }
    ModelState::from_layers(arch, layers)
}

pub fn save_model<T: Scalar>(model: &ModelState<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_model(model)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelState<T>> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_model(&bytes)
}

/// Serializes records as CSV with a header row; `None` fields are left empty.
pub fn records_to_csv<R: Serialize>(records: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_csv<R: Serialize>(records: &[R], path: impl AsRef<Path>) -> Result<()> {
    let text = records_to_csv(records)?;
    let mut f = std::fs::File::create(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path.as_ref(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp_optim::StepRecord;
    use crate::nn::init_model;
    use crate::numerics::RngState;

    #[test]
    fn model_round_trip() {
        let arch = Architecture::mlp(4, &[3], 2);
        let m: ModelState<f64> = init_model(&arch, &mut RngState::new(1)).unwrap();
        let back: ModelState<f64> = decode_model(&encode_model(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn corrupted_files_rejected() {
        let arch = Architecture::mlp(4, &[3], 2);
        let m: ModelState<f64> = init_model(&arch, &mut RngState::new(1)).unwrap();
        let bytes = encode_model(&m).unwrap();
        assert!(matches!(
            decode_model::<f64>(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model::<f64>(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_model::<f64>(&long), Err(Error::Format(_))));
    }

    #[test]
    fn csv_header_and_empty_options() {
        let rec = StepRecord {
            step: 1,
            loss: 2.5,
            acc: None,
            pre_clip_mean: 1.0,
            pre_clip_max: 2.0,
            noise_energy: 0.0,
            rho_step: Some(0.5),
            elapsed_ms: 0,
        };
        let text = records_to_csv(&[rec]).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,loss,acc,pre_clip_mean,pre_clip_max,noise_energy,rho_step,elapsed_ms"
        );
        assert_eq!(lines.next().unwrap(), "1,2.5,,1.0,2.0,0.0,0.5,0");
    }
}
