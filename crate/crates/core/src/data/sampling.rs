use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::numerics::RngState;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Fixed-size lots drawn in order from a fresh permutation every epoch.
    #[default]
    Shuffle,
    /// Each example joins the lot independently with probability `lot_size / N`.
    Poisson,
}

/// Stateful lot generator over the indices `0..n`.
///
/// In shuffle mode an epoch is `ceil(n / lot_size)` lots; the last lot of an
/// epoch holds the remainder when `lot_size` does not divide `n`.
#[derive(Debug, Clone)]
pub struct LotSampler {
    mode: SamplingMode,
    n: usize,
    lot_size: usize,
    rng: RngState,
    perm: Vec<usize>,
    cursor: usize,
}

impl LotSampler {
    pub fn new(n: usize, lot_size: usize, mode: SamplingMode, rng: RngState) -> Result<Self> {
        if n == 0 {
            return Err(Error::validation("cannot sample lots from an empty dataset"));
        }
        if lot_size == 0 {
            return Err(Error::validation("lot size must be positive"));
        }
        if mode == SamplingMode::Shuffle && lot_size > n {
            return Err(Error::validation(format!(
                "lot size {lot_size} exceeds dataset size {n}"
            )));
        }
        Ok(LotSampler {
            mode,
            n,
            lot_size,
            rng,
            perm: Vec::new(),
            cursor: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n.div_ceil(self.lot_size)
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    /// Sampling rate `q = lot_size / n`.
    pub fn rate(&self) -> f64 {
        (self.lot_size as f64 / self.n as f64).min(1.0)
    }

    pub fn next_indices(&mut self) -> Result<Vec<usize>> {
        match self.mode {
            SamplingMode::Shuffle => {
                if self.cursor >= self.perm.len() {
                    self.perm = self.rng.permutation(self.n);
                    self.cursor = 0;
                }
                let end = (self.cursor + self.lot_size).min(self.n);
                let lot = self.perm[self.cursor..end].to_vec();
                self.cursor = end;
                Ok(lot)
            }
            SamplingMode::Poisson => {
                let q = self.rate();
                for _attempt in 0..2 {
                    let lot: Vec<usize> = (0..self.n).filter(|_| self.rng.bernoulli(q)).collect();
                    if !lot.is_empty() {
                        return Ok(lot);
                    }
                }
                Err(Error::validation(format!(
                    "Poisson sampling at rate {q} produced two empty lots"
                )))
            }
        }
    }
}

/// Draws a single lot from `dataset`.
pub fn sample_lot<T: Scalar>(
    dataset: &Dataset<T>,
    lot_size: usize,
    rng: &mut RngState,
    mode: SamplingMode,
) -> Result<Batch<T>> {
    let draw = rand::RngCore::next_u64(rng);
    let stream = rng.derive(&[draw]);
    let mut sampler = LotSampler::new(dataset.len(), lot_size, mode, stream)?;
    dataset.batch(&sampler.next_indices()?)
}
