//! Seeded randomness.
//!
//! [`RngState`] wraps a ChaCha20 stream cipher generator. ChaCha is
//! counter-based, so the sample sequence depends only on the seed and the
//! order of calls, never on the platform. Independent streams for different
//! consumers (lot sampling, noise, initialization, per-client training) are
//! obtained with [`RngState::derive`], which keeps their sequences decoupled:
//! skipping the noise draws when `sigma == 0` does not shift the lot sequence.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut sm).to_le_bytes());
        }
        RngState {
            seed,
            inner: ChaCha20Rng::from_seed(key),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Seed of the child stream labelled by `path`, a pure function of
    /// `(self.seed, path)`.
    pub fn derive_seed(&self, path: &[u64]) -> u64 {
        let mut sm = self.seed ^ 0xD1B5_4A32_D192_ED03;
        let mut acc = splitmix64(&mut sm);
        for &p in path {
            sm ^= p.wrapping_mul(0xA24B_AED4_963E_E407);
            acc ^= splitmix64(&mut sm);
            acc = acc.rotate_left(17);
        }
        acc ^ splitmix64(&mut sm)
    }

    /// Independent stream for a named consumer. Does not advance `self`.
    pub fn derive(&self, path: &[u64]) -> RngState {
        RngState::new(self.derive_seed(path))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, unbiased. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.inner.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// Standard normal draw via the Box-Muller transform.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mu: f64, sigma: f64) -> f64 {
        mu + sigma * self.standard_normal()
    }

    pub fn fill_standard_normal<T: Scalar>(&mut self, out: &mut [T]) {
        for x in out {
            *x = T::of(self.standard_normal());
        }
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// I.i.d. `Normal(mu, sigma^2)` samples of the given shape.
///
/// `sigma == 0` returns the constant `mu` tensor without consuming randomness.
pub fn gauss_sample<T: Scalar>(rng: &mut RngState, shape: &[usize], mu: f64, sigma: f64) -> Result<Tensor<T>> {
    if !(sigma >= 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::validation(format!(
            "gaussian parameters must be finite with sigma >= 0, got mu={mu}, sigma={sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(Tensor::full(shape, T::of(mu)));
    }
    Ok(Tensor::from_fn(shape, |_| T::of(rng.normal(mu, sigma))))
}

/// Uniform samples in `[lo, hi)`.
pub fn uniform_sample<T: Scalar>(rng: &mut RngState, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(lo + (hi - lo) * rng.uniform()))
}
