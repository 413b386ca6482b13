//! Model-derived noise guidance.
//!
//! For every parameter tensor the current weights are viewed as a `d x k`
//! matrix `W` (`k <= d`). The Gram matrix `WᵀW = U Λ Uᵀ` yields singular
//! values `egv_i = sqrt(λ_i)` and the left-singular basis `B = W U diag(1/egv)`.
//! Noise scales are
//!
//! ```text
//! v_i = egv_i * sqrt(k) * sigma / sqrt(Σ_j egv_j²)
//! ```
//!
//! so that `Σ v_i² = k sigma²`: the expected energy of `B diag(v) n` for a
//! standard normal `n ∈ R^k` equals that of isotropic `N(0, sigma² I_k)` noise.
//! Guided noise for a whole layer is `B diag(v) N` with `N ∈ R^{k x k}` of
//! i.i.d. standard normals, mapped back to the layer's shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Grads, ModelState};
use crate::numerics::{complete_orthonormal, gram, orthonormality_error, sym_eigen, RngState, Tensor};
use crate::scalar::Scalar;

/// Relative eigenvalue threshold below which a direction counts as dead.
pub const RANK_EPS: f64 = 1e-10;

/// Whether guidance is computed per parameter tensor or over the whole model
/// flattened into a single matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceScope {
    #[default]
    Layer,
    Model,
}

/// How a parameter tensor was laid out as a `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matricization {
    pub original_shape: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    /// The natural `(leading, rest)` grouping was transposed to put the
    /// smaller side in the columns.
    pub transposed: bool,
}

impl Matricization {
    /// Maps a `rows x cols` matrix back to the original tensor shape.
    pub fn restore<T: Scalar>(&self, m: Tensor<T>) -> Result<Tensor<T>> {
        let m = if self.transposed { m.transpose()? } else { m };
        m.reshape(&self.original_shape)
    }
}

/// Lays a parameter tensor out as a `d x k` matrix with `k <= d`.
///
/// Vectors become `len x 1`; higher ranks group the leading dimension against
/// the product of the rest, then transpose if needed so the smaller side is `k`.
pub fn matricize<T: Scalar>(param: &Tensor<T>) -> Result<(Tensor<T>, Matricization)> {
    let shape = param.shape().to_vec();
    if shape.is_empty() {
        return Err(Error::shape("cannot matricize a rank-0 tensor"));
    }
    let (a, b) = if shape.len() == 1 {
        (shape[0], 1)
    } else {
        (shape[0], shape[1..].iter().product())
    };
    let m = param.clone().reshape(&[a, b])?;
    if b <= a {
        Ok((
            m,
            Matricization {
                original_shape: shape,
                rows: a,
                cols: b,
                transposed: false,
            },
        ))
    } else {
        Ok((
            m.transpose()?,
            Matricization {
                original_shape: shape,
                rows: b,
                cols: a,
                transposed: true,
            },
        ))
    }
}

/// Guidance for one matricized unit (a layer, or the whole model).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGuidance<T> {
    /// `d x k`, orthonormal columns.
    pub basis: Tensor<T>,
    /// Diagonal of `V`, length `k`.
    pub scales: Vec<T>,
    /// Singular values `egv_i`, descending.
    pub eigenvalues: Vec<T>,
    pub layout: Matricization,
    /// The unit was all zeros and fell back to isotropic noise.
    pub isotropic_fallback: bool,
}

impl<T: Scalar> LayerGuidance<T> {
    /// Assembles guidance from explicit parts.
    pub fn from_parts(basis: Tensor<T>, scales: Vec<T>, eigenvalues: Vec<T>, layout: Matricization) -> Result<Self> {
        let (d, k) = basis.dims2()?;
        if d != layout.rows || k != layout.cols {
            return Err(Error::shape(format!(
                "basis is {d}x{k} but layout is {}x{}",
                layout.rows, layout.cols
            )));
        }
        if scales.len() != k || eigenvalues.len() != k {
            return Err(Error::shape("scale and eigenvalue vectors must have length k"));
        }
        if scales.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
            return Err(Error::validation("noise scales must be finite and nonnegative"));
        }
        let err = orthonormality_error(&basis)?;
        let tol = T::of(1e-8).max(T::tolerance_floor() * T::of(64.0));
        if err > tol {
            return Err(Error::validation(format!(
                "basis columns are not orthonormal (error {err})"
            )));
        }
        Ok(LayerGuidance {
            basis,
            scales,
            eigenvalues,
            layout,
            isotropic_fallback: false,
        })
    }

    pub fn rank(&self) -> usize {
        self.layout.cols
    }

    /// `Σ v_i²`.
    pub fn scale_energy(&self) -> T {
        self.scales.iter().map(|&v| v * v).sum()
    }

    /// `clip * B diag(v) N` with `N ∈ R^{k x k}` standard normal, as a `d x k` matrix.
    pub fn sample_matrix(&self, rng: &mut RngState, clip: T) -> Result<Tensor<T>> {
        let (d, k) = self.basis.dims2()?;
        if self.scales.iter().all(|&v| v == T::zero()) {
            return Ok(Tensor::zeros(&[d, k]));
        }
        // diag(v) N, row i scaled by v_i.
        let mut scaled = Tensor::zeros(&[k, k]);
        for i in 0..k {
            let v = self.scales[i] * clip;
            for j in 0..k {
                let z = T::of(rng.standard_normal());
                scaled.set(i, j, v * z);
            }
        }
        self.basis.matmul(&scaled)
    }

    /// Guided noise reshaped to the unit's original shape.
    pub fn sample(&self, rng: &mut RngState, clip: T) -> Result<Tensor<T>> {
        self.layout.restore(self.sample_matrix(rng, clip)?)
    }
}

/// Per-unit guidance `SVec = B V` for a whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseGuidance<T> {
    pub sigma: f64,
    pub scope: GuidanceScope,
    pub units: Vec<LayerGuidance<T>>,
    /// Parameter-tensor shapes of the model the guidance was computed for.
    pub layer_shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> NoiseGuidance<T> {
    pub fn from_units(sigma: f64, units: Vec<LayerGuidance<T>>, layer_shapes: Vec<Vec<usize>>) -> Result<Self> {
        if units.len() != layer_shapes.len() {
            return Err(Error::shape("one guidance unit per layer is required"));
        }
        for (u, s) in units.iter().zip(&layer_shapes) {
            if &u.layout.original_shape != s {
                return Err(Error::shape("guidance unit does not match layer shape"));
            }
        }
        Ok(NoiseGuidance {
            sigma,
            scope: GuidanceScope::Layer,
            units,
            layer_shapes,
        })
    }

    /// Checks that the guidance was built for a model with these parameter shapes.
    pub fn check_model(&self, model: &ModelState<T>) -> Result<()> {
        let shapes: Vec<Vec<usize>> = model.params().map(|t| t.shape().to_vec()).collect();
        if shapes != self.layer_shapes {
            return Err(Error::validation(
                "guidance was computed for a model with different layer shapes",
            ));
        }
        Ok(())
    }

    /// Smallest `v_i / sigma` over all units: the worst-case noise multiplier
    /// relative to isotropic calibration.
    pub fn min_scale_ratio(&self) -> f64 {
        if self.sigma <= 0.0 {
            return 0.0;
        }
        self.units
            .iter()
            .flat_map(|u| u.scales.iter())
            .map(|v| v.as_f64() / self.sigma)
            .fold(f64::INFINITY, f64::min)
    }

    /// Per-unit minimum `v_i / sigma`.
    pub fn min_scale_ratio_per_unit(&self) -> Vec<f64> {
        self.units
            .iter()
            .map(|u| {
                if self.sigma <= 0.0 {
                    0.0
                } else {
                    u.scales
                        .iter()
                        .map(|v| v.as_f64() / self.sigma)
                        .fold(f64::INFINITY, f64::min)
                }
            })
            .collect()
    }

    /// Analytic `E‖noise‖²` summed over units: `Σ_units (Σ_i v_i²) * k * clip²`.
    pub fn expected_energy(&self, clip: f64) -> f64 {
        self.units
            .iter()
            .map(|u| u.scale_energy().as_f64() * u.rank() as f64 * clip * clip)
            .sum()
    }

    /// Guided noise for every parameter tensor, in model layer order.
    pub fn sample_noise(&self, rng: &mut RngState, clip: T) -> Result<Grads<T>> {
        match self.scope {
            GuidanceScope::Layer => self.units.iter().map(|u| u.sample(rng, clip)).collect(),
            GuidanceScope::Model => {
                let unit = self.units.first().ok_or_else(|| Error::validation("empty guidance"))?;
                let flat = unit.sample(rng, clip)?.into_data();
                let mut out = Vec::with_capacity(self.layer_shapes.len());
                let mut offset = 0;
                for shape in &self.layer_shapes {
                    let n: usize = shape.iter().product();
                    out.push(Tensor::new(shape.clone(), flat[offset..offset + n].to_vec())?);
                    offset += n;
                }
                Ok(out)
            }
        }
    }
}

/// Noise for unit `layer_index`, shaped like that unit.
pub fn apply_guidance<T: Scalar>(
    guidance: &NoiseGuidance<T>,
    rng: &mut RngState,
    layer_index: usize,
    clip: T,
) -> Result<Tensor<T>> {
    let unit = guidance.units.get(layer_index).ok_or_else(|| {
        Error::shape(format!(
            "guidance has {} units, index {layer_index} requested",
            guidance.units.len()
        ))
    })?;
    unit.sample(rng, clip)
}

/// Builds guidance for one matricized unit.
pub fn guide_matrix<T: Scalar>(
    w: &Tensor<T>,
    layout: Matricization,
    sigma: f64,
    unit_seed: u64,
) -> Result<LayerGuidance<T>> {
    if !w.is_finite() {
        return Err(Error::validation("parameters contain non-finite values"));
    }
    let (d, k) = w.dims2()?;
    let sigma_t = T::of(sigma);
    let g = gram(w)?;
    let eig = sym_eigen(&g, T::of(1e-9).max(T::tolerance_floor()))?;
    let lambda_max = eig.eigenvalues[0].max(T::zero());

    if lambda_max == T::zero() {
        let mut basis = Tensor::zeros(&[d, k]);
        for i in 0..k {
            basis.set(i, i, T::one());
        }
        return Ok(LayerGuidance {
            basis,
            scales: vec![sigma_t; k],
            eigenvalues: vec![T::zero(); k],
            layout,
            isotropic_fallback: true,
        });
    }

    let threshold = T::of(RANK_EPS) * lambda_max;
    let keep: Vec<bool> = eig.eigenvalues.iter().map(|&l| l > threshold).collect();
    let egv: Vec<T> = eig
        .eigenvalues
        .iter()
        .zip(&keep)
        .map(|(&l, &kept)| if kept { l.max(T::zero()).sqrt() } else { T::zero() })
        .collect();

    // B = W U diag(1/egv) on retained columns.
    let wu = w.matmul(&eig.eigenvectors)?;
    let mut basis = Tensor::zeros(&[d, k]);
    for j in 0..k {
        if keep[j] {
            let inv = T::one() / egv[j];
            for r in 0..d {
                basis.set(r, j, wu.at(r, j) * inv);
            }
        }
    }
    reorthonormalize(&mut basis, &keep);
    let mut completion_rng = RngState::new(unit_seed);
    complete_orthonormal(&mut basis, &keep, &mut completion_rng)?;

    let total: T = egv.iter().map(|&e| e * e).sum();
    let factor = T::of((k as f64).sqrt()) * sigma_t / total.sqrt();
    let scales = egv.iter().map(|&e| e * factor).collect();
    Ok(LayerGuidance {
        basis,
        scales,
        eigenvalues: egv,
        layout,
        isotropic_fallback: false,
    })
}

/// Modified Gram-Schmidt (two passes) over the columns flagged in `keep`, in order.
fn reorthonormalize<T: Scalar>(basis: &mut Tensor<T>, keep: &[bool]) {
    let (d, k) = (basis.shape()[0], basis.shape()[1]);
    let cols: Vec<usize> = (0..k).filter(|&j| keep[j]).collect();
    // Work on contiguous column vectors.
    let mut vecs: Vec<Vec<T>> = cols.iter().map(|&j| (0..d).map(|r| basis.at(r, j)).collect()).collect();
    for _ in 0..2 {
        for pos in 0..vecs.len() {
            let (done, rest) = vecs.split_at_mut(pos);
            let v = &mut rest[0];
            for prev in done.iter() {
                let dot: T = prev.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &p) in v.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
            let norm: T = v.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm > T::zero() {
                for x in v.iter_mut() {
                    *x /= norm;
                }
            }
        }
    }
    for (v, &j) in vecs.iter().zip(&cols) {
        for (r, &x) in v.iter().enumerate() {
            basis.set(r, j, x);
        }
    }
}

/// Splits `n` into `d x k` with `k` the largest divisor of `n` not exceeding `sqrt(n)`.
fn near_square_split(n: usize) -> (usize, usize) {
    let mut k = (n as f64).sqrt().floor() as usize;
    while k > 1 && !n.is_multiple_of(k) {
        k -= 1;
    }
    let k = k.max(1);
    (n / k, k)
}

/// Computes guidance from the current model parameters.
pub fn compute_guidance<T: Scalar>(
    model: &ModelState<T>,
    sigma: f64,
    scope: GuidanceScope,
) -> Result<NoiseGuidance<T>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::validation(format!(
            "sigma must be finite and nonnegative, got {sigma}"
        )));
    }
    let layer_shapes: Vec<Vec<usize>> = model.params().map(|t| t.shape().to_vec()).collect();
    let units = match scope {
        GuidanceScope::Layer => model
            .params()
            .enumerate()
            .map(|(i, p)| {
                let (m, layout) = matricize(p)?;
                guide_matrix(&m, layout, sigma, 0x6775_6964 ^ i as u64)
            })
            .collect::<Result<Vec<_>>>()?,
        GuidanceScope::Model => {
            let flat = model.flat_params();
            let n = flat.len();
            let (d, k) = near_square_split(n);
            let m = Tensor::new(vec![d, k], flat)?;
            let layout = Matricization {
                original_shape: vec![n],
                rows: d,
                cols: k,
                transposed: false,
            };
            vec![guide_matrix(&m.reshape(&[d, k])?, layout, sigma, 0x6d_6f64_656c)?]
        }
    };
    Ok(NoiseGuidance {
        sigma,
        scope,
        units,
        layer_shapes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(d: usize, k: usize) -> Matricization {
        Matricization {
            original_shape: vec![d, k],
            rows: d,
            cols: k,
            transposed: false,
        }
    }

    #[test]
    fn matricize_orientation_rules() {
        let (m, l) = matricize(&Tensor::<f64>::zeros(&[256, 784])).unwrap();
        assert_eq!(m.shape(), &[784, 256]);
        assert!(l.transposed);
        let (m, l) = matricize(&Tensor::<f64>::zeros(&[32, 1, 5, 5])).unwrap();
        assert_eq!(m.shape(), &[32, 25]);
        assert!(!l.transposed);
        let (m, _) = matricize(&Tensor::<f64>::zeros(&[10])).unwrap();
        assert_eq!(m.shape(), &[10, 1]);
    }

    #[test]
    fn restore_inverts_matricize() {
        let t = Tensor::<f64>::from_fn(&[4, 3, 2, 2], |i| i as f64);
        let (m, l) = matricize(&t).unwrap();
        assert_eq!(m.shape(), &[12, 4]);
        assert_eq!(l.restore(m).unwrap(), t);
    }

    #[test]
    fn identity_layer_is_isotropic() {
        let g = guide_matrix(&Tensor::<f64>::eye(4), layout(4, 4), 1.5, 1).unwrap();
        for (&e, &v) in g.eigenvalues.iter().zip(&g.scales) {
            assert!((e - 1.0).abs() < 1e-12);
            assert!((v - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_layer_scales() {
        let w = Tensor::<f64>::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let g = guide_matrix(&w, layout(2, 2), 1.0, 1).unwrap();
        assert!((g.eigenvalues[0] - 2.0).abs() < 1e-12);
        assert!((g.eigenvalues[1] - 1.0).abs() < 1e-12);
        assert!((g.scales[0] / g.scales[1] - 2.0).abs() < 1e-12);
        assert!((g.basis.at(0, 0).abs() - 1.0).abs() < 1e-12);
        assert!((g.basis.at(1, 1).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scale_formula_for_given_singular_values() {
        // Singular values 4 and 3 via a diagonal matrix.
        let w = Tensor::<f64>::from_rows(&[vec![4.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let g = guide_matrix(&w, layout(2, 2), 1.0, 1).unwrap();
        let r2 = 2f64.sqrt();
        assert!((g.scales[0] - 4.0 * r2 / 5.0).abs() < 1e-12);
        assert!((g.scales[1] - 3.0 * r2 / 5.0).abs() < 1e-12);
        assert!((g.scale_energy() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_layer_falls_back_to_isotropic() {
        let g = guide_matrix(&Tensor::<f64>::zeros(&[5, 2]), layout(5, 2), 0.7, 1).unwrap();
        assert!(g.isotropic_fallback);
        assert_eq!(g.scales, vec![0.7, 0.7]);
        assert!(orthonormality_error(&g.basis).unwrap() < 1e-15);
    }

    #[test]
    fn rank_deficient_layer_completes_basis() {
        // Rank one: second column is a multiple of the first.
        let w = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![0.5, 1.0]]).unwrap();
        let g = guide_matrix(&w, layout(3, 2), 2.0, 9).unwrap();
        assert!(orthonormality_error(&g.basis).unwrap() < 1e-10);
        assert_eq!(g.scales[1], 0.0);
        assert!((g.scale_energy() - 2.0 * 4.0).abs() < 1e-10);
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let mut w = Tensor::<f64>::zeros(&[2, 2]);
        w.data_mut()[0] = f64::NAN;
        assert!(matches!(
            guide_matrix(&w, layout(2, 2), 1.0, 1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn zero_sigma_gives_zero_noise() {
        let w = Tensor::<f64>::from_rows(&[vec![2.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let g = guide_matrix(&w, layout(2, 2), 0.0, 1).unwrap();
        let n = g.sample(&mut RngState::new(1), 1.0).unwrap();
        assert!(n.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_scale_direction_gets_no_noise() {
        let g = LayerGuidance::from_parts(Tensor::<f64>::eye(2), vec![2.0, 0.0], vec![1.0, 0.0], layout(2, 2)).unwrap();
        let n = g.sample_matrix(&mut RngState::new(3), 1.0).unwrap();
        assert!(n.row(1).iter().all(|&x| x == 0.0));
        assert!(n.row(0).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn from_parts_validates() {
        let bad = Tensor::<f64>::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(LayerGuidance::from_parts(bad, vec![1.0, 1.0], vec![1.0, 1.0], layout(2, 2)).is_err());
        assert!(
            LayerGuidance::from_parts(Tensor::<f64>::eye(2), vec![-1.0, 1.0], vec![1.0, 1.0], layout(2, 2)).is_err()
        );
    }

    #[test]
    fn near_square_split_divides() {
        assert_eq!(near_square_split(12), (4, 3));
        assert_eq!(near_square_split(13), (13, 1));
        assert_eq!(near_square_split(100), (10, 10));
    }
}
