use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};
use crate::scalar::Scalar;

/// Sweep cap for cyclic Jacobi.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Convergence threshold on the off-diagonal Frobenius norm, relative to `‖A‖_F`.
pub const JACOBI_OFF_DIAGONAL_TOL: f64 = 1e-12;

/// Eigenpairs of a symmetric matrix.
///
/// `eigenvalues` are sorted in descending order and column `i` of
/// `eigenvectors` pairs with `eigenvalues[i]`. Each column is signed so its
/// largest-magnitude entry is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult<T> {
    pub eigenvalues: Vec<T>,
    pub eigenvectors: Tensor<T>,
}

impl<T: Scalar> EigenResult<T> {
    /// `Q Λ Qᵀ`.
    pub fn reconstruct(&self) -> Tensor<T> {
        let n = self.eigenvalues.len();
        let q = &self.eigenvectors;
        Tensor::from_fn(&[n, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..n).map(|p| q.at(i, p) * self.eigenvalues[p] * q.at(j, p)).sum()
        })
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.matmul(b)
}

pub fn l2_norm<T: Scalar>(t: &Tensor<T>) -> T {
    t.l2_norm()
}

/// `AᵀA` for a `d x k` matrix.
pub fn gram<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, k) = a.dims2()?;
    let mut g = Tensor::zeros(&[k, k]);
    let data = a.data();
    for r in 0..d {
        let row = &data[r * k..(r + 1) * k];
        for i in 0..k {
            let ri = row[i];
            if ri == T::zero() {
                continue;
            }
            let g_row = &mut g.data_mut()[i * k..(i + 1) * k];
            for (o, &x) in g_row[i..].iter_mut().zip(&row[i..]) {
                *o += ri * x;
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            let v = g.at(j, i);
            g.set(i, j, v);
        }
    }
    Ok(g)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// `tol` bounds the accepted asymmetry `|a_ij - a_ji| <= tol * max(1, ‖A‖_max)`.
pub fn sym_eigen<T: Scalar>(a: &Tensor<T>, tol: T) -> Result<EigenResult<T>> {
    let (n, n2) = a.dims2()?;
    if n != n2 {
        return Err(Error::shape(format!(
            "eigendecomposition needs a square matrix, got {n}x{n2}"
        )));
    }
    if n == 0 {
        return Err(Error::validation("eigendecomposition of an empty matrix"));
    }
    if !a.is_finite() {
        return Err(Error::validation("matrix contains non-finite values"));
    }
    let scale_max = a.max_abs().max(T::one());
    for i in 0..n {
        for j in (i + 1)..n {
            let asym = (a.at(i, j) - a.at(j, i)).abs();
            if asym > tol * scale_max {
                return Err(Error::validation(format!(
                    "matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {asym}"
                )));
            }
        }
    }

    // Symmetrize the working copy so rotations act on an exactly symmetric matrix.
    let mut w = Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (a.at(i, j) + a.at(j, i)) * T::of(0.5)
    });
    // Row i of `vt` is the i-th eigenvector, so rotations touch contiguous rows.
    let mut vt = Tensor::<T>::eye(n);

    let frob = w.l2_norm();
    let off_tol = T::of(JACOBI_OFF_DIAGONAL_TOL).max(T::tolerance_floor()) * frob;
    let mut converged = frob == T::zero();
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let off = off_diagonal_norm(&w);
        if off <= off_tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(w.data_mut(), vt.data_mut(), n, p, q);
            }
        }
    }
    if !converged {
        let off = off_diagonal_norm(&w);
        if off > off_tol {
            return Err(Error::Numeric {
                message: format!("Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps"),
                residual: off.as_f64(),
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: equal eigenvalues keep their index order.
    order.sort_by(|&i, &j| w.at(j, j).partial_cmp(&w.at(i, i)).expect("finite eigenvalues"));

    let eigenvalues: Vec<T> = order.iter().map(|&i| w.at(i, i)).collect();
    let mut q = Tensor::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        let vec = vt.row(src);
        for r in 0..n {
            if vec[r].abs() > vec[pivot].abs() {
                pivot = r;
            }
        }
        let sign = if vec[pivot] < T::zero() { -T::one() } else { T::one() };
        for (r, &x) in vec.iter().enumerate() {
            q.set(r, col, sign * x);
        }
    }
    Ok(EigenResult {
        eigenvalues,
        eigenvectors: q,
    })
}

fn off_diagonal_norm<T: Scalar>(w: &Tensor<T>) -> T {
    let n = w.shape()[0];
    let mut s = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            let x = w.at(i, j);
            s += x * x;
        }
    }
    (s + s).sqrt()
}

/// One Jacobi rotation zeroing `w[p][q]` (row-major `n x n`), accumulated
/// into the eigenvector rows `vt`. Requires `p < q`.
fn rotate<T: Scalar>(w: &mut [T], vt: &mut [T], n: usize, p: usize, q: usize) {
    let apq = w[p * n + q];
    if apq == T::zero() {
        return;
    }
    let app = w[p * n + p];
    let aqq = w[q * n + q];
    let theta = (aqq - app) / (apq + apq);
    let t = if theta.abs() > T::of(1e100).min(T::max_value().sqrt()) {
        T::one() / (theta + theta)
    } else {
        let r = (theta * theta + T::one()).sqrt();
        if theta >= T::zero() {
            T::one() / (theta + r)
        } else {
            -T::one() / (-theta + r)
        }
    };
    let c = T::one() / (t * t + T::one()).sqrt();
    let s = t * c;

    // Update rows p and q (contiguous), then mirror them into columns p and q.
    {
        let (head, tail) = w.split_at_mut(q * n);
        let row_p = &mut head[p * n..(p + 1) * n];
        let row_q = &mut tail[..n];
        for (x, y) in row_p.iter_mut().zip(row_q.iter_mut()) {
            let (xp, xq) = (*x, *y);
            *x = c * xp - s * xq;
            *y = s * xp + c * xq;
        }
        row_p[p] = app - t * apq;
        row_q[q] = aqq + t * apq;
        row_p[q] = T::zero();
        row_q[p] = T::zero();
    }
    for r in 0..n {
        if r != p && r != q {
            w[r * n + p] = w[p * n + r];
            w[r * n + q] = w[q * n + r];
        }
    }

    let (head, tail) = vt.split_at_mut(q * n);
    let vp = &mut head[p * n..(p + 1) * n];
    let vq = &mut tail[..n];
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Replaces the columns of `basis` flagged `false` in `keep` with unit vectors
/// orthogonal to every other column, built by Gram-Schmidt on random draws.
pub fn complete_orthonormal<T: Scalar>(basis: &mut Tensor<T>, keep: &[bool], rng: &mut RngState) -> Result<()> {
    let (d, k) = basis.dims2()?;
    if keep.len() != k {
        return Err(Error::shape("keep mask length differs from column count"));
    }
    if k > d {
        return Err(Error::shape(format!(
            "cannot fit {k} orthonormal columns in dimension {d}"
        )));
    }
    let mut done: Vec<usize> = (0..k).filter(|&j| keep[j]).collect();
    for j in (0..k).filter(|&j| !keep[j]) {
        let mut filled = false;
        for _attempt in 0..64 {
            let mut x: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            // Two Gram-Schmidt passes for numerical orthogonality.
            for _ in 0..2 {
                for &c in &done {
                    let dot: f64 = (0..d).map(|r| basis.at(r, c).as_f64() * x[r]).sum();
                    for (r, xr) in x.iter_mut().enumerate() {
                        *xr -= dot * basis.at(r, c).as_f64();
                    }
                }
            }
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for (r, xr) in x.iter().enumerate() {
                    basis.set(r, j, T::of(xr / norm));
                }
                done.push(j);
                filled = true;
                break;
            }
        }
        if !filled {
            return Err(Error::Numeric {
                message: "orthonormal completion failed".into(),
                residual: 0.0,
            });
        }
    }
    Ok(())
}

/// `max |QᵀQ - I|` over a `d x k` matrix with (nominally) orthonormal columns.
pub fn orthonormality_error<T: Scalar>(q: &Tensor<T>) -> Result<T> {
    let g = gram(q)?;
    let k = g.shape()[0];
    let mut worst = T::zero();
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((g.at(i, j) - target).abs());
        }
    }
    Ok(worst)
}
