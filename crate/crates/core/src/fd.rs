//! Finite-difference ground truth and a symmetric eigensolver.

use crate::error::{Error, Result};
use crate::linalg::Mat64;

pub const DEFAULT_GRAD_STEP: f64 = 1e-5;
pub const DEFAULT_HESSIAN_STEP: f64 = 1e-3;
pub const MAX_HESSIAN_DIM: usize = 256;
const SYMMETRY_TOL: f64 = 1e-8;

/// Central differences `(f(s + h eᵢ) - f(s - h eᵢ)) / 2h`.
pub fn fd_gradient<F>(f: F, s: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut x = s.to_vec();
    Ok((0..s.len())
        .map(|i| {
            x[i] = s[i] + h;
            let fp = f(&x);
            x[i] = s[i] - h;
            let fm = f(&x);
            x[i] = s[i];
            (fp - fm) / (2.0 * h)
        })
        .collect())
}

/// Second central differences, symmetrized as `(H + Hᵀ)/2`.
pub fn fd_hessian<F>(f: F, s: &[f64], h: f64) -> Result<Mat64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let n = s.len();
    if n > MAX_HESSIAN_DIM {
        return Err(Error::HessianTooLarge {
            dim: n,
            max: MAX_HESSIAN_DIM,
        });
    }
    let f0 = f(s);
    let mut x = s.to_vec();
    let mut hess = Mat64::zeros(n, n);
    for i in 0..n {
        x[i] = s[i] + h;
        let fp = f(&x);
        x[i] = s[i] - h;
        let fm = f(&x);
        x[i] = s[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in (i + 1)..n {
            let mut eval = |di: f64, dj: f64| {
                x[i] = s[i] + di;
                x[j] = s[j] + dj;
                let v = f(&x);
                x[i] = s[i];
                x[j] = s[j];
                v
            };
            let pp = eval(h, h);
            let pm = eval(h, -h);
            let mp = eval(-h, h);
            let mm = eval(-h, -h);
            let v = (pp - pm - mp + mm) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    // The stencil is already symmetric; the explicit average keeps the
    // contract even if the fill order above changes.
    let t = hess.transpose();
    for (a, b) in hess.as_mut_slice().iter_mut().zip(t.as_slice()) {
        *a = 0.5 * (*a + b);
    }
    Ok(hess)
}

/// All eigenvalues of a symmetric matrix via cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(h: &Mat64) -> Result<Vec<f64>> {
    if !h.is_square() {
        return Err(Error::InvalidArgument("eigenvalues need a square matrix".into()));
    }
    let scale = h.norm().max(1.0);
    let asym = h.max_asymmetry();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let n = h.rows();
    let mut a = h.clone();
    for sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[(p, q)] * a[(p, q)])
            .sum();
        if off.sqrt() <= 1e-15 * scale || (sweep > 0 && off == 0.0) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(h: &Mat64) -> Result<f64> {
    Ok(symmetric_eigenvalues(h)?[0])
}
