//! Dense complex linear algebra helpers built on nalgebra.
//!
//! Tall evaluation matrices are kept as split real/imaginary parts so that
//! weighted Gram-type products run through the fast real GEMM kernel.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Complex matrix stored as two real matrices.
#[derive(Clone, Debug)]
pub struct ZMat {
    pub re: DMatrix<f64>,
    pub im: DMatrix<f64>,
}

impl ZMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ZMat { re: DMatrix::zeros(rows, cols), im: DMatrix::zeros(rows, cols) }
    }

    pub fn nrows(&self) -> usize {
        self.re.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.re.ncols()
    }

    pub fn get(&self, i: usize, j: usize, conj: bool) -> C64 {
        let s = if conj { -1.0 } else { 1.0 };
        C64::new(self.re[(i, j)], s * self.im[(i, j)])
    }

    pub fn set(&mut self, i: usize, j: usize, v: C64) {
        self.re[(i, j)] = v.re;
        self.im[(i, j)] = v.im;
    }

    /// `E x` (or `conj(E) x`).
    pub fn mul_vec(&self, x: &[C64], conj: bool) -> Vec<C64> {
        let s = if conj { -1.0 } else { 1.0 };
        let xr = DVector::from_iterator(x.len(), x.iter().map(|z| z.re));
        let xi = DVector::from_iterator(x.len(), x.iter().map(|z| z.im));
        let a = &self.re * &xr;
        let b = &self.im * &xi;
        let cc = &self.re * &xi;
        let d = &self.im * &xr;
        (0..self.nrows()).map(|k| C64::new(a[k] - s * b[k], cc[k] + s * d[k])).collect()
    }

    /// `E^H diag(w) y` (with `E` optionally conjugated first).
    pub fn adj_mul_vec(&self, w: &[f64], y: &[C64], conj: bool) -> CVec {
        let s = if conj { -1.0 } else { 1.0 };
        let yr = DVector::from_iterator(y.len(), y.iter().zip(w).map(|(z, w)| z.re * w));
        let yi = DVector::from_iterator(y.len(), y.iter().zip(w).map(|(z, w)| z.im * w));
        let a = self.re.tr_mul(&yr);
        let b = self.im.tr_mul(&yi);
        let cc = self.re.tr_mul(&yi);
        let d = self.im.tr_mul(&yr);
        CVec::from_iterator(self.ncols(), (0..self.ncols()).map(|k| C64::new(a[k] + s * b[k], cc[k] - s * d[k])))
    }

    /// `E^H diag(w) T` for an unconjugated `T`.
    pub fn adj_mul(&self, w: &[f64], t: &ZMat, conj: bool) -> CMat {
        let s = if conj { -1.0 } else { 1.0 };
        let mut tr = t.re.clone();
        let mut ti = t.im.clone();
        for (k, wk) in w.iter().enumerate() {
            tr.row_mut(k).scale_mut(*wk);
            ti.row_mut(k).scale_mut(*wk);
        }
        // real factors are common (order 0, real samples); skip their zero halves
        let prod = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
            if is_zero(x) || is_zero(y) {
                DMatrix::zeros(x.ncols(), y.ncols())
            } else {
                x.tr_mul(y)
            }
        };
        let a = prod(&self.re, &tr);
        let b = prod(&self.im, &ti);
        let cc = prod(&self.re, &ti);
        let d = prod(&self.im, &tr);
        CMat::from_fn(a.nrows(), a.ncols(), |i, j| C64::new(a[(i, j)] + s * b[(i, j)], cc[(i, j)] - s * d[(i, j)]))
    }
}

fn is_zero(x: &DMatrix<f64>) -> bool {
    x.iter().all(|v| *v == 0.0)
}

pub fn cvec(v: Vec<C64>) -> CVec {
    CVec::from_vec(v)
}

/// Solve `A x = b` by LU; fails on (numerically) singular `A`.
pub fn solve(a: &CMat, b: &CVec) -> Result<CVec> {
    a.clone().lu().solve(b).ok_or_else(|| Error::Singular("LU solve".into()))
}

pub fn solve_mat(a: &CMat, b: &CMat) -> Result<CMat> {
    a.clone().lu().solve(b).ok_or_else(|| Error::Singular("LU solve".into()))
}

/// Singular values, descending.
pub fn singular_values(a: &CMat) -> Vec<f64> {
    let sv = a.clone().svd(false, false).singular_values;
    let mut v: Vec<f64> = sv.iter().copied().collect();
    v.sort_by(|x, y| y.partial_cmp(x).unwrap());
    v
}

pub fn min_singular_value(a: &CMat) -> f64 {
    singular_values(a).last().copied().unwrap_or(0.0)
}

pub fn cond(a: &CMat) -> f64 {
    let s = singular_values(a);
    match (s.first(), s.last()) {
        (Some(a), Some(b)) if *b > 0.0 => a / b,
        _ => f64::INFINITY,
    }
}

pub fn norm2(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Eigen-decomposition of a small dense complex matrix via the Schur form:
/// returns eigenvalues and (unit-norm) eigenvectors as columns.
pub fn eig_dense(a: &CMat) -> Result<(Vec<C64>, CMat)> {
    let n = a.nrows();
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::NoConvergence("Schur decomposition".into()))?;
    let (q, t) = schur.unpack();
    let vals: Vec<C64> = (0..n).map(|i| t[(i, i)]).collect();
    let mut y = CMat::zeros(n, n);
    let scale = t.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
    for k in 0..n {
        y[(k, k)] = C64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut s = C64::new(0.0, 0.0);
            for j in i + 1..=k {
                s += t[(i, j)] * y[(j, k)];
            }
            let mut d = t[(i, i)] - vals[k];
            if d.norm() < 1e-14 * scale {
                d = C64::new(1e-14 * scale, 0.0);
            }
            y[(i, k)] = -s / d;
        }
    }
    let mut v = q * y;
    for k in 0..n {
        let nrm = v.column(k).norm();
        if nrm > 0.0 {
            v.column_mut(k).unscale_mut(nrm);
        }
    }
    Ok((vals, v))
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Restarted GMRES for a real operator given as a closure, with right
/// preconditioning folded into `apply` by the caller. Returns the solution
/// and the final relative residual.
pub fn gmres<F>(mut apply: F, b: &DVector<f64>, tol: f64, restart: usize, max_iter: usize) -> Result<(DVector<f64>, f64)>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = b.len();
    let bn = b.norm();
    let mut x = DVector::zeros(n);
    if bn == 0.0 {
        return Ok((x, 0.0));
    }
    let mut rel = 1.0;
    let mut used = 0;
    while used < max_iter {
        let r = if used == 0 { b.clone() } else { b - apply(&x)? };
        let beta = r.norm();
        rel = beta / bn;
        if rel <= tol {
            break;
        }
        let m = restart.min(max_iter - used).max(1);
        let mut v: Vec<DVector<f64>> = vec![r / beta];
        let mut h = DMatrix::<f64>::zeros(m + 1, m);
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = DVector::<f64>::zeros(m + 1);
        g[0] = beta;
        let mut k_done = 0;
        for k in 0..m {
            let mut w = apply(&v[k])?;
            for _ in 0..2 {
                for (i, vi) in v.iter().enumerate() {
                    let hij = vi.dot(&w);
                    h[(i, k)] += hij;
                    w -= vi * hij;
                }
            }
            let hn = w.norm();
            h[(k + 1, k)] = hn;
            for i in 0..k {
                let t = cs[i] * h[(i, k)] + sn[i] * h[(i + 1, k)];
                h[(i + 1, k)] = -sn[i] * h[(i, k)] + cs[i] * h[(i + 1, k)];
                h[(i, k)] = t;
            }
            let den = h[(k, k)].hypot(h[(k + 1, k)]);
            if den == 0.0 {
                k_done = k;
                break;
            }
            cs[k] = h[(k, k)] / den;
            sn[k] = h[(k + 1, k)] / den;
            h[(k, k)] = den;
            h[(k + 1, k)] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_done = k + 1;
            used += 1;
            if g[k + 1].abs() / bn <= tol || hn == 0.0 {
                break;
            }
            v.push(w / hn);
        }
        if k_done == 0 {
            break;
        }
        let mut y = DVector::<f64>::zeros(k_done);
        for i in (0..k_done).rev() {
            let mut s = g[i];
            for j in i + 1..k_done {
                s -= h[(i, j)] * y[j];
            }
            y[i] = s / h[(i, i)];
        }
        for (i, yi) in y.iter().enumerate() {
            x += &v[i] * *yi;
        }
    }
    let _ = rel;
    let r = b - apply(&x)?;
    Ok((x, r.norm() / bn))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_products_match_complex() {
        let e = ZMat {
            re: DMatrix::from_fn(5, 3, |i, j| (i + 2 * j) as f64 * 0.3 - 1.0),
            im: DMatrix::from_fn(5, 3, |i, j| ((i * j) as f64).sin()),
        };
        let full = CMat::from_fn(5, 3, |i, j| e.get(i, j, false));
        let x = vec![c(1.0, 2.0), c(-0.5, 0.1), c(0.0, -1.0)];
        let w = vec![1.0, 2.0, 0.5, 3.0, 1.5];
        for conj in [false, true] {
            let f = if conj { full.map(|z| z.conj()) } else { full.clone() };
            let y = e.mul_vec(&x, conj);
            let yy = &f * CVec::from_vec(x.clone());
            for k in 0..5 {
                assert!((y[k] - yy[k]).norm() < 1e-14);
            }
            let z = e.adj_mul_vec(&w, &y, conj);
            let wd = CMat::from_diagonal(&CVec::from_iterator(5, w.iter().map(|v| c(*v, 0.0))));
            let zz = f.adjoint() * &wd * CVec::from_vec(y.clone());
            assert!((z - zz).norm() < 1e-12);
            let t = ZMat { re: e.re.clone() * 0.5, im: e.im.clone() * -2.0 };
            let tf = CMat::from_fn(5, 3, |i, j| t.get(i, j, false));
            let g = e.adj_mul(&w, &t, conj);
            assert!((g - f.adjoint() * &wd * tf).norm() < 1e-12);
        }
    }

    #[test]
    fn gmres_solves_nonsymmetric_system() {
        let a = DMatrix::from_fn(30, 30, |i, j| if i == j { 4.0 + i as f64 * 0.1 } else { ((i * 3 + j * 5) % 7) as f64 * 0.05 - 0.15 });
        let b = DVector::from_fn(30, |i, _| (i as f64).cos());
        let (x, rel) = gmres(|v| Ok(&a * v), &b, 1e-12, 8, 300).unwrap();
        assert!(rel < 1e-11, "{rel}");
        assert!((&a * x - b).norm() < 1e-10);
    }

    #[test]
    fn dense_eigenpairs() {
        let a = CMat::from_fn(6, 6, |i, j| c(((i * 7 + j * 3) % 5) as f64 - 2.0, (i as f64 - j as f64) * 0.1));
        let (vals, vecs) = eig_dense(&a).unwrap();
        for k in 0..6 {
            let v = vecs.column(k).into_owned();
            let r = &a * &v - v.clone() * vals[k];
            assert!(r.norm() < 1e-10, "residual {}", r.norm());
        }
    }
}
