//! Bifurcating time-periodic branches.
//!
//! The engine solves, for each amplitude `ε`, the split system
//!
//! ```text
//! L1 v = N1(v, w, μ),      ζ ∂s w + L2 w = N2(v, w, μ),
//! ⟨w, w1⟩ = ε,             ⟨w, ∂s w1⟩ = 0,
//! ```
//!
//! with `w1 = Re[w0 e^{−is}]`, `L2 w0 = iζ0 B w0`, `w` truncated to
//! `w = Σ_{k=1..K} ŵ_k e^{iks} + c.c.`, and `⟨a, b⟩` the time average of the
//! `B`-inner product. Operators are weak matrices: a mode-`k` equation
//! reads `(ikζ B + L2) ŵ_k = N2_k`. Unknowns `(v, w, ζ, μ)` are found by
//! Newton's method on the bordered system (dense finite-difference
//! Jacobian for small problems, preconditioned GMRES otherwise).

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::discretization::{mirror_sign, CoupledField, Discretization};
use crate::error::{Error, Result};
use crate::forms::{conv_sum, conv_vec, FieldSamples};
use crate::linalg::{c, gmres, min_singular_value, CMat, CVec, C64, I};
use crate::linop::{assemble, BlockOperator, CriticalPoint, OpKind};
use crate::periodic::PeriodicField;
use crate::spaces::PhysicalParams;
use crate::steady::{branch_tangent, steady_residual, steady_solve, SteadyState};

/// A bifurcation problem in split mean/oscillatory form.
///
/// `nonlinear` must vanish to second order at the origin (terms `μw`
/// count as second order) and must be safe to call concurrently.
pub trait AbstractProblem: Sync {
    /// Real dimension of the mean part `v`.
    fn n_mean(&self) -> usize;
    /// Complex dimension of one Fourier coefficient of `w`.
    fn n_osc(&self) -> usize;
    fn k_max(&self) -> usize;
    /// Matrix of `L1` on the mean part.
    fn l1_matrix(&self) -> DMatrix<f64>;
    /// Weak matrix of `L2` (complexified real operator).
    fn l2_matrix(&self) -> CMat;
    /// Weight `B` of the time derivative; also defines `⟨a, b⟩ = b^H B a`.
    fn mass_matrix(&self) -> CMat;
    /// Coefficients of the complex-conjugate field.
    fn conj(&self, a: &CVec) -> CVec {
        a.map(|z| z.conj())
    }
    /// `(N1, [N2_k, k = 1..K])` for `w` given by its positive modes.
    fn nonlinear(&self, v: &DVector<f64>, w: &[CVec], mu: f64) -> Result<(DVector<f64>, Vec<CVec>)>;
    /// `∂L2/∂μ` at `μ = 0` (weak), when available.
    fn s011(&self, _w: &CVec) -> Option<CVec> {
        None
    }
    fn zeta0(&self) -> f64;
    /// Critical eigenvector, `L2 w0 = iζ0 B w0`.
    fn w0(&self) -> CVec;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HopfSettings {
    pub eps_min: f64,
    pub eps_max: f64,
    pub n_eps: usize,
    /// Absolute tolerance on the residual (max norm).
    pub tol: f64,
    pub max_newton: usize,
    /// Up to this many unknowns the Jacobian is formed densely.
    pub dense_limit: usize,
}

impl Default for HopfSettings {
    fn default() -> Self {
        HopfSettings { eps_min: 1e-3, eps_max: 0.3, n_eps: 8, tol: 1e-11, max_newton: 40, dense_limit: 64 }
    }
}

impl HopfSettings {
    /// Positive amplitudes, geometric from `eps_min` to `eps_max`.
    pub fn grid(&self) -> Vec<f64> {
        if self.n_eps <= 1 {
            return vec![self.eps_max];
        }
        let r = (self.eps_max / self.eps_min).powf(1.0 / (self.n_eps - 1) as f64);
        (0..self.n_eps).map(|k| self.eps_min * r.powi(k as i32)).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HopfPoint {
    pub eps: f64,
    pub mu: f64,
    pub zeta: f64,
    pub v: Vec<f64>,
    /// Positive Fourier modes `ŵ_1..ŵ_K`.
    pub w: Vec<Vec<C64>>,
    pub residual_mean: f64,
    pub residual_osc: f64,
    pub residual_constraints: f64,
    pub newton_iterations: usize,
    /// `‖w/ε − w1‖ / ‖w1‖` (zero at ε = 0 by convention).
    pub w1_deviation: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HypothesisChecks {
    /// `‖(L2 − iζ0 B) w0‖ / ‖B w0‖`.
    pub eigen_residual: f64,
    /// Smallest singular value of `L1` (infinite when there is no mean part).
    pub l1_min_singular: f64,
    /// `(k, σ_min(ikζ0 B + L2)/‖B‖)` for `k = 2..K`.
    pub resonance: Vec<(usize, f64)>,
    /// `dν/dμ` from `S011` and the adjoint eigenvector, if available.
    pub dnu_dmu: Option<C64>,
    pub ok: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HopfBranch {
    pub lambda_c: Option<f64>,
    pub zeta0: f64,
    /// Sorted by `ε`, symmetric about 0.
    pub points: Vec<HopfPoint>,
    pub parity_mu: f64,
    pub parity_zeta: f64,
    /// Least-squares `μ ≈ μ2 ε² + μ4 ε⁴` over the three smallest `ε > 0`.
    pub mu2: f64,
    pub supercritical: bool,
    /// Slope of `log|μ − μ2 ε²|` against `log ε`; `None` when the deviation
    /// is at rounding level everywhere.
    pub quadratic_law_exponent: Option<f64>,
    pub truncated: Option<String>,
    pub checks: HypothesisChecks,
}

impl HopfBranch {
    pub fn csv_header() -> &'static str {
        "eps,mu,zeta,residual_mean,residual_osc,residual_constraints,newton_iterations,w1_deviation"
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(Self::csv_header());
        s.push('\n');
        for p in &self.points {
            s += &format!(
                "{:.12e},{:.12e},{:.12e},{:.3e},{:.3e},{:.3e},{},{:.3e}\n",
                p.eps, p.mu, p.zeta, p.residual_mean, p.residual_osc, p.residual_constraints, p.newton_iterations, p.w1_deviation
            );
        }
        s
    }

    pub fn max_residual(&self) -> f64 {
        self.points.iter().map(|p| p.residual_mean.max(p.residual_osc).max(p.residual_constraints)).fold(0.0, f64::max)
    }
}

/// Samples `w(s_j) = Σ_k ŵ_k e^{iks_j} + c.c.` at `s_j = 2πj/n`.
pub fn synthesize(modes: &[CVec], conj: impl Fn(&CVec) -> CVec, n: usize) -> Vec<CVec> {
    let len = modes.first().map(|m| m.len()).unwrap_or(0);
    let cm: Vec<CVec> = modes.iter().map(&conj).collect();
    (0..n)
        .map(|j| {
            let s = 2.0 * PI * j as f64 / n as f64;
            let mut out = CVec::zeros(len);
            for (k, (a, b)) in modes.iter().zip(&cm).enumerate() {
                let e = C64::from_polar(1.0, (k + 1) as f64 * s);
                out += a * e + b * e.conj();
            }
            out
        })
        .collect()
}

/// Fourier coefficients `k = 0..=k_max` of equispaced samples.
pub fn analyze(samples: &[CVec], k_max: usize) -> Vec<CVec> {
    let n = samples.len();
    (0..=k_max)
        .map(|k| {
            let mut out = CVec::zeros(samples[0].len());
            for (j, f) in samples.iter().enumerate() {
                out += f * C64::from_polar(1.0 / n as f64, -2.0 * PI * (k * j) as f64 / n as f64);
            }
            out
        })
        .collect()
}

struct Layout {
    nv: usize,
    n: usize,
    k: usize,
}

impl Layout {
    fn re(&self, k: usize) -> usize {
        self.nv + 2 * self.n * (k - 1)
    }
    fn zeta(&self) -> usize {
        self.nv + 2 * self.n * self.k
    }
    fn mu(&self) -> usize {
        self.zeta() + 1
    }
    fn len(&self) -> usize {
        self.zeta() + 2
    }

    fn unpack(&self, x: &DVector<f64>) -> (DVector<f64>, Vec<CVec>, f64, f64) {
        let v = x.rows(0, self.nv).into_owned();
        let w = (1..=self.k).map(|k| CVec::from_fn(self.n, |i, _| c(x[self.re(k) + i], x[self.re(k) + self.n + i]))).collect();
        (v, w, x[self.zeta()], x[self.mu()])
    }

    fn pack(&self, v: &DVector<f64>, w: &[CVec], zeta: f64, mu: f64) -> DVector<f64> {
        let mut x = DVector::zeros(self.len());
        x.rows_mut(0, self.nv).copy_from(v);
        for (k, wk) in w.iter().enumerate() {
            let o = self.re(k + 1);
            for i in 0..self.n {
                x[o + i] = wk[i].re;
                x[o + self.n + i] = wk[i].im;
            }
        }
        x[self.zeta()] = zeta;
        x[self.mu()] = mu;
        x
    }
}

struct Engine<'a> {
    prob: &'a dyn AbstractProblem,
    lay: Layout,
    l1: DMatrix<f64>,
    l2: CMat,
    b: CMat,
    /// `½ conj(w0)`: the `k = 1` coefficient of `w1`.
    w1: CVec,
    zeta0: f64,
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |a, b| a.max(b.abs()))
}

impl Engine<'_> {
    fn inner(&self, a: &CVec, b: &CVec) -> C64 {
        b.dotc(&(&self.b * a))
    }

    fn constraints(&self, w1hat: &CVec, eps: f64) -> [f64; 2] {
        let amp = 2.0 * self.inner(w1hat, &self.w1).re - eps;
        let ph = 2.0 * self.inner(w1hat, &(&self.w1 * I)).re;
        [amp, ph]
    }

    fn residual(&self, x: &DVector<f64>, eps: f64) -> Result<DVector<f64>> {
        let lay = &self.lay;
        let (v, w, zeta, mu) = lay.unpack(x);
        let (n1, n2) = self.prob.nonlinear(&v, &w, mu)?;
        if n1.len() != lay.nv || n2.len() != lay.k || n2.iter().any(|r| r.len() != lay.n) {
            return Err(Error::ShapeMismatch("nonlinearity returned wrong sizes".into()));
        }
        let mut f = DVector::zeros(lay.len());
        f.rows_mut(0, lay.nv).copy_from(&(&self.l1 * &v - n1));
        for k in 1..=lay.k {
            let wk = &w[k - 1];
            let r = &self.b * wk * (I * (k as f64 * zeta)) + &self.l2 * wk - &n2[k - 1];
            let o = lay.re(k);
            for i in 0..lay.n {
                f[o + i] = r[i].re;
                f[o + lay.n + i] = r[i].im;
            }
        }
        let [a, p] = self.constraints(&w[0], eps);
        f[lay.zeta()] = a;
        f[lay.mu()] = p;
        Ok(f)
    }

    /// Exact linear part of the Jacobian, bordered; the `μ` column by a
    /// central difference of the full residual.
    fn preconditioner(&self, x: &DVector<f64>, eps: f64) -> Result<DMatrix<f64>> {
        let lay = &self.lay;
        let (_, w, zeta, mu) = lay.unpack(x);
        let nt = lay.len();
        let mut p = DMatrix::<f64>::zeros(nt, nt);
        p.view_mut((0, 0), (lay.nv, lay.nv)).copy_from(&self.l1);
        for k in 1..=lay.k {
            let a = &self.b * (I * (k as f64 * zeta)) + &self.l2;
            let o = lay.re(k);
            let n = lay.n;
            for i in 0..n {
                for j in 0..n {
                    let z = a[(i, j)];
                    p[(o + i, o + j)] = z.re;
                    p[(o + i, o + n + j)] = -z.im;
                    p[(o + n + i, o + j)] = z.im;
                    p[(o + n + i, o + n + j)] = z.re;
                }
            }
            let col = &self.b * &w[k - 1] * (I * k as f64);
            for i in 0..n {
                p[(o + i, lay.zeta())] = col[i].re;
                p[(o + n + i, lay.zeta())] = col[i].im;
            }
        }
        // constraint rows: 2 Re(q^H a) with q = B^H r
        for (row, r) in [(lay.zeta(), self.w1.clone()), (lay.mu(), &self.w1 * I)] {
            let q = self.b.adjoint() * r;
            let o = lay.re(1);
            for i in 0..lay.n {
                p[(row, o + i)] = 2.0 * q[i].re;
                p[(row, o + lay.n + i)] = 2.0 * q[i].im;
            }
        }
        let h = 1e-6 * (1.0 + mu.abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[lay.mu()] += h;
        xm[lay.mu()] -= h;
        let dmu = (self.residual(&xp, eps)? - self.residual(&xm, eps)?) / (2.0 * h);
        p.set_column(lay.mu(), &dmu);
        Ok(p)
    }

    fn dense_jacobian(&self, x: &DVector<f64>, eps: f64) -> Result<DMatrix<f64>> {
        let nt = self.lay.len();
        let mut j = DMatrix::zeros(nt, nt);
        for k in 0..nt {
            let h = if k == self.lay.mu() { 1e-6 } else { 1e-2 } * (1.0 + x[k].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            j.set_column(k, &((self.residual(&xp, eps)? - self.residual(&xm, eps)?) / (2.0 * h)));
        }
        Ok(j)
    }

    fn newton_step(&self, x: &DVector<f64>, f: &DVector<f64>, eps: f64, dense_limit: usize, gtol: f64) -> Result<DVector<f64>> {
        let nt = self.lay.len();
        if nt <= dense_limit {
            let j = self.dense_jacobian(x, eps)?;
            return j.lu().solve(&(-f)).ok_or_else(|| Error::Singular("bordered Hopf Jacobian".into()));
        }
        let p = self.preconditioner(x, eps)?;
        let plu = p.clone().lu();
        let pinv = |r: &DVector<f64>| plu.solve(r).ok_or_else(|| Error::Singular("Hopf preconditioner".into()));
        let xn = x.norm();
        let (y, rel) = gmres(
            |q| {
                // the μ direction uses the stored column: moving μ costs a steady solve
                let mut z = pinv(q)?;
                let zmu = std::mem::replace(&mut z[self.lay.mu()], 0.0);
                let mut out = p.column(self.lay.mu()) * zmu;
                let zn = z.norm();
                if zn > 0.0 {
                    // at fixed μ the residual is quadratic, so a central difference is exact
                    // for any step and a large one keeps rounding small
                    let h = 1e-2 * (1.0 + xn) / zn;
                    out += (self.residual(&(x + &z * h), eps)? - self.residual(&(x - &z * h), eps)?) / (2.0 * h);
                }
                Ok(out)
            },
            &(-f),
            gtol,
            60,
            600,
        )?;
        if !(rel < 1e-3) {
            return Err(Error::NoConvergence(format!("GMRES stalled at relative residual {rel:.2e}")));
        }
        pinv(&y)
    }

    fn solve(&self, guess: DVector<f64>, eps: f64, s: &HopfSettings) -> Result<(DVector<f64>, usize)> {
        let mut x = guess;
        let mut f = self.residual(&x, eps)?;
        let mut nf = max_abs(f.as_slice());
        for it in 0..s.max_newton {
            if nf < s.tol {
                // a few more steps while they pay: μ is only determined to
                // (residual)/ε, so small amplitudes need rounding-level residuals
                let mut extra = 0;
                while extra < 3 {
                    let Ok(dx) = self.newton_step(&x, &f, eps, s.dense_limit, 1e-4) else { break };
                    let xt = &x + dx;
                    let ft = self.residual(&xt, eps)?;
                    let nt = max_abs(ft.as_slice());
                    if !(nt < 0.5 * nf) {
                        break;
                    }
                    (x, f, nf) = (xt, ft, nt);
                    extra += 1;
                }
                return Ok((x, it + extra));
            }
            let dx = self.newton_step(&x, &f, eps, s.dense_limit, 1e-11)?;
            let mut step = 1.0;
            loop {
                let xt = &x + &dx * step;
                let ft = self.residual(&xt, eps)?;
                let nt = max_abs(ft.as_slice());
                if nt < nf || step < 1.0 / 64.0 {
                    x = xt;
                    f = ft;
                    nf = nt;
                    break;
                }
                step *= 0.5;
            }
            if dx.norm() * step < 1e-15 * (1.0 + x.norm()) && nf < 100.0 * s.tol {
                return Ok((x, it + 1));
            }
        }
        if nf < s.tol {
            Ok((x, s.max_newton))
        } else {
            Err(Error::NoConvergence(format!("Hopf Newton residual {nf:.2e} at eps = {eps}")))
        }
    }

    fn point(&self, x: &DVector<f64>, eps: f64, iters: usize) -> Result<HopfPoint> {
        let f = self.residual(x, eps)?;
        let lay = &self.lay;
        let (v, w, zeta, mu) = lay.unpack(x);
        let dev = if eps == 0.0 {
            0.0
        } else {
            // higher harmonics count towards the deviation
            let d1 = &w[0] / c(eps, 0.0) - &self.w1;
            let tot = self.inner(&d1, &d1).re + w[1..].iter().map(|wk| { let q = wk / c(eps, 0.0); self.inner(&q, &q).re }).sum::<f64>();
            (tot / self.inner(&self.w1, &self.w1).re).sqrt()
        };
        Ok(HopfPoint {
            eps,
            mu,
            zeta,
            v: v.iter().copied().collect(),
            w: w.iter().map(|m| m.iter().copied().collect()).collect(),
            residual_mean: max_abs(&f.as_slice()[..lay.nv]),
            residual_osc: max_abs(&f.as_slice()[lay.nv..lay.zeta()]),
            residual_constraints: max_abs(&f.as_slice()[lay.zeta()..]),
            newton_iterations: iters,
            w1_deviation: dev,
        })
    }

    fn checks(&self) -> HypothesisChecks {
        let w0 = self.prob.conj(&(&self.w1 * c(2.0, 0.0)));
        let bw = &self.b * &w0;
        let shifted = &self.l2 - &self.b * (I * self.zeta0);
        let eigen_residual = (&shifted * &w0).norm() / bw.norm().max(1e-300);
        let l1_min_singular = if self.lay.nv == 0 { f64::INFINITY } else { self.l1.clone().svd(false, false).singular_values.min() };
        let bn = self.b.norm().max(1e-300);
        let resonance: Vec<(usize, f64)> =
            (2..=self.lay.k.max(2)).map(|k| (k, min_singular_value(&(&self.b * (I * (k as f64 * self.zeta0)) + &self.l2)) / bn)).collect();
        let dnu_dmu = self.prob.s011(&w0).and_then(|sw| {
            let svd = shifted.clone().svd(true, false);
            let u = svd.u?;
            let (imin, _) = svd.singular_values.iter().enumerate().min_by(|a, b| a.1.partial_cmp(b.1).unwrap())?;
            let y = u.column(imin).into_owned();
            let den = y.dotc(&bw);
            (den.norm() > 0.0).then(|| y.dotc(&sw) / den)
        });
        let ok = eigen_residual < 1e-6 && l1_min_singular > 1e-12 * (1.0 + self.l1.norm()) && resonance.iter().all(|r| r.1 > 1e-10);
        HypothesisChecks { eigen_residual, l1_min_singular, resonance, dnu_dmu, ok }
    }
}

/// Run the bordered Newton continuation on `±ε` grids.
pub fn hopf_solve_abstract(prob: &dyn AbstractProblem, s: &HopfSettings) -> Result<HopfBranch> {
    let k = prob.k_max();
    if k == 0 {
        return Err(Error::InvalidInput("need at least one Fourier mode".into()));
    }
    let (n, nv) = (prob.n_osc(), prob.n_mean());
    let b = prob.mass_matrix();
    let w0 = prob.w0();
    if w0.len() != n || b.nrows() != n {
        return Err(Error::ShapeMismatch("eigenvector or mass matrix size".into()));
    }
    let nrm = b_inner(&b, &w0, &w0).re;
    if !(nrm > 0.0) {
        return Err(Error::InvalidInput("critical eigenvector has zero norm".into()));
    }
    // ⟨w1, w1⟩ = ½⟨w0, w0⟩ = 1
    let w0n = &w0 * c((2.0 / nrm).sqrt(), 0.0);
    let eng = Engine {
        prob,
        lay: Layout { nv, n, k },
        l1: prob.l1_matrix(),
        l2: prob.l2_matrix(),
        b,
        w1: prob.conj(&w0n) * c(0.5, 0.0),
        zeta0: prob.zeta0(),
    };
    let checks = eng.checks();
    if !checks.ok {
        return Err(Error::Hypothesis(format!(
            "eigen residual {:.2e}, sigma_min(L1) {:.2e}, resonance {:?}",
            checks.eigen_residual, checks.l1_min_singular, checks.resonance
        )));
    }
    let zero = eng.lay.pack(&DVector::zeros(nv), &vec![CVec::zeros(n); k], eng.zeta0, 0.0);
    let mut points = vec![eng.point(&zero, 0.0, 0)?];
    let mut truncated = None;
    let grid = s.grid();
    for sgn in [1.0, -1.0] {
        let mut prev: Option<(f64, DVector<f64>)> = None;
        for &e in &grid {
            let eps = sgn * e;
            let guess = match &prev {
                None => {
                    let mut w = vec![CVec::zeros(n); k];
                    w[0] = &eng.w1 * c(eps, 0.0);
                    eng.lay.pack(&DVector::zeros(nv), &w, eng.zeta0, 0.0)
                }
                Some((ep, xp)) => {
                    let r = eps / ep;
                    let (v, w, z, m) = eng.lay.unpack(xp);
                    let w: Vec<CVec> = w.iter().map(|x| x * c(r, 0.0)).collect();
                    eng.lay.pack(&(v * r * r), &w, eng.zeta0 + (z - eng.zeta0) * r * r, m * r * r)
                }
            };
            match eng.solve(guess, eps, s) {
                Ok((x, it)) => {
                    points.push(eng.point(&x, eps, it)?);
                    prev = Some((eps, x));
                }
                Err(err) => {
                    truncated = Some(format!("stopped at eps = {eps}: {err}"));
                    break;
                }
            }
        }
    }
    points.sort_by(|a, b| a.eps.partial_cmp(&b.eps).unwrap());
    let (mut pm, mut pz) = (0.0f64, 0.0f64);
    for p in points.iter().filter(|p| p.eps > 0.0) {
        if let Some(q) = points.iter().find(|q| (q.eps + p.eps).abs() <= 1e-15 * p.eps) {
            pm = pm.max((p.mu - q.mu).abs());
            pz = pz.max((p.zeta - q.zeta).abs());
        }
    }
    let pos: Vec<&HopfPoint> = points.iter().filter(|p| p.eps > 0.0).collect();
    let small = &pos[..pos.len().min(3)];
    let mu2 = fit_mu2(small);
    let dev: Vec<(f64, f64)> = pos.iter().map(|p| (p.eps, (p.mu - mu2 * p.eps * p.eps).abs())).collect();
    let floor = 1e-13 * (1.0 + pos.iter().map(|p| p.mu.abs()).fold(0.0, f64::max));
    let usable: Vec<&(f64, f64)> = dev.iter().filter(|d| d.1 > floor).collect();
    let quadratic_law_exponent = (usable.len() >= 2).then(|| {
        let x: Vec<f64> = usable.iter().map(|d| d.0).collect();
        let y: Vec<f64> = usable.iter().map(|d| d.1).collect();
        crate::linalg::loglog_slope(&x, &y)
    });
    Ok(HopfBranch {
        lambda_c: None,
        zeta0: eng.zeta0,
        points,
        parity_mu: pm,
        parity_zeta: pz,
        mu2,
        supercritical: mu2 > 0.0,
        quadratic_law_exponent,
        truncated,
        checks,
    })
}

/// `μ2` from the least-squares fit `μ ≈ μ2 ε² + μ4 ε⁴` (just `μ2 ε²` when
/// fewer than three points are available).
fn fit_mu2(pts: &[&HopfPoint]) -> f64 {
    if pts.len() >= 3 {
        let a = DMatrix::from_fn(pts.len(), 2, |i, j| pts[i].eps.powi(2 * j as i32 + 2));
        let y = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.mu));
        if let Ok(x) = a.svd(true, true).solve(&y, 1e-300) {
            return x[0];
        }
    }
    let (sn, sd) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.mu * p.eps.powi(2), b + p.eps.powi(4)));
    if sd > 0.0 {
        sn / sd
    } else {
        0.0
    }
}

fn b_inner(b: &CMat, x: &CVec, y: &CVec) -> C64 {
    y.dotc(&(b * x))
}

/// Hopf normal form `ż = (μ + i) z − (1 + ia)|z|² z` written for
/// `x = (Re z, Im z)`; its branch is `μ = ε²`, `ζ = 1 − aε²` exactly.
#[derive(Clone, Debug)]
pub struct NormalForm {
    pub a: f64,
    pub k_max: usize,
}

impl AbstractProblem for NormalForm {
    fn n_mean(&self) -> usize {
        0
    }
    fn n_osc(&self) -> usize {
        2
    }
    fn k_max(&self) -> usize {
        self.k_max
    }
    fn l1_matrix(&self) -> DMatrix<f64> {
        DMatrix::zeros(0, 0)
    }
    fn l2_matrix(&self) -> CMat {
        CMat::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(-1.0, 0.0), c(0.0, 0.0)])
    }
    fn mass_matrix(&self) -> CMat {
        CMat::identity(2, 2)
    }
    fn nonlinear(&self, _v: &DVector<f64>, w: &[CVec], mu: f64) -> Result<(DVector<f64>, Vec<CVec>)> {
        let nt = 4 * self.k_max + 2;
        let samples: Vec<CVec> = synthesize(w, |x| x.map(|z| z.conj()), nt)
            .into_iter()
            .map(|x| {
                let (x0, x1) = (x[0].re, x[1].re);
                let r2 = x0 * x0 + x1 * x1;
                CVec::from_vec(vec![c(mu * x0 - r2 * (x0 - self.a * x1), 0.0), c(mu * x1 - r2 * (self.a * x0 + x1), 0.0)])
            })
            .collect();
        let modes = analyze(&samples, self.k_max);
        Ok((DVector::zeros(0), modes[1..].to_vec()))
    }
    fn s011(&self, w: &CVec) -> Option<CVec> {
        Some(-w)
    }
    fn zeta0(&self) -> f64 {
        1.0
    }
    fn w0(&self) -> CVec {
        CVec::from_vec(vec![c(1.0, 0.0), c(0.0, 1.0)])
    }
}

// ---------------------------------------------------------------------------
// Fluid–structure instantiation.

/// The steady branch around `λc`: `ṽ(μ) = v(λc + μ)` by warm-started
/// Newton solves, cached per `μ`.
pub struct BranchData<'a> {
    pub d: &'a Discretization,
    pub p: PhysicalParams,
    pub state_c: SteadyState,
    /// `v′(λc)`.
    pub tangent: CoupledField,
    pub mu_range: (f64, f64),
    cache: Mutex<HashMap<u64, SteadyState>>,
}

impl<'a> BranchData<'a> {
    pub fn new(state_c: SteadyState, p: PhysicalParams, d: &'a Discretization, mu_range: (f64, f64)) -> Result<Self> {
        if !(mu_range.0 < 0.0 && mu_range.1 > 0.0) {
            return Err(Error::InvalidInput("mu range must contain 0 in its interior".into()));
        }
        let tangent = branch_tangent(&state_c, d)?;
        Ok(BranchData { d, p, state_c, tangent, mu_range, cache: Mutex::new(HashMap::new()) })
    }

    pub fn lambda_c(&self) -> f64 {
        self.state_c.lambda
    }

    pub fn state(&self, mu: f64) -> Result<SteadyState> {
        if mu == 0.0 {
            return Ok(self.state_c.clone());
        }
        if mu < self.mu_range.0 || mu > self.mu_range.1 {
            return Err(Error::BranchOutOfRange(format!("mu = {mu} outside [{}, {}]", self.mu_range.0, self.mu_range.1)));
        }
        let key = mu.to_bits();
        if let Some(s) = self.cache.lock().unwrap().get(&key) {
            return Ok(s.clone());
        }
        let s = steady_solve(self.lambda_c() + mu, &self.p, self.d, Some(&self.state_c))?;
        let mut cache = self.cache.lock().unwrap();
        if cache.len() > 512 {
            cache.clear();
        }
        cache.insert(key, s.clone());
        Ok(s)
    }
}

fn samples(f: &CoupledField, d: &Discretization) -> FieldSamples {
    FieldSamples::of(f, d)
}

/// Samples of `f − χ_f`.
fn relative(f: &CoupledField, d: &Discretization) -> FieldSamples {
    FieldSamples::of(f, d).lin(c(1.0, 0.0), &FieldSamples::translation_of(f, d), c(-1.0, 0.0))
}

fn acc(out: &mut [CVec], s: f64, x: &[CVec]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += v * c(s, 0.0);
    }
}

fn zeros_weak(d: &Discretization) -> Vec<CVec> {
    let mm = d.m_max() as i32;
    (-mm..=mm).map(|m| CVec::zeros(d.block_len(m))).collect()
}

/// Weak right-hand sides of the mean and oscillatory equations.
///
/// With `λ̃ = λc + μ`, `E = λ̃(ṽ − τ̃) − λc(v_c − τ_c)` and `r(u) = u − χ_u`:
///
/// ```text
/// N1 = −E·∇v̄ − λc r(v̄)·∇(ṽ − v_c) − μ r(v̄)·∇ṽ − λ̃[r(v̄)·∇v̄ + mean(r(w)·∇w)]
/// N2 = −E·∇w − λc r(w)·∇(ṽ − v_c) − μ r(w)·∇ṽ − λ̃[r(v̄)·∇w + r(w)·∇v̄ + osc(r(w)·∇w)]
/// ```
///
/// every product in the trilinear form of [`crate::forms`]. Modes of `w`
/// beyond those present are truncated.
fn nonlinear_split(vbar: &CoupledField, w: &PeriodicField, mu: f64, branch: &BranchData, d: &Discretization) -> Result<(Vec<CVec>, Vec<(i32, Vec<CVec>)>)> {
    vbar.check(d)?;
    let lc = branch.lambda_c();
    let lt = lc + mu;
    let st = branch.state(mu)?;
    let (vt, vc) = (&st.v0, &branch.state_c.v0);
    let e = relative(vt, d).lin(c(lt, 0.0), &relative(vc, d), c(-lc, 0.0));
    let dv = samples(&vt.sub(vc), d);
    let vts = samples(vt, d);
    let (ub, ubr) = (samples(vbar, d), relative(vbar, d));
    let modes: Vec<(i32, FieldSamples, FieldSamples)> = w.modes.iter().map(|(k, f)| (*k, samples(f, d), relative(f, d))).collect();
    for (k, _, _) in &modes {
        if *k == 0 || w.mode(-k).is_none() {
            return Err(Error::InvalidInput(format!("oscillatory field needs modes ±{k}, no mean")));
        }
    }
    let one = c(1.0, 0.0);
    // bilinearity groups the terms: conv(E + λ̃ r(v̄); ·) and conv(·; λc(ṽ − v_c) + μṽ + λ̃ v̄)
    let left = e.lin(one, &ubr, c(lt, 0.0));
    let right_mean = dv.lin(c(lc, 0.0), &vts, c(mu, 0.0));
    let right = right_mean.lin(one, &ub, c(lt, 0.0));
    let mut terms: Vec<(&FieldSamples, &FieldSamples, C64)> = vec![(&left, &ub, -one), (&ubr, &right_mean, -one)];
    for (k, _, fr) in &modes {
        let g = &modes.iter().find(|m| m.0 == -k).unwrap().1;
        terms.push((fr, g, c(-lt, 0.0)));
    }
    let n1 = conv_sum(d, &terms);
    let mut n2 = Vec::new();
    for (k, fs, fr) in modes.iter().filter(|m| m.0 > 0) {
        let mut terms: Vec<(&FieldSamples, &FieldSamples, C64)> = vec![(&left, fs, -one), (fr, &right, -one)];
        for (k1, _, ar) in &modes {
            if let Some((_, bs, _)) = modes.iter().find(|m| m.0 == k - k1) {
                terms.push((ar, bs, c(-lt, 0.0)));
            }
        }
        n2.push((*k, conv_sum(d, &terms)));
    }
    Ok((n1, n2))
}

/// Mean-equation right-hand side `N1(v̄, w, μ)` (weak).
pub fn nonlinear_n1(vbar: &CoupledField, w: &PeriodicField, mu: f64, branch: &BranchData, d: &Discretization) -> Result<Vec<CVec>> {
    Ok(nonlinear_split(vbar, w, mu, branch, d)?.0)
}

/// Oscillatory right-hand side `N2(v̄, w, μ)` for each positive mode (weak).
pub fn nonlinear_n2(vbar: &CoupledField, w: &PeriodicField, mu: f64, branch: &BranchData, d: &Discretization) -> Result<Vec<(i32, Vec<CVec>)>> {
    Ok(nonlinear_split(vbar, w, mu, branch, d)?.1)
}

/// The unsplit nonlinearity `J(λc)u − R(ṽ + u, λ̃) + R(ṽ, λ̃)` at `n_t`
/// instants `u = v̄ + w(s_j)`, Fourier-analysed into mean and positive
/// modes. Independent of [`nonlinear_n1`]/[`nonlinear_n2`]: it only uses
/// the steady residual and the assembled linearization.
pub fn unsplit_nonlinearity(vbar: &CoupledField, w: &PeriodicField, mu: f64, branch: &BranchData, d: &Discretization, n_t: usize) -> Result<(Vec<CVec>, Vec<(i32, Vec<CVec>)>)> {
    let lt = branch.lambda_c() + mu;
    let st = branch.state(mu)?;
    let jc = assemble(OpKind::L2, &branch.state_c, &branch.p, d)?;
    let r0 = steady_residual(&st.v0, lt, d)?;
    let kmax = w.modes.iter().map(|m| m.0).max().unwrap_or(0).max(0) as usize;
    let mut out: Vec<Vec<CVec>> = vec![zeros_weak(d); kmax + 1];
    for j in 0..n_t {
        let s = 2.0 * PI * j as f64 / n_t as f64;
        let mut u = vbar.add(&w.at(s));
        u = u.real_part();
        let mut nj = jc.apply_weak(&u);
        let r = steady_residual(&st.v0.add(&u), lt, d)?;
        for (k, x) in nj.iter_mut().enumerate() {
            *x -= &r[k] - &r0[k];
        }
        for (kk, o) in out.iter_mut().enumerate() {
            let e = C64::from_polar(1.0 / n_t as f64, -(kk as f64) * s);
            for (a, b) in o.iter_mut().zip(&nj) {
                *a += b * e;
            }
        }
    }
    let mean = out[0].clone();
    let modes = (1..=kmax).map(|k| (k as i32, out[k].clone())).collect();
    Ok((mean, modes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum S011Form {
    /// `(τ_c e_c + v_c)·∇w + λc(τ′e_c + v′)·∇w + (w − χ)·∇(v_c + v′)`.
    Printed,
    /// `∂J/∂λ` at `λc`: `r(v_c + λc v′)·∇w + r(w)·∇(v_c + λc v′)`.
    Derived,
}

/// `S011 w` (weak). The derived form is the `λ`-derivative of the weak
/// linearization, so `J(λc + μ) ≈ J(λc) + μ S011`.
pub fn apply_s011(w: &CoupledField, branch: &BranchData, d: &Discretization, form: S011Form) -> Result<Vec<CVec>> {
    w.check(d)?;
    let lc = branch.lambda_c();
    let (vc, vp) = (&branch.state_c.v0, &branch.tangent);
    let mut out = zeros_weak(d);
    let ws = samples(w, d);
    let wr = relative(w, d);
    match form {
        S011Form::Derived => {
            let a = relative(vc, d).lin(c(1.0, 0.0), &relative(vp, d), c(lc, 0.0));
            let mut b = vc.clone();
            b.axpy(c(lc, 0.0), vp);
            acc(&mut out, 1.0, &conv_vec(d, &a, &ws));
            acc(&mut out, 1.0, &conv_vec(d, &wr, &samples(&b, d)));
        }
        S011Form::Printed => {
            let plus = |f: &CoupledField| FieldSamples::of(f, d).lin(c(1.0, 0.0), &FieldSamples::translation_of(f, d), c(1.0, 0.0));
            acc(&mut out, 1.0, &conv_vec(d, &plus(vc), &ws));
            acc(&mut out, lc, &conv_vec(d, &plus(vp), &ws));
            acc(&mut out, 1.0, &conv_vec(d, &wr, &samples(&vc.add(vp), d)));
        }
    }
    Ok(out)
}

/// Coordinates on mirror-symmetric fields `c_{−m} = S c_m`.
///
/// The axisymmetric base flow commutes with both the azimuthal shift and
/// the mirror, so every eigenvalue with `m ≠ 0` is double on the full
/// space. Restricting to mirror-symmetric fields removes the degeneracy;
/// the quadratic nonlinearity preserves the subspace.
///
/// Oscillatory coordinates (complex): order 0 entries with `S = +1`, then
/// the whole block `m` for `m = 1..=m_max`. Mean coordinates (real): the
/// same entries, each a real number `t` with `c_m = t` (for `S = +1`) or
/// `c_m = it` (for `S = −1`), which makes the field real as well.
#[derive(Clone, Debug)]
pub struct MirrorReduction {
    m_max: usize,
    /// `(m, j, S)` for every retained coordinate.
    slots: Vec<(i32, usize, f64)>,
    lens: Vec<usize>,
}

impl MirrorReduction {
    pub fn new(d: &Discretization) -> Self {
        let mut slots = Vec::new();
        for m in 0..=d.m_max() as i32 {
            for (j, md) in d.block(m).modes.iter().enumerate() {
                let s = mirror_sign(*md);
                if m > 0 || s > 0.0 {
                    slots.push((m, j, s));
                }
            }
        }
        let mm = d.m_max() as i32;
        MirrorReduction { m_max: d.m_max(), slots, lens: (-mm..=mm).map(|m| d.block_len(m)).collect() }
    }

    pub fn dim(&self) -> usize {
        self.slots.len()
    }

    fn empty(&self, real: bool) -> CoupledField {
        CoupledField { m_max: self.m_max, blocks: self.lens.iter().map(|&n| vec![c(0.0, 0.0); n]).collect(), real }
    }

    pub fn embed_osc(&self, y: &CVec) -> CoupledField {
        let mut f = self.empty(false);
        for (k, &(m, j, s)) in self.slots.iter().enumerate() {
            f.block_mut(m)[j] = y[k];
            if m > 0 {
                f.block_mut(-m)[j] = y[k] * s;
            }
        }
        f
    }

    /// Coordinates of a mirror-symmetric field (the `m ≥ 0` entries).
    pub fn reduce_osc(&self, f: &CoupledField) -> CVec {
        CVec::from_iterator(self.dim(), self.slots.iter().map(|&(m, j, _)| f.block(m)[j]))
    }

    /// Largest deviation from `c_{−m} = S c_m` (and `S c_0 = c_0`).
    pub fn mirror_defect(&self, f: &CoupledField) -> f64 {
        self.embed_osc(&self.reduce_osc(f)).sub(f).coeff_norm()
    }

    /// Galerkin test against the symmetric basis: `r_m + S r_{−m}`.
    pub fn test_osc(&self, rows: &[CVec]) -> CVec {
        let mm = self.m_max as i32;
        CVec::from_iterator(
            self.dim(),
            self.slots.iter().map(|&(m, j, s)| if m == 0 { rows[mm as usize][j] } else { rows[(mm + m) as usize][j] + rows[(mm - m) as usize][j] * s }),
        )
    }

    pub fn embed_mean(&self, x: &DVector<f64>) -> CoupledField {
        let mut f = self.empty(true);
        for (k, &(m, j, s)) in self.slots.iter().enumerate() {
            let z = if s > 0.0 { c(x[k], 0.0) } else { c(0.0, x[k]) };
            f.block_mut(m)[j] = z;
            if m > 0 {
                f.block_mut(-m)[j] = z.conj();
            }
        }
        f
    }

    /// Rows of a real, mirror-symmetric functional in mean coordinates.
    pub fn test_mean(&self, rows: &[CVec]) -> DVector<f64> {
        let mm = self.m_max;
        DVector::from_iterator(
            self.dim(),
            self.slots.iter().map(|&(m, j, s)| {
                let r = rows[mm + m as usize][j];
                if s > 0.0 {
                    r.re
                } else {
                    r.im
                }
            }),
        )
    }

    pub fn osc_conj(&self, y: &CVec) -> CVec {
        self.reduce_osc(&self.embed_osc(y).conj())
    }
}

fn to_rows(f: &[CVec]) -> Vec<CVec> {
    f.to_vec()
}

/// The fluid–structure problem as an [`AbstractProblem`] on the
/// mirror-symmetric subspace.
pub struct FsiProblem<'a, 'b> {
    pub branch: &'b BranchData<'a>,
    pub d: &'a Discretization,
    pub red: MirrorReduction,
    pub op: BlockOperator,
    pub zeta0: f64,
    pub w0: CoupledField,
    pub k_max: usize,
}

impl<'a, 'b> FsiProblem<'a, 'b> {
    pub fn new(crit: &CriticalPoint, branch: &'b BranchData<'a>, k_max: usize) -> Result<Self> {
        let d = branch.d;
        let w0 = crit.w0.clone().ok_or_else(|| Error::InvalidInput("critical point carries no eigenvector field".into()))?;
        if (crit.lambda_c - branch.lambda_c()).abs() > 1e-12 * (1.0 + crit.lambda_c.abs()) {
            return Err(Error::InvalidInput("branch data not centred at the critical point".into()));
        }
        let red = MirrorReduction::new(d);
        if red.mirror_defect(&w0) > 1e-8 * w0.coeff_norm() {
            return Err(Error::Hypothesis("critical eigenvector is not mirror symmetric".into()));
        }
        let op = assemble(OpKind::L2, &branch.state_c, &branch.p, d)?;
        Ok(FsiProblem { branch, d, red, op, zeta0: crit.zeta0, w0, k_max })
    }

    fn periodic(&self, w: &[CVec]) -> PeriodicField {
        let mut modes = Vec::new();
        for (k, wk) in w.iter().enumerate() {
            let f = self.red.embed_osc(wk);
            modes.push((-(k as i32 + 1), f.conj()));
            modes.push((k as i32 + 1, f));
        }
        PeriodicField { modes }
    }

    fn reduced_matrix(&self, gram: bool) -> CMat {
        let n = self.red.dim();
        let mut out = CMat::zeros(n, n);
        for k in 0..n {
            let mut e = CVec::zeros(n);
            e[k] = c(1.0, 0.0);
            let f = self.red.embed_osc(&e);
            let rows: Vec<CVec> = f
                .ms()
                .map(|m| {
                    let a = if gram { self.op.gram_block(m) } else { self.op.weak_block(m) };
                    a * CVec::from_column_slice(f.block(m))
                })
                .collect();
            out.set_column(k, &self.red.test_osc(&rows));
        }
        out
    }
}

impl AbstractProblem for FsiProblem<'_, '_> {
    fn n_mean(&self) -> usize {
        self.red.dim()
    }
    fn n_osc(&self) -> usize {
        self.red.dim()
    }
    fn k_max(&self) -> usize {
        self.k_max
    }
    fn l1_matrix(&self) -> DMatrix<f64> {
        let n = self.red.dim();
        let mut out = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut e = DVector::zeros(n);
            e[k] = 1.0;
            let rows = to_rows(&self.op.apply_weak(&self.red.embed_mean(&e)));
            out.set_column(k, &self.red.test_mean(&rows));
        }
        out
    }
    fn l2_matrix(&self) -> CMat {
        self.reduced_matrix(false)
    }
    fn mass_matrix(&self) -> CMat {
        self.reduced_matrix(true)
    }
    fn conj(&self, a: &CVec) -> CVec {
        self.red.osc_conj(a)
    }
    fn nonlinear(&self, v: &DVector<f64>, w: &[CVec], mu: f64) -> Result<(DVector<f64>, Vec<CVec>)> {
        let vbar = self.red.embed_mean(v);
        let (n1, n2) = nonlinear_split(&vbar, &self.periodic(w), mu, self.branch, self.d)?;
        Ok((self.red.test_mean(&n1), n2.iter().map(|(_, r)| self.red.test_osc(r)).collect()))
    }
    fn s011(&self, w: &CVec) -> Option<CVec> {
        let r = apply_s011(&self.red.embed_osc(w), self.branch, self.d, S011Form::Derived).ok()?;
        Some(self.red.test_osc(&r))
    }
    fn zeta0(&self) -> f64 {
        self.zeta0
    }
    fn w0(&self) -> CVec {
        self.red.reduce_osc(&self.w0)
    }
}

/// Periodic branch of the falling-sphere problem bifurcating at `crit`.
pub fn hopf_solve_fsi(crit: &CriticalPoint, branch: &BranchData, s: &HopfSettings, d: &Discretization) -> Result<HopfBranch> {
    if !crit.hypotheses_hold() {
        return Err(Error::Hypothesis(format!("critical point fails its hypotheses: {}", crit.hypothesis_report())));
    }
    let prob = FsiProblem::new(crit, branch, d.cfg.k_max)?;
    let mut out = hopf_solve_abstract(&prob, s)?;
    out.lambda_c = Some(crit.lambda_c);
    Ok(out)
}

/// Mean field and periodic field of a branch point.
pub fn fsi_point_fields(pt: &HopfPoint, d: &Discretization) -> (CoupledField, PeriodicField) {
    let red = MirrorReduction::new(d);
    let v = red.embed_mean(&DVector::from_column_slice(&pt.v));
    let mut modes = Vec::new();
    for (k, wk) in pt.w.iter().enumerate() {
        let f = red.embed_osc(&CVec::from_column_slice(wk));
        modes.push((-(k as i32 + 1), f.conj()));
        modes.push((k as i32 + 1, f));
    }
    (v, PeriodicField { modes })
}
