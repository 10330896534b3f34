//! Linearization about the steady fall: `L0`, `K`, `L2` as per-order weak
//! matrices, resolvent solves, eigenvalues near the imaginary axis and the
//! search for a critical Galilei number.
//!
//! The evolution convention is `∂t u + L2 u = 0`, so stability means
//! `Re ν > 0`. Every operator is stored as its weak matrix `J_m`
//! (`(J_m)_ij = B(φ_j, φ_i)`) together with the mass-weighted Gram `G_m`;
//! the strong action in the coupled space is `G⁻¹ J`.

use serde::{Deserialize, Serialize};

use crate::discretization::{maybe_conj, mirror_sign, surface_traction, CoupledField, Discretization, GridField, Mode, PressureField};
use crate::error::{Error, Result};
use crate::forms::{conv_matrix_a, conv_matrix_u, FieldSamples};
use crate::linalg::{c, eig_dense, loglog_slope, CMat, CVec, C64, I};
use crate::spaces::{dissipation, gram, PhysicalParams};
use crate::steady::SteadyState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    L0,
    K,
    L1,
    L2,
}

/// Which part of each order is searched for eigenvalues.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subspace {
    Full,
    /// Fields even under `x3 → −x3`; removes the `m ↔ −m` double
    /// eigenvalues of an axisymmetric base flow.
    Mirror,
}

/// Weak matrices of a linear operator for orders `0..=m_max` (negative
/// orders are complex conjugates).
#[derive(Clone, Debug)]
pub struct BlockOperator {
    pub kind: OpKind,
    pub lambda: f64,
    pub m_max: usize,
    pub weak: Vec<CMat>,
    pub gram: Vec<CMat>,
}

impl BlockOperator {
    pub fn weak_block(&self, m: i32) -> CMat {
        maybe_conj(&self.weak[m.unsigned_abs() as usize], m < 0)
    }

    pub fn gram_block(&self, m: i32) -> CMat {
        maybe_conj(&self.gram[m.unsigned_abs() as usize], m < 0)
    }

    pub fn apply_weak(&self, u: &CoupledField) -> Vec<CVec> {
        u.ms().map(|m| self.weak_block(m) * CVec::from_column_slice(u.block(m))).collect()
    }

    /// Strong action `G⁻¹ J u`, an element of the discrete coupled space.
    pub fn apply(&self, u: &CoupledField) -> Result<CoupledField> {
        let mut out = u.clone();
        for m in u.ms() {
            let r = self.weak_block(m) * CVec::from_column_slice(u.block(m));
            let x = self.gram_block(m).lu().solve(&r).ok_or_else(|| Error::Singular("Gram matrix".into()))?;
            *out.block_mut(m) = x.iter().copied().collect();
        }
        out.real = false;
        Ok(out)
    }

    pub fn sum(&self, o: &BlockOperator, kind: OpKind) -> BlockOperator {
        BlockOperator {
            kind,
            lambda: self.lambda,
            m_max: self.m_max,
            weak: self.weak.iter().zip(&o.weak).map(|(a, b)| a + b).collect(),
            gram: self.gram.clone(),
        }
    }
}

fn require_axisymmetric(s: &SteadyState) -> Result<()> {
    if s.nonaxisymmetric > 1e-10 || !s.axis_aligned() {
        return Err(Error::InvalidInput("linearization requires an axisymmetric, axis-aligned base state".into()));
    }
    Ok(())
}

/// Assemble `kind` about the steady state `s`.
pub fn assemble(kind: OpKind, s: &SteadyState, p: &PhysicalParams, d: &Discretization) -> Result<BlockOperator> {
    require_axisymmetric(s)?;
    s.v0.check(d)?;
    let lam = s.lambda;
    let vs = FieldSamples::of(&s.v0, d);
    let ts = FieldSamples::translation_of(&s.v0, d);
    let mut weak = Vec::new();
    let mut grams = Vec::new();
    for m in 0..=d.m_max() as i32 {
        let two_d = dissipation(d, m) * c(2.0, 0.0);
        let l0 = || {
            if lam == 0.0 {
                two_d.clone()
            } else {
                &two_d - conv_matrix_u(d, m, &ts) * c(lam, 0.0)
            }
        };
        let k = || {
            if lam == 0.0 {
                CMat::zeros(two_d.nrows(), two_d.ncols())
            } else {
                (conv_matrix_u(d, m, &vs) - conv_matrix_a(d, m, &vs)) * c(lam, 0.0)
            }
        };
        let w = match kind {
            OpKind::L0 => l0(),
            OpKind::K => k(),
            OpKind::L1 | OpKind::L2 => l0() + k(),
        };
        weak.push(w);
        grams.push(gram(d, p, m));
    }
    Ok(BlockOperator { kind, lambda: lam, m_max: d.m_max(), weak, gram: grams })
}

pub fn apply_l0(w: &CoupledField, s: &SteadyState, p: &PhysicalParams, d: &Discretization) -> Result<CoupledField> {
    assemble(OpKind::L0, s, p, d)?.apply(w)
}

pub fn apply_k(w: &CoupledField, s: &SteadyState, p: &PhysicalParams, d: &Discretization) -> Result<CoupledField> {
    assemble(OpKind::K, s, p, d)?.apply(w)
}

pub fn apply_l2(w: &CoupledField, s: &SteadyState, p: &PhysicalParams, d: &Discretization) -> Result<CoupledField> {
    assemble(OpKind::L2, s, p, d)?.apply(w)
}

/// Surface force and torque `∫ 2D(w)·n`, `∫ x × 2D(w)·n` over the sphere
/// (`n = −e_r`), pressure excluded.
pub fn viscous_surface_load(w: &CoupledField, d: &Discretization) -> Result<([C64; 3], [C64; 3])> {
    let zero = PressureField { m_max: d.m_max(), surface: vec![vec![c(0.0, 0.0); d.n_theta()]; 2 * d.m_max() + 1] };
    surface_traction(w, &zero, d)
}

/// `Δ̃w`: `−Δw` in the fluid, with rigid part
/// `(M⁻¹∫2D(w)·n, I⁻¹∫x×2D(w)·n)`.
pub fn apply_delta_tilde(w: &CoupledField, d: &Discretization, p: &PhysicalParams) -> Result<GridField> {
    w.check(d)?;
    let (f, g) = viscous_surface_load(w, d)?;
    let u = w
        .ms()
        .map(|m| {
            let blk = d.block(m);
            blk.elap.mul_vec(w.block(m), m < 0).into_iter().map(|z| -z).collect()
        })
        .collect();
    Ok(GridField { m_max: w.m_max, u, chi: f.map(|z| z / p.mass), sigma: g.map(|z| z / p.inertia) })
}

/// Solve `(L0 + iζ) u = rhs` for `rhs` in the coupled space.
pub fn resolvent_solve(rhs: &CoupledField, zeta: f64, l0: &BlockOperator) -> Result<CoupledField> {
    if zeta == 0.0 {
        return Err(Error::InvalidInput("resolvent needs zeta != 0".into()));
    }
    let load: Vec<CVec> = rhs.ms().map(|m| l0.gram_block(m) * CVec::from_column_slice(rhs.block(m))).collect();
    resolvent_solve_weak(&load, zeta, l0, rhs)
}

/// `(J + iζ G) c = load` per order, for a load given as a functional.
pub fn resolvent_solve_weak(load: &[CVec], zeta: f64, op: &BlockOperator, shape: &CoupledField) -> Result<CoupledField> {
    let mut out = shape.clone();
    out.real = false;
    for (k, m) in shape.ms().enumerate() {
        let a = op.weak_block(m) + op.gram_block(m) * (I * zeta);
        let x = a.clone().lu().solve(&load[k]).ok_or_else(|| Error::Singular("resolvent".into()))?;
        let rel = (&a * &x - &load[k]).norm() / load[k].norm().max(1e-300);
        if load[k].norm() > 0.0 && rel > 1e-10 {
            return Err(Error::NoConvergence(format!("resolvent residual {rel:.2e}")));
        }
        *out.block_mut(m) = x.iter().copied().collect();
    }
    Ok(out)
}

/// Decay of the resolvent `(L0 + iζ)⁻¹` along a frequency sweep.
///
/// `u`/`grad` follow one fixed right-hand side; `worst_*` are the operator
/// norms `sup_f ‖u‖/‖f‖` and `sup_f ‖∇u‖/‖f‖` (mass-weighted norm on `f`),
/// which is what a bound uniform in the data measures.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolventSweep {
    pub zetas: Vec<f64>,
    pub u: Vec<f64>,
    pub grad: Vec<f64>,
    pub worst_u: Vec<f64>,
    pub worst_grad: Vec<f64>,
    pub u_exponent: f64,
    pub grad_exponent: f64,
    pub worst_u_exponent: f64,
    pub worst_grad_exponent: f64,
}

pub fn resolvent_scaling(rhs: &CoupledField, zetas: &[f64], l0: &BlockOperator, d: &Discretization) -> Result<ResolventSweep> {
    if zetas.len() < 2 || zetas.iter().any(|z| !(z.abs() > 0.0)) {
        return Err(Error::InvalidInput("sweep needs at least two nonzero frequencies".into()));
    }
    let grad_gram: Vec<(i32, CMat)> = rhs
        .ms()
        .map(|m| {
            let blk = d.block(m);
            (m, maybe_conj(&blk.eg.adj_mul(&d.w_vol9, &blk.eg, false), m < 0))
        })
        .collect();
    let (mut u, mut grad, mut worst_u, mut worst_grad) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &z in zetas {
        let sol = resolvent_solve(rhs, z, l0)?;
        let mut g2 = 0.0;
        let mut u2 = 0.0;
        let (mut wu, mut wg) = (0.0f64, 0.0f64);
        for (m, dg) in &grad_gram {
            let x = CVec::from_column_slice(sol.block(*m));
            let gm = l0.gram_block(*m);
            u2 += x.dotc(&(&gm * &x)).re;
            g2 += x.dotc(&(dg * &x)).re;
            // sup over f: with G = L Lᴴ and f = L⁻ᴴ y, u = A⁻¹ L y; the top
            // eigenvalue of Lᴴ A⁻ᴴ Q A⁻¹ L by power iteration
            let l = gm.clone().cholesky().ok_or_else(|| Error::Singular("Gram matrix".into()))?.l();
            let a = l0.weak_block(*m) + &gm * (I * z);
            let lu = a.adjoint().lu();
            let la = a.lu();
            let top = |q: &CMat| -> Result<f64> {
                let n = l.ncols();
                let mut y = CVec::from_fn(n, |i, _| c(1.0 + (i % 7) as f64, (i % 3) as f64 - 1.0)).normalize();
                let mut est = 0.0;
                for _ in 0..500 {
                    let x = la.solve(&(&l * &y)).ok_or_else(|| Error::Singular("resolvent".into()))?;
                    let t = lu.solve(&(q * &x)).ok_or_else(|| Error::Singular("resolvent".into()))?;
                    let my = l.adjoint() * t;
                    let new = y.dotc(&my).re;
                    y = my.normalize();
                    if (new - est).abs() <= 1e-12 * new.abs() {
                        return Ok(new);
                    }
                    est = new;
                }
                Ok(est)
            };
            wu = wu.max(top(&gm)?);
            wg = wg.max(top(dg)?);
        }
        u.push(u2.max(0.0).sqrt());
        grad.push(g2.max(0.0).sqrt());
        worst_u.push(wu.sqrt());
        worst_grad.push(wg.sqrt());
    }
    let zs: Vec<f64> = zetas.iter().map(|z| z.abs()).collect();
    Ok(ResolventSweep {
        u_exponent: loglog_slope(&zs, &u),
        grad_exponent: loglog_slope(&zs, &grad),
        worst_u_exponent: loglog_slope(&zs, &worst_u),
        worst_grad_exponent: loglog_slope(&zs, &worst_grad),
        zetas: zetas.to_vec(),
        u,
        grad,
        worst_u,
        worst_grad,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EigenPair {
    pub nu: C64,
    /// Azimuthal order of the eigenvector.
    pub m: i32,
    /// Block coefficients (order `m`; with a mirror partner on `−m`).
    pub w: CoupledField,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumResult {
    pub pairs: Vec<EigenPair>,
    pub shift: C64,
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum EigenMethod {
    /// Full dense eigen-decomposition of `G⁻¹J` (small blocks).
    Dense,
    /// Shift-invert Arnoldi around the given shift.
    ShiftInvert { krylov: usize },
}

fn mirror_indices(d: &Discretization, m: i32, sub: Subspace) -> Vec<usize> {
    let blk = d.block(m);
    (0..blk.len()).filter(|&j| sub == Subspace::Full || m != 0 || mirror_sign(blk.modes[j]) > 0.0).collect()
}

fn restrict(a: &CMat, idx: &[usize]) -> CMat {
    CMat::from_fn(idx.len(), idx.len(), |i, j| a[(idx[i], idx[j])])
}

/// Eigenpairs `(ν, x)` of `J x = ν G x` nearest `shift`.
pub fn generalized_eigs(j: &CMat, g: &CMat, shift: C64, n_eigs: usize, method: EigenMethod) -> Result<Vec<(C64, CVec)>> {
    let n = j.nrows();
    let mut pairs: Vec<(C64, CVec)> = match method {
        EigenMethod::Dense => {
            let a = g.clone().lu().solve(j).ok_or_else(|| Error::Singular("Gram matrix".into()))?;
            let (vals, vecs) = eig_dense(&a)?;
            vals.into_iter().enumerate().map(|(k, v)| (v, vecs.column(k).into_owned())).collect()
        }
        EigenMethod::ShiftInvert { krylov } => arnoldi_shift_invert(j, g, shift, krylov.clamp(n_eigs + 2, n))?,
    };
    pairs.sort_by(|a, b| (a.0 - shift).norm().partial_cmp(&(b.0 - shift).norm()).unwrap());
    pairs.truncate(n_eigs.min(n));
    // Refine by a few steps of inverse iteration at the Ritz value.
    let mut out = Vec::new();
    for (nu, x) in pairs {
        out.push(refine_pair(j, g, nu, x)?);
    }
    Ok(out)
}

fn arnoldi_shift_invert(j: &CMat, g: &CMat, shift: C64, kdim: usize) -> Result<Vec<(C64, CVec)>> {
    let n = j.nrows();
    let lu = (j - g * shift).lu();
    let mut q: Vec<CVec> = Vec::with_capacity(kdim + 1);
    let mut h = CMat::zeros(kdim + 1, kdim);
    // deterministic start vector
    let mut v = CVec::from_fn(n, |i, _| c(1.0 + (i as f64 * 0.37).sin(), 0.3 * (i as f64 * 0.11).cos()));
    v /= c(v.norm(), 0.0);
    q.push(v);
    let mut k_used = kdim;
    for k in 0..kdim {
        let mut w = lu.solve(&(g * &q[k])).ok_or_else(|| Error::Singular("shift-invert factor".into()))?;
        for _pass in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let hij = qi.dotc(&w);
                h[(i, k)] += hij;
                w -= qi * hij;
            }
        }
        let nw = w.norm();
        h[(k + 1, k)] = c(nw, 0.0);
        if nw < 1e-13 {
            k_used = k + 1;
            break;
        }
        q.push(w / c(nw, 0.0));
    }
    let hk = h.view((0, 0), (k_used, k_used)).into_owned();
    let (theta, y) = eig_dense(&hk)?;
    let mut out = Vec::new();
    for (t, th) in theta.iter().enumerate() {
        if th.norm() < 1e-300 {
            continue;
        }
        let mut x = CVec::zeros(n);
        for i in 0..k_used {
            x += &q[i] * y[(i, t)];
        }
        out.push((shift + c(1.0, 0.0) / th, x));
    }
    Ok(out)
}

fn refine_pair(j: &CMat, g: &CMat, nu0: C64, x0: CVec) -> Result<(C64, CVec)> {
    let mut nu = nu0;
    let mut x = x0.clone() / c(x0.norm(), 0.0);
    let scale = j.norm().max(1.0);
    for _ in 0..4 {
        let r = j * &x - g * &x * nu;
        if r.norm() < 1e-13 * scale {
            break;
        }
        let Some(y) = (j - g * nu).lu().solve(&(g * &x)) else { break };
        let ny = y.norm();
        if !ny.is_finite() || ny == 0.0 {
            break;
        }
        x = y / c(ny, 0.0);
        nu = rayleigh(j, g, &x);
    }
    Ok((nu, x))
}

fn rayleigh(j: &CMat, g: &CMat, x: &CVec) -> C64 {
    // Galerkin quotient in the Gram metric: ν = (x^H J x)/(x^H G x) is
    // exact for eigenvectors of the pencil.
    x.dotc(&(j * x)) / x.dotc(&(g * x))
}

/// `‖G⁻¹Jx − νx‖_G / ‖x‖_G`.
pub fn pencil_residual(j: &CMat, g: &CMat, nu: C64, x: &CVec) -> f64 {
    let r = j * x - g * x * nu;
    let y = g.clone().lu().solve(&r).unwrap_or_else(|| r.clone());
    let num = y.dotc(&(g * &y)).re.max(0.0).sqrt();
    let den = x.dotc(&(g * x)).re.max(1e-300).sqrt();
    num / den
}

/// Build the coupled field of an order-`m` eigenvector (restricted indices
/// `idx`), adding the mirror partner on `−m` when requested.
pub fn embed_eigvec(d: &Discretization, m: i32, idx: &[usize], x: &CVec, sub: Subspace) -> CoupledField {
    let mut f = CoupledField::zeros(d);
    f.real = false;
    let blk = d.block(m);
    let mut full = vec![c(0.0, 0.0); blk.len()];
    for (k, &i) in idx.iter().enumerate() {
        full[i] = x[k];
    }
    if sub == Subspace::Mirror && m != 0 {
        let part: Vec<C64> = blk.modes.iter().zip(&full).map(|(md, z)| z * mirror_sign(*md)).collect();
        *f.block_mut(-m) = part;
    }
    *f.block_mut(m) = full;
    f
}

/// Eigenpairs of `L2` near `shift` on orders `orders`, with certified
/// residuals, sorted by `|Re ν|`.
pub fn spectrum_near_axis(
    op: &BlockOperator,
    d: &Discretization,
    orders: &[i32],
    shift: C64,
    n_eigs: usize,
    method: EigenMethod,
    sub: Subspace,
) -> Result<SpectrumResult> {
    let mut pairs = Vec::new();
    for &m in orders {
        if m < 0 || m as usize > op.m_max {
            return Err(Error::InvalidInput(format!("order {m} out of range")));
        }
        let idx = mirror_indices(d, m, sub);
        let j = restrict(&op.weak_block(m), &idx);
        let g = restrict(&op.gram_block(m), &idx);
        for (nu, x) in generalized_eigs(&j, &g, shift, n_eigs, method)? {
            let res = pencil_residual(&j, &g, nu, &x);
            if !(res < 1e-8 * (1.0 + nu.norm())) {
                return Err(Error::NoConvergence(format!("eigenpair residual {res:.2e} at nu = {nu}")));
            }
            let w = embed_eigvec(d, m, &idx, &x, sub);
            pairs.push(EigenPair { nu, m, w, residual: res });
        }
    }
    pairs.sort_by(|a, b| a.nu.re.abs().partial_cmp(&b.nu.re.abs()).unwrap());
    Ok(SpectrumResult { pairs, shift, lambda: op.lambda })
}

/// A λ-dependent family of pencils `(J_m(λ), G_m(λ))` for a set of orders.
pub trait OperatorFamily {
    /// Pencils for each searched order, already restricted to the subspace.
    fn pencils(&self, lambda: f64) -> Result<Vec<(i32, CMat, CMat)>>;
    /// Map a restricted order-`m` eigenvector to a coupled field (or `None`
    /// for synthetic families).
    fn embed(&self, _m: i32, _x: &CVec) -> Option<CoupledField> {
        None
    }
    /// `(χ, σ)` of an embedded field.
    fn rigid_parts(&self, _w: &CoupledField) -> Vec<C64> {
        Vec::new()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriticalSettings {
    pub n_scan: usize,
    pub tol_lambda: f64,
    pub method: EigenMethod,
    pub n_eigs: usize,
    pub shifts: Vec<C64>,
    pub k_max: usize,
    pub gap_rel: f64,
    pub transversality_tol: f64,
    /// Turn failed hypotheses into errors instead of report flags.
    pub strict: bool,
}

impl Default for CriticalSettings {
    fn default() -> Self {
        CriticalSettings {
            n_scan: 12,
            tol_lambda: 1e-9,
            method: EigenMethod::Dense,
            n_eigs: 12,
            shifts: vec![c(0.0, 0.0)],
            k_max: 4,
            gap_rel: 1e-3,
            transversality_tol: 1e-8,
            strict: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonresonanceEntry {
    pub k: usize,
    pub distance: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub lambda_c: f64,
    pub nu: C64,
    pub zeta0: f64,
    pub m: i32,
    pub w0: Option<CoupledField>,
    pub x0: Vec<C64>,
    pub dnu_dlambda: C64,
    pub simplicity_gap: f64,
    pub nonresonance: Vec<NonresonanceEntry>,
    pub transversal: bool,
    pub simple: bool,
    pub nonresonant: bool,
    pub real_crossing: bool,
    pub residual: f64,
}

impl CriticalPoint {
    pub fn hypotheses_hold(&self) -> bool {
        self.transversal && self.simple && self.nonresonant && !self.real_crossing
    }

    pub fn hypothesis_report(&self) -> String {
        format!(
            "transversality={} simplicity={} nonresonance={} complex_pair={}",
            self.transversal, self.simple, self.nonresonant, !self.real_crossing
        )
    }
}

/// All eigenvalues of the family near the requested shifts.
fn family_eigs(f: &dyn OperatorFamily, lambda: f64, s: &CriticalSettings) -> Result<Vec<(i32, C64, CVec, CMat, CMat)>> {
    let mut out: Vec<(i32, C64, CVec, CMat, CMat)> = Vec::new();
    for (m, j, g) in f.pencils(lambda)? {
        for sh in &s.shifts {
            for (nu, x) in generalized_eigs(&j, &g, *sh, s.n_eigs, s.method)? {
                if out.iter().any(|e| e.0 == m && (e.1 - nu).norm() < 1e-9 * (1.0 + nu.norm())) {
                    continue;
                }
                out.push((m, nu, x, j.clone(), g.clone()));
            }
        }
    }
    Ok(out)
}

/// Leftmost eigenvalue (smallest real part), preferring `Im ν ≥ 0`.
fn leftmost(e: &[(i32, C64, CVec, CMat, CMat)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, x) in e.iter().enumerate() {
        if x.1.im < -1e-12 {
            continue;
        }
        if best.map(|b| x.1.re < e[b].1.re).unwrap_or(true) {
            best = Some(k);
        }
    }
    best
}

fn min_re(f: &dyn OperatorFamily, lambda: f64, s: &CriticalSettings) -> Result<f64> {
    let e = family_eigs(f, lambda, s)?;
    leftmost(&e).map(|k| e[k].1.re).ok_or_else(|| Error::NoConvergence("empty spectrum".into()))
}

fn track(f: &dyn OperatorFamily, lambda: f64, m: i32, x_ref: &CVec, s: &CriticalSettings) -> Result<(C64, CVec)> {
    let e = family_eigs(f, lambda, s)?;
    let mut best = None;
    let mut ov = -1.0;
    for (k, x) in e.iter().enumerate() {
        if x.0 != m || x.2.len() != x_ref.len() {
            continue;
        }
        let o = x.2.dotc(x_ref).norm() / (x.2.norm() * x_ref.norm());
        if o > ov {
            ov = o;
            best = Some(k);
        }
    }
    let k = best.ok_or_else(|| Error::NoConvergence("eigenvalue tracking lost".into()))?;
    Ok((e[k].1, e[k].2.clone()))
}

/// Locate `λ_c ∈ [lo, hi]` where the leftmost eigenvalue crosses the
/// imaginary axis, then report `ν′(λ_c)`, simplicity and nonresonance.
pub fn find_critical(f: &dyn OperatorFamily, lo: f64, hi: f64, s: &CriticalSettings) -> Result<CriticalPoint> {
    if !(lo < hi) || s.n_scan < 2 {
        return Err(Error::InvalidInput("need lo < hi and n_scan >= 2".into()));
    }
    let h = (hi - lo) / (s.n_scan - 1) as f64;
    let mut prev = (lo, min_re(f, lo, s)?);
    if prev.1 <= 0.0 {
        return Err(Error::NoCrossing(format!("already unstable at lambda = {lo}")));
    }
    let mut bracket = None;
    for k in 1..s.n_scan {
        let lam = lo + h * k as f64;
        let v = min_re(f, lam, s)?;
        if v <= 0.0 {
            bracket = Some((prev, (lam, v)));
            break;
        }
        prev = (lam, v);
    }
    let ((mut a, mut fa), (mut b, mut fb)) = bracket.ok_or_else(|| Error::NoCrossing(format!("min Re nu stays positive on [{lo}, {hi}]")))?;
    // Illinois-type regula falsi.
    let mut side = 0;
    for _ in 0..200 {
        if (b - a).abs() < s.tol_lambda * (1.0 + b.abs()) {
            break;
        }
        let cpt = (a * fb - b * fa) / (fb - fa);
        let cpt = if cpt.is_finite() && cpt > a.min(b) && cpt < a.max(b) { cpt } else { 0.5 * (a + b) };
        let fc = min_re(f, cpt, s)?;
        if fc == 0.0 {
            a = cpt;
            b = cpt;
            break;
        }
        if (fc > 0.0) == (fa > 0.0) {
            a = cpt;
            fa = fc;
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        } else {
            b = cpt;
            fb = fc;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        }
    }
    let lc = if fa.abs() < fb.abs() { a } else { b };
    let eigs = family_eigs(f, lc, s)?;
    let k0 = leftmost(&eigs).ok_or_else(|| Error::NoConvergence("empty spectrum".into()))?;
    let (m, nu, x, j, g) = eigs[k0].clone();
    let residual = pencil_residual(&j, &g, nu, &x);
    let gap = eigs
        .iter()
        .enumerate()
        .filter(|(k, e)| *k != k0 && e.0 == m)
        .map(|(_, e)| (e.1 - nu).norm())
        .fold(f64::INFINITY, f64::min);
    let simple = gap > 1e-6 * nu.norm().max(1e-12);
    let hl = 1e-4 * lc.abs().max(1e-3);
    let (np, _) = track(f, lc + hl, m, &x, s)?;
    let (nm, _) = track(f, lc - hl, m, &x, s)?;
    let dnu = (np - nm) / (2.0 * hl);
    let zeta0 = nu.im.abs();
    let real_crossing = zeta0 <= 1e-8 * (1.0 + nu.norm());
    let mut nonres = Vec::new();
    if !real_crossing {
        for k in 2..=s.k_max.max(2) {
            let target = I * (k as f64 * zeta0);
            let mut dist = f64::INFINITY;
            for (_, jj, gg) in f.pencils(lc)? {
                for (mu, _) in generalized_eigs(&jj, &gg, target, 1, EigenMethod::ShiftInvert { krylov: 40 })? {
                    dist = dist.min((mu - target).norm());
                }
            }
            nonres.push(NonresonanceEntry { k, distance: dist, ok: dist > s.gap_rel * zeta0 });
        }
    }
    // Normalize: largest |component| real positive.
    let mut xn = x.clone() / c(x.norm(), 0.0);
    let (mut imax, mut vmax) = (0, 0.0);
    for (i, z) in xn.iter().enumerate() {
        if z.norm() > vmax {
            vmax = z.norm();
            imax = i;
        }
    }
    let ph = xn[imax] / xn[imax].norm();
    xn /= ph;
    let mut w0 = f.embed(m, &xn);
    if let Some(w) = &w0 {
        // prefer the largest rigid component as phase reference
        let rc = f.rigid_parts(w);
        if let Some(z) = rc.iter().copied().max_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap()).filter(|z| z.norm() > 1e-10) {
            let ph = z / z.norm();
            xn /= ph;
            w0 = f.embed(m, &xn);
        }
    }
    let transversal = dnu.re.abs() > s.transversality_tol;
    let nonresonant = nonres.iter().all(|e| e.ok);
    if s.strict {
        if !simple {
            return Err(Error::Hypothesis(format!("multiple crossing: eigenvalue gap {gap:.2e} at lambda = {lc}")));
        }
        if !transversal {
            return Err(Error::Hypothesis(format!("transversality violated: Re dnu/dlambda = {:.2e}", dnu.re)));
        }
        if !nonresonant {
            return Err(Error::Hypothesis("resonance detected".into()));
        }
    }
    Ok(CriticalPoint {
        lambda_c: lc,
        nu,
        zeta0,
        m,
        w0,
        x0: xn.iter().copied().collect(),
        dnu_dlambda: dnu,
        simplicity_gap: gap,
        transversal,
        simple,
        nonresonant,
        nonresonance: nonres,
        real_crossing,
        residual,
    })
}

/// The steady-branch family of `L2` pencils, with warm-started Newton solves.
pub struct SteadyFamily<'a> {
    pub p: PhysicalParams,
    pub d: &'a Discretization,
    pub orders: Vec<i32>,
    pub sub: Subspace,
    cache: std::sync::Mutex<Vec<SteadyState>>,
}

impl<'a> SteadyFamily<'a> {
    pub fn new(p: PhysicalParams, d: &'a Discretization, orders: Vec<i32>, sub: Subspace) -> Self {
        SteadyFamily { p, d, orders, sub, cache: std::sync::Mutex::new(Vec::new()) }
    }

    pub fn state(&self, lambda: f64) -> Result<SteadyState> {
        let mut cache = self.cache.lock().unwrap();
        if let Some(s) = cache.iter().find(|s| s.lambda == lambda) {
            return Ok(s.clone());
        }
        let guess = cache
            .iter()
            .min_by(|a, b| (a.lambda - lambda).abs().partial_cmp(&(b.lambda - lambda).abs()).unwrap())
            .cloned();
        let st = match &guess {
            Some(g) if (g.lambda - lambda).abs() <= 0.25 * lambda.max(1.0) => crate::steady::steady_solve(lambda, &self.p, self.d, Some(g))
                .or_else(|_| crate::steady::steady_branch(g.lambda.min(lambda), g.lambda.max(lambda), 8, &self.p, self.d, 0.0).and_then(|r| {
                    r.points.into_iter().map(|bp| bp.state).find(|s| s.lambda == lambda).ok_or_else(|| Error::NoConvergence("continuation".into()))
                }))?,
            _ => {
                let br = crate::steady::steady_branch(0.0, lambda, (lambda / 5.0).ceil().max(1.0) as usize, &self.p, self.d, 0.0)?;
                br.points.last().unwrap().state.clone()
            }
        };
        cache.push(st.clone());
        Ok(st)
    }
}

impl OperatorFamily for SteadyFamily<'_> {
    fn pencils(&self, lambda: f64) -> Result<Vec<(i32, CMat, CMat)>> {
        let s = self.state(lambda)?;
        let op = assemble(OpKind::L2, &s, &self.p, self.d)?;
        Ok(self
            .orders
            .iter()
            .map(|&m| {
                let idx = mirror_indices(self.d, m, self.sub);
                (m, restrict(&op.weak_block(m), &idx), restrict(&op.gram_block(m), &idx))
            })
            .collect())
    }

    fn embed(&self, m: i32, x: &CVec) -> Option<CoupledField> {
        let idx = mirror_indices(self.d, m, self.sub);
        Some(embed_eigvec(self.d, m, &idx, x, self.sub))
    }

    fn rigid_parts(&self, w: &CoupledField) -> Vec<C64> {
        w.chi(self.d).into_iter().chain(w.sigma(self.d)).collect()
    }
}

/// Restricted index set of order `m` in `sub` (exposed for other modules).
pub fn subspace_indices(d: &Discretization, m: i32, sub: Subspace) -> Vec<usize> {
    mirror_indices(d, m, sub)
}

/// Mode list helper: which modes are retained.
pub fn subspace_modes(d: &Discretization, m: i32, sub: Subspace) -> Vec<Mode> {
    mirror_indices(d, m, sub).into_iter().map(|j| d.block(m).modes[j]).collect()
}

/// Planted family: a rotation block with real part `α(λ* − λ)` and
/// imaginary part `ζ`, plus stable spectator eigenvalues.
pub struct PlantedFamily {
    pub lambda_star: f64,
    pub alpha: f64,
    pub zeta: f64,
    pub beta: f64,
}

impl OperatorFamily for PlantedFamily {
    fn pencils(&self, lambda: f64) -> Result<Vec<(i32, CMat, CMat)>> {
        let a = self.alpha * (self.lambda_star - lambda);
        let b = self.zeta + self.beta * (lambda - self.lambda_star);
        let mut j = CMat::zeros(4, 4);
        j[(0, 0)] = c(a, 0.0);
        j[(0, 1)] = c(-b, 0.0);
        j[(1, 0)] = c(b, 0.0);
        j[(1, 1)] = c(a, 0.0);
        j[(2, 2)] = c(3.0, 0.0);
        j[(3, 3)] = c(5.0 + lambda, 0.0);
        // similarity by a fixed non-orthogonal matrix keeps the test honest
        let t = CMat::from_fn(4, 4, |i, k| c(if i == k { 1.0 } else { 0.1 * (i + 2 * k) as f64 / 7.0 }, 0.0));
        let ti = t.clone().try_inverse().ok_or_else(|| Error::Singular("planted similarity".into()))?;
        Ok(vec![(1, &t * j * ti, CMat::identity(4, 4))])
    }
}
