//! Steady free fall: Galerkin residual, Newton solve, continuation in the
//! Galilei number λ, and the linearization `L1` about the branch.
//!
//! Residual tested against every basis function `φ`:
//! `R(v; φ) = 2[v, φ] − λ e1·χ̄_φ − λ conv(χ_v − v; v, φ)`.
//! Taking `φ = v` gives the energy equality `2‖D v‖² = λ τ·e1` exactly,
//! because `(τ − v)·n = 0` on the sphere kills the boundary flux.

use serde::{Deserialize, Serialize};

use crate::discretization::{recover_pressure, CoupledField, Discretization, PressureField};
use crate::error::{Error, Result};
use crate::forms::{conv_matrix_a, conv_matrix_u, conv_vec, gravity_functional, pair, FieldSamples};
use crate::linalg::{c, CMat, CVec, C64};
use crate::spaces::{dissipation, inner_dissipation, PhysicalParams};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteadyState {
    pub v0: CoupledField,
    pub tau0: [f64; 3],
    pub omega0: [f64; 3],
    pub lambda: f64,
    pub residual_norm: f64,
    pub energy_gap: f64,
    /// `2‖D(v0)‖²`
    pub dissipation: f64,
    /// Largest coefficient outside the axisymmetric block.
    pub nonaxisymmetric: f64,
    pub newton_iterations: usize,
    /// `2‖D v0‖ / (λ κ1)`; at most 1 by the a-priori estimate.
    pub a_priori_ratio: f64,
    #[serde(skip)]
    pub p0: Option<PressureField>,
}

impl SteadyState {
    pub fn tau_norm(&self) -> f64 {
        self.tau0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn axis_aligned(&self) -> bool {
        let t = self.tau_norm();
        t == 0.0 || (self.tau0[1].hypot(self.tau0[2]) <= 1e-12 * t)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BranchPoint {
    pub state: SteadyState,
    pub tangent: CoupledField,
    pub axis_aligned: bool,
    /// Smallest singular value of `L1` (dissipation-normalized) on orders 0 and 1.
    pub sigma_min: [f64; 2],
    /// Sign of `det L1` on orders 0 and 1 (real by reflection symmetry).
    pub det_sign: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BranchReport {
    pub points: Vec<BranchPoint>,
    /// Set when continuation stopped at a suspected fold or steady bifurcation.
    pub stopped: Option<String>,
}

/// Residual of the steady problem per azimuthal order.
pub fn steady_residual(v: &CoupledField, lambda: f64, d: &Discretization) -> Result<Vec<CVec>> {
    v.check(d)?;
    let grav = gravity_functional(d);
    let vs = FieldSamples::of(v, d);
    let a = FieldSamples::translation_of(v, d).lin(c(1.0, 0.0), &vs, c(-1.0, 0.0));
    let conv = if lambda != 0.0 { Some(conv_vec(d, &a, &vs)) } else { None };
    let mut out = Vec::new();
    for (k, m) in v.ms().enumerate() {
        let cm = CVec::from_column_slice(v.block(m));
        let mut r = dissipation(d, m) * cm * c(2.0, 0.0) - &grav[k] * c(lambda, 0.0);
        if let Some(cv) = &conv {
            r -= &cv[k] * c(lambda, 0.0);
        }
        out.push(r);
    }
    Ok(out)
}

fn res_norm(r: &[CVec]) -> f64 {
    r.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt()
}

/// Weak form of `L1` on order `m` about the steady field `v`:
/// `2[u, φ] − λ conv(χ_v − v; u, φ) − λ conv(χ_u − u; v, φ)`.
pub fn assemble_l1_block(v: &CoupledField, lambda: f64, d: &Discretization, m: i32) -> CMat {
    let vs = FieldSamples::of(v, d);
    let a = FieldSamples::translation_of(v, d).lin(c(1.0, 0.0), &vs, c(-1.0, 0.0));
    let mut j = dissipation(d, m) * c(2.0, 0.0);
    if lambda != 0.0 {
        j -= (conv_matrix_u(d, m, &a) + conv_matrix_a(d, m, &vs)) * c(lambda, 0.0);
    }
    j
}

fn finish_state(v: CoupledField, lambda: f64, d: &Discretization, iters: usize) -> Result<SteadyState> {
    let r = steady_residual(&v, lambda, d)?;
    let diss = 2.0 * inner_dissipation(&v, &v, d)?.re;
    let chi = v.chi(d);
    let sg = v.sigma(d);
    let tau0 = chi.map(|z| z.re);
    let omega0 = sg.map(|z| z.re);
    let mut nonaxi: f64 = 0.0;
    for m in v.ms() {
        if m != 0 {
            nonaxi = nonaxi.max(v.block(m).iter().map(|z| z.norm()).fold(0.0, f64::max));
        }
    }
    Ok(SteadyState {
        energy_gap: (diss - lambda * tau0[0]).abs(),
        dissipation: diss,
        residual_norm: res_norm(&r),
        p0: recover_pressure(&v, d).ok(),
        v0: v,
        tau0,
        omega0,
        lambda,
        nonaxisymmetric: nonaxi,
        newton_iterations: iters,
        a_priori_ratio: 0.0,
    })
}

/// Newton iteration in the axisymmetric subspace (order-0 block) starting
/// from `guess` (or zero).
pub fn steady_solve(lambda: f64, _p: &PhysicalParams, d: &Discretization, guess: Option<&SteadyState>) -> Result<SteadyState> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput("lambda must be non-negative".into()));
    }
    let mut v = CoupledField::zeros(d);
    if lambda == 0.0 {
        return finish_state(v, 0.0, d, 0);
    }
    if let Some(g) = guess {
        g.v0.check(d)?;
        *v.block_mut(0) = g.v0.block(0).to_vec();
    }
    let tol = 1e-11 * (1.0 + lambda);
    let mut last = f64::INFINITY;
    let mut iters = 0;
    for it in 0..40 {
        let r = steady_residual(&v, lambda, d)?;
        let rn = res_norm(&r);
        last = rn;
        iters = it;
        if rn < tol {
            polish(&mut v, rn, lambda, d)?;
            break;
        }
        let j = assemble_l1_block(&v, lambda, d, 0);
        let k0 = d.m_max();
        let delta = j.lu().solve(&r[k0]).ok_or_else(|| Error::Singular("steady Jacobian".into()))?;
        let dn = delta.norm();
        let b = v.block_mut(0);
        for (x, dx) in b.iter_mut().zip(delta.iter()) {
            *x -= dx;
            x.im = 0.0;
        }
        if dn < 1e-15 * (1.0 + CVec::from_column_slice(v.block(0)).norm()) {
            let r = steady_residual(&v, lambda, d)?;
            last = res_norm(&r);
            iters = it + 1;
            break;
        }
        if !rn.is_finite() {
            break;
        }
    }
    v.real = true;
    let s = finish_state(v, lambda, d, iters)?;
    if !(s.residual_norm < 1e-10 * (1.0 + lambda)) {
        return Err(Error::NoConvergence(format!("steady Newton stalled at residual {last:.3e} (lambda = {lambda})")));
    }
    if s.tau_norm() == 0.0 {
        return Err(Error::NoConvergence("degenerate state: zero translation at positive lambda".into()));
    }
    let mut s = s;
    s.a_priori_ratio = (2.0 * s.dissipation).sqrt() / (lambda * kappa1(d)?);
    if s.a_priori_ratio > 1.0 + 1e-8 {
        return Err(Error::NoConvergence(format!("a-priori bound violated: 2|Dv| / (lambda kappa1) = {:.6}", s.a_priori_ratio)));
    }
    Ok(s)
}

/// Extra Newton steps past the tolerance, kept while the residual drops:
/// quadratic convergence takes the state to rounding level, so nearby
/// parameters give consistently converged states.
fn polish(v: &mut CoupledField, mut rn: f64, lambda: f64, d: &Discretization) -> Result<()> {
    let k0 = d.m_max();
    for _ in 0..3 {
        let r = steady_residual(v, lambda, d)?;
        let j = assemble_l1_block(v, lambda, d, 0);
        let Some(delta) = j.lu().solve(&r[k0]) else { return Ok(()) };
        let mut t = v.clone();
        for (x, dx) in t.block_mut(0).iter_mut().zip(delta.iter()) {
            *x -= dx;
            x.im = 0.0;
        }
        let rt = res_norm(&steady_residual(&t, lambda, d)?);
        if !(rt < 0.5 * rn) {
            return Ok(());
        }
        *v = t;
        rn = rt;
    }
    Ok(())
}

/// `dv/dλ` along the branch: `L1 v' = e1-functional + conv(χ_v − v; v, ·)`.
pub fn branch_tangent(s: &SteadyState, d: &Discretization) -> Result<CoupledField> {
    let v = &s.v0;
    let vs = FieldSamples::of(v, d);
    let a = FieldSamples::translation_of(v, d).lin(c(1.0, 0.0), &vs, c(-1.0, 0.0));
    let k0 = d.m_max();
    let rhs = &gravity_functional(d)[k0] + &conv_vec(d, &a, &vs)[k0];
    let j = assemble_l1_block(v, s.lambda, d, 0);
    let t = j.lu().solve(&rhs).ok_or_else(|| Error::Singular("tangent system".into()))?;
    let mut f = CoupledField::zeros(d);
    *f.block_mut(0) = t.iter().map(|z| c(z.re, 0.0)).collect();
    Ok(f)
}

/// Smallest singular value of `L1` in the dissipation-normalized metric,
/// and the sign of its (real) determinant.
pub fn l1_diagnostics(v: &CoupledField, lambda: f64, d: &Discretization, m: i32) -> Result<(f64, f64)> {
    let j = assemble_l1_block(v, lambda, d, m);
    let dm = dissipation(d, m);
    let l = dm.cholesky().ok_or_else(|| Error::Singular("dissipation matrix".into()))?.l();
    let li = l.clone().try_inverse().ok_or_else(|| Error::Singular("dissipation factor".into()))?;
    let scaled = &li * &j * li.adjoint();
    let smin = crate::linalg::min_singular_value(&scaled);
    let lu = j.lu();
    let u = lu.u();
    let mut phase = c(1.0, 0.0);
    for k in 0..u.nrows() {
        let z = u[(k, k)];
        phase *= z / z.norm();
    }
    // permutation parity
    let perm_sign = if lu.p().determinant::<f64>() < 0.0 { -1.0 } else { 1.0 };
    Ok((smin, (phase.re * perm_sign).signum()))
}

/// Natural-parameter continuation with step halving on Newton failure.
pub fn steady_branch(lambda_from: f64, lambda_to: f64, steps: usize, p: &PhysicalParams, d: &Discretization, sigma_tol: f64) -> Result<BranchReport> {
    if !(lambda_from < lambda_to) || steps == 0 {
        return Err(Error::InvalidInput("need lambda_from < lambda_to and steps > 0".into()));
    }
    let mut points: Vec<BranchPoint> = Vec::new();
    let mut prev: Option<SteadyState> = None;
    let h = (lambda_to - lambda_from) / steps as f64;
    for k in 0..=steps {
        let target = lambda_from + h * k as f64;
        let state = match &prev {
            None => steady_solve(target, p, d, None)?,
            Some(pr) => continuation_step(pr, target, p, d)?,
        };
        let tangent = if state.lambda > 0.0 { branch_tangent(&state, d)? } else { CoupledField::zeros(d) };
        let (s0, d0) = l1_diagnostics(&state.v0, state.lambda, d, 0)?;
        let (s1, d1) = l1_diagnostics(&state.v0, state.lambda, d, 1)?;
        let bp = BranchPoint { axis_aligned: state.axis_aligned(), state: state.clone(), tangent, sigma_min: [s0, s1], det_sign: [d0, d1] };
        let flip = points.last().map(|q: &BranchPoint| q.det_sign != bp.det_sign).unwrap_or(false);
        let collapse = s0 < sigma_tol || s1 < sigma_tol;
        points.push(bp);
        if collapse || flip {
            let msg = format!(
                "fold-or-bifurcation-detected near lambda = {target:.6} (sigma_min = [{s0:.3e}, {s1:.3e}], determinant sign change: {flip})"
            );
            return Ok(BranchReport { points, stopped: Some(msg) });
        }
        prev = Some(state);
    }
    Ok(BranchReport { points, stopped: None })
}

fn continuation_step(prev: &SteadyState, target: f64, p: &PhysicalParams, d: &Discretization) -> Result<SteadyState> {
    let mut cur = prev.clone();
    let mut h = target - prev.lambda;
    let mut halvings = 0;
    while cur.lambda < target {
        let next = (cur.lambda + h).min(target);
        match steady_solve(next, p, d, Some(&cur)) {
            Ok(s) => {
                cur = s;
            }
            Err(e) => {
                halvings += 1;
                h *= 0.5;
                if halvings > 12 {
                    return Err(Error::NoConvergence(format!("continuation failed beyond lambda = {} ({e})", cur.lambda)));
                }
            }
        }
    }
    Ok(cur)
}

/// Discrete constant `κ1` with `|χ| + |σ| ≤ κ1 ‖D u‖` on the basis span.
pub fn kappa1(d: &Discretization) -> Result<f64> {
    let mut best: f64 = 0.0;
    for m in [0i32, 1] {
        let blk = d.block(m);
        let dm = dissipation(d, m);
        let idx = [blk.trans.unwrap(), blk.rot.unwrap()];
        let mut sel = CMat::zeros(dm.nrows(), 2);
        sel[(idx[0], 0)] = c(1.0, 0.0);
        sel[(idx[1], 1)] = c(1.0, 0.0);
        let x = dm.lu().solve(&sel).ok_or_else(|| Error::Singular("dissipation".into()))?;
        let small = CMat::from_fn(2, 2, |i, j| x[(idx[i], j)]) * c(Discretization::cnorm2(m), 0.0);
        let ev = small.symmetric_eigenvalues();
        best = best.max(ev.iter().fold(0.0, |a: f64, b| a.max(*b)));
    }
    // |χ| + |σ| ≤ √2 (|χ|² + |σ|²)^{1/2}, and orders ±1 share one constant.
    Ok((2.0 * best).sqrt())
}

/// Energy pairing `R(v; v)` — zero for a converged state.
pub fn energy_pairing(v: &CoupledField, lambda: f64, d: &Discretization) -> Result<C64> {
    Ok(pair(&steady_residual(v, lambda, d)?, v))
}
