//! Truncated-shell geometry and the solenoidal (poloidal–toroidal) spectral basis.
//!
//! The fluid occupies `1 ≤ r ≤ r_out`. Spherical angles are taken about the
//! gravity axis `e1`: `x1 = r cosθ`, `x2 = r sinθ cosφ`, `x3 = r sinθ sinφ`.
//! A field is a sum of azimuthal blocks `u_m(r, θ) e^{imφ}`; block `m`
//! collects
//!
//! - two rigid lifts (|m| ≤ 1): smooth divergence-free extensions whose trace
//!   at `r = 1` is the constant vector `c_m` (translation) or `c_m × x`
//!   (rotation), with `c_0 = e1`, `c_{±1} = e2 ± i e3`;
//! - poloidal bubbles `curl curl (x f_n(s) Y_lm)`, `f_n = (1-s²)² P_n(s)`;
//! - toroidal bubbles `curl (x g_n(s) Y_lm)`, `g_n = (1-s²) P_n(s)`;
//!
//! with the logarithmic map `r = exp(a(1+s))`, `a = ln(r_out)/2`, which
//! clusters resolution near the sphere. Every basis function is exactly
//! solenoidal and vanishes at `r_out`; bubbles vanish at `r = 1`.
//!
//! Vectors on the grid are stored in the local `(e_r, e_θ, e_φ)` frame;
//! gradients as `G[3a + b] = e_a · ((e_b·∇) u)`. The boundary normal `n`
//! points out of the fluid (into the sphere), `n = -e_r` at `r = 1`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, CMat, CVec, ZMat, C64, I};
use crate::numerics::{gauss_legendre, legendre_table, Jet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Spectral,
    Reduced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationConfig {
    pub l_max: usize,
    pub m_max: usize,
    pub n_r: usize,
    pub r_out: f64,
    pub k_max: usize,
    pub backend: Backend,
}

impl DiscretizationConfig {
    /// Resolution used for the quantitative checks. `r_out` is large
    /// because confinement raises the drag by about `9/(4 r_out)`.
    pub fn reference() -> Self {
        DiscretizationConfig { l_max: 8, m_max: 1, n_r: 32, r_out: 400.0, k_max: 4, backend: Backend::Spectral }
    }

    /// Small dense backend for fast end-to-end runs.
    pub fn reduced() -> Self {
        DiscretizationConfig { l_max: 2, m_max: 2, n_r: 8, r_out: 12.0, k_max: 2, backend: Backend::Reduced }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.l_max < 2 {
            return bad("l_max must be at least 2");
        }
        if self.m_max < 1 || self.m_max > self.l_max {
            return bad("m_max must satisfy 1 <= m_max <= l_max");
        }
        if self.n_r < 8 {
            return bad("n_r must be at least 8");
        }
        if !(self.r_out > 2.0) || !self.r_out.is_finite() {
            return bad("r_out must exceed 2");
        }
        if self.k_max < 1 {
            return bad("k_max must be at least 1");
        }
        if self.backend == Backend::Reduced && (self.l_max > 2 || self.n_r > 8) {
            return bad("reduced backend requires l_max <= 2 and n_r <= 8");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Translation,
    Rotation,
    Poloidal { l: usize, n: usize },
    Toroidal { l: usize, n: usize },
}

/// Pointwise values of one basis function (azimuthal factor stripped).
#[derive(Clone, Copy, Debug)]
pub struct PointEval {
    pub u: [C64; 3],
    pub g: [C64; 9],
    pub lap: [C64; 3],
    /// Pressure that balances the vector Laplacian of a Stokes flow.
    pub p: C64,
}

/// Evaluation tables of one azimuthal order `m ≥ 0`; block `-m` is the
/// complex conjugate of block `m` (including the lift data).
#[derive(Clone, Debug)]
pub struct Block {
    pub m: usize,
    pub modes: Vec<Mode>,
    pub trans: Option<usize>,
    pub rot: Option<usize>,
    pub eu: ZMat,
    pub eg: ZMat,
    pub elap: ZMat,
    pub su: ZMat,
    pub sg: ZMat,
    pub sp: ZMat,
    /// `c_m` on the volume grid (3Q), for |m| ≤ 1.
    pub cvec: Option<Vec<C64>>,
    /// `c_m` on the surface grid (3S).
    pub cvec_surf: Option<Vec<C64>>,
    /// `∫_Ω φ_j · conj(φ_i)` at `(i, j)`.
    pub gram_fluid: CMat,
    /// `∫_Ω D(φ_j) : conj(D(φ_i))` at `(i, j)`.
    pub dissip: CMat,
}

impl Block {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Discretization {
    pub cfg: DiscretizationConfig,
    /// Map constant: `r = exp(a (1 + s))`.
    pub a: f64,
    pub r_cut: f64,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    pub cos_t: Vec<f64>,
    pub sin_t: Vec<f64>,
    pub w_t: Vec<f64>,
    /// Volume weights per meridional node `q = ir * n_theta + it`, including `2π r²`.
    pub w_vol: Vec<f64>,
    pub w_vol3: Vec<f64>,
    pub w_vol9: Vec<f64>,
    /// Surface weights on `r = 1`, including `2π`.
    pub w_surf: Vec<f64>,
    pub w_surf3: Vec<f64>,
    pub w_surf9: Vec<f64>,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Copy, Debug)]
enum Radial {
    Pol(usize),
    Tor(usize),
    TransLift(usize),
    RotLift(usize),
    CompactTrans(usize),
    CompactRot(usize),
}

/// `Θ_{1,|m|}` divided by `cosθ` (m = 0) or `sinθ` (|m| = 1).
fn n1(ma: usize) -> f64 {
    if ma == 0 {
        (3.0 / (4.0 * PI)).sqrt()
    } else {
        (3.0 / (8.0 * PI)).sqrt()
    }
}

fn pol_u(lf: f64, m: f64, r: f64, s: f64, f: f64, f1: f64, th: f64, th1: f64) -> [C64; 3] {
    let h = f / r + f1;
    [c(lf * f / r * th, 0.0), c(h * th1, 0.0), c(0.0, m * h * th / s)]
}

fn tor_u(m: f64, s: f64, g: f64, th: f64, th1: f64) -> [C64; 3] {
    [c(0.0, 0.0), c(0.0, m * g * th / s), c(-g * th1, 0.0)]
}

fn grad_from(r: f64, cs: f64, s: f64, m: f64, u: [C64; 3], ur: [C64; 3], ut: [C64; 3]) -> [C64; 9] {
    let up = [I * m * u[0], I * m * u[1], I * m * u[2]];
    let rs = r * s;
    [
        ur[0],
        (ut[0] - u[1]) / r,
        up[0] / rs - u[2] / r,
        ur[1],
        (ut[1] + u[0]) / r,
        (up[1] - u[2] * cs) / rs,
        ur[2],
        ut[2] / r,
        up[2] / rs + u[0] / r + u[1] * cs / rs,
    ]
}

impl Discretization {
    pub fn n_radial_quad(&self) -> usize {
        self.r.len()
    }

    pub fn n_theta(&self) -> usize {
        self.cos_t.len()
    }

    pub fn n_q(&self) -> usize {
        self.r.len() * self.cos_t.len()
    }

    pub fn m_max(&self) -> usize {
        self.cfg.m_max
    }

    pub fn block(&self, m: i32) -> &Block {
        &self.blocks[m.unsigned_abs() as usize]
    }

    pub fn block_len(&self, m: i32) -> usize {
        self.block(m).len()
    }

    /// Coefficient index of `mode` in block `m`.
    pub fn index_of(&self, m: i32, mode: Mode) -> Option<usize> {
        self.block(m).modes.iter().position(|x| *x == mode)
    }

    pub fn total_dofs(&self) -> usize {
        (-(self.m_max() as i32)..=self.m_max() as i32).map(|m| self.block_len(m)).sum()
    }

    fn cutoff(&self, r: f64) -> Jet {
        let len = 2.0 * self.r_cut - 1.0;
        let t = Jet([(r - 1.0) / len, 1.0 / len, 0.0, 0.0]);
        if t.0[0] <= 0.0 {
            return Jet::cst(1.0);
        }
        if t.0[0] >= 1.0 {
            return Jet::cst(0.0);
        }
        let g1 = (-t.recip()).exp();
        let g2 = (-(Jet::cst(1.0) - t).recip()).exp();
        Jet::cst(1.0) - g1 * (g1 + g2).recip()
    }

    /// `(1 − s)²(2 + s)/4`: one with zero slope at the sphere, vanishing to
    /// first order at the outer wall; analytic in `s`, so the basis lift
    /// needs no non-polynomial correction. The rotation lift carries an extra
    /// `r⁻²` (the rotlet decay): a lift growing like `r` across a wide shell
    /// must be cancelled by the bubbles, and the torque rows then lose about
    /// eight digits to rounding.
    fn hermite_lift(&self, rj: Jet) -> Jet {
        let sj = rj.ln().scale(1.0 / self.a) - Jet::cst(1.0);
        let om = Jet::cst(1.0) - sj;
        (om * om * (sj + Jet::cst(2.0))).scale(0.25)
    }

    fn radial_jet(&self, kind: Radial, r: f64) -> [f64; 4] {
        let rj = Jet::var(r);
        match kind {
            Radial::Pol(n) | Radial::Tor(n) => {
                let sj = rj.ln().scale(1.0 / self.a) - Jet::cst(1.0);
                let mut p0 = Jet::cst(1.0);
                let mut p1 = sj;
                let pn = if n == 0 {
                    p0
                } else {
                    for k in 1..n {
                        let p2 = (sj * p1).scale((2 * k + 1) as f64 / (k + 1) as f64) - p0.scale(k as f64 / (k + 1) as f64);
                        p0 = p1;
                        p1 = p2;
                    }
                    p1
                };
                let mut b = Jet::cst(1.0) - sj * sj;
                if sj.0[0] <= -1.0 {
                    b.0[0] = 0.0;
                }
                match kind {
                    Radial::Pol(_) => (b * b * pn).derivs(),
                    _ => (b * pn).derivs(),
                }
            }
            Radial::TransLift(ma) => (rj * self.hermite_lift(rj)).scale(0.5 / n1(ma)).derivs(),
            Radial::RotLift(ma) => ((rj * rj).recip() * self.hermite_lift(rj)).scale(1.0 / n1(ma)).derivs(),
            Radial::CompactTrans(ma) => (rj * self.cutoff(r)).scale(0.5 / n1(ma)).derivs(),
            Radial::CompactRot(ma) => (rj * self.cutoff(r)).scale(1.0 / n1(ma)).derivs(),
        }
    }

    fn modes_for(&self, m: usize) -> Vec<Mode> {
        let mut modes = Vec::new();
        if m <= 1 {
            modes.push(Mode::Translation);
            modes.push(Mode::Rotation);
        }
        let l0 = m.max(1);
        for l in l0..=self.cfg.l_max {
            for n in 0..self.cfg.n_r - 4 {
                modes.push(Mode::Poloidal { l, n });
            }
        }
        for l in l0..=self.cfg.l_max {
            for n in 0..self.cfg.n_r - 2 {
                modes.push(Mode::Toroidal { l, n });
            }
        }
        modes
    }

    /// Point values of `mode` (block `m ≥ 0`) at radius `r`, polar angle with
    /// cosine `x` and sine `s`.
    pub fn eval_mode(&self, m: usize, mode: Mode, r: f64, x: f64, s: f64) -> PointEval {
        let (p, dp) = legendre_table(self.cfg.l_max, self.cfg.m_max.max(1), x, s);
        self.eval_mode_tab(m, mode, r, x, s, &p, &dp)
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_mode_tab(&self, m: usize, mode: Mode, r: f64, x: f64, s: f64, p: &[Vec<f64>], dp: &[Vec<f64>]) -> PointEval {
        self.eval_mode_ext(m, mode, r, x, s, p, dp, false)
    }

    /// With `compact`, rigid modes use the cut-off lift supported in `r ≤ 2 r_cut`.
    #[allow(clippy::too_many_arguments)]
    fn eval_mode_ext(&self, m: usize, mode: Mode, r: f64, x: f64, s: f64, p: &[Vec<f64>], dp: &[Vec<f64>], compact: bool) -> PointEval {
        let mf = m as f64;
        let (l, rad, pol) = match mode {
            Mode::Translation if compact => (1, self.radial_jet(Radial::CompactTrans(m), r), true),
            Mode::Rotation if compact => (1, self.radial_jet(Radial::CompactRot(m), r), false),
            Mode::Translation => (1, self.radial_jet(Radial::TransLift(m), r), true),
            Mode::Rotation => (1, self.radial_jet(Radial::RotLift(m), r), false),
            Mode::Poloidal { l, n } => (l, self.radial_jet(Radial::Pol(n), r), true),
            Mode::Toroidal { l, n } => (l, self.radial_jet(Radial::Tor(n), r), false),
        };
        let lf = (l * (l + 1)) as f64;
        let th = p[l][m];
        let th1 = dp[l][m];
        let th2 = -x / s * th1 - (lf - mf * mf / (s * s)) * th;
        let dth_s = th1 / s - x * th / (s * s);
        let [f, f1, f2, f3] = rad;
        if pol {
            let u = pol_u(lf, mf, r, s, f, f1, th, th1);
            let h = f / r + f1;
            let h1 = f2 + f1 / r - f / (r * r);
            let ur = [c(lf * (f1 / r - f / (r * r)) * th, 0.0), c(h1 * th1, 0.0), c(0.0, mf * h1 * th / s)];
            let ut = [c(lf * f / r * th1, 0.0), c(h * th2, 0.0), c(0.0, mf * h * dth_s)];
            let g = grad_from(r, x, s, mf, u, ur, ut);
            let df = f2 + 2.0 * f1 / r - lf * f / (r * r);
            let df1 = f3 + 2.0 * f2 / r - 2.0 * f1 / (r * r) - lf * f1 / (r * r) + 2.0 * lf * f / (r * r * r);
            let lap = pol_u(lf, mf, r, s, df, df1, th, th1);
            PointEval { u, g, lap, p: c((df + r * df1) * th, 0.0) }
        } else {
            let u = tor_u(mf, s, f, th, th1);
            let ur = [c(0.0, 0.0), c(0.0, mf * f1 * th / s), c(-f1 * th1, 0.0)];
            let ut = [c(0.0, 0.0), c(0.0, mf * f * dth_s), c(-f * th2, 0.0)];
            let g = grad_from(r, x, s, mf, u, ur, ut);
            let dg = f2 + 2.0 * f1 / r - lf * f / (r * r);
            let lap = tor_u(mf, s, dg, th, th1);
            PointEval { u, g, lap, p: c(0.0, 0.0) }
        }
    }

    /// The constant vector `c_m` (|m| ≤ 1, `m ≥ 0`) in the local frame.
    pub fn const_vec(m: usize, x: f64, s: f64) -> [C64; 3] {
        if m == 0 {
            [c(x, 0.0), c(-s, 0.0), c(0.0, 0.0)]
        } else {
            [c(s, 0.0), c(x, 0.0), c(0.0, 1.0)]
        }
    }

    /// `c_m × e_r` in the local frame.
    pub fn rot_vec(m: usize, x: f64, s: f64) -> [C64; 3] {
        if m == 0 {
            [c(0.0, 0.0), c(0.0, 0.0), c(s, 0.0)]
        } else {
            [c(0.0, 0.0), c(0.0, 1.0), c(-x, 0.0)]
        }
    }

    /// `|c_m|²`.
    pub fn cnorm2(m: i32) -> f64 {
        if m == 0 {
            1.0
        } else {
            2.0
        }
    }
}

/// Build all tables and the per-block Gram and dissipation matrices.
pub fn build_discretization(cfg: &DiscretizationConfig) -> Result<Discretization> {
    cfg.validate()?;
    let a = cfg.r_out.ln() / 2.0;
    let nqr = (3 * cfg.n_r) / 2 + 4;
    let nth = (3 * cfg.l_max) / 2 + 3;
    let (xt, wt) = gauss_legendre(nth);
    let r_cut = 2.0f64.min((1.0 + cfg.r_out) / 4.0);
    let (sq, ws) = gauss_legendre(nqr);
    let r: Vec<f64> = sq.iter().map(|s| (a * (1.0 + s)).exp()).collect();
    let sin_t: Vec<f64> = xt.iter().map(|x| (1.0 - x * x).sqrt()).collect();
    let mut w_vol = Vec::with_capacity(nqr * nth);
    for ir in 0..nqr {
        for it in 0..nth {
            w_vol.push(2.0 * PI * ws[ir] * a * r[ir].powi(3) * wt[it]);
        }
    }
    let w_surf: Vec<f64> = wt.iter().map(|w| 2.0 * PI * w).collect();
    let rep = |w: &[f64], k: usize| w.iter().flat_map(|v| std::iter::repeat(*v).take(k)).collect::<Vec<f64>>();
    let mut d = Discretization {
        cfg: cfg.clone(),
        a,
        r_cut,
        w_vol3: rep(&w_vol, 3),
        w_vol9: rep(&w_vol, 9),
        w_surf3: rep(&w_surf, 3),
        w_surf9: rep(&w_surf, 9),
        r,
        s: sq,
        cos_t: xt,
        sin_t,
        w_t: wt,
        w_vol,
        w_surf,
        blocks: Vec::new(),
    };
    let tabs: Vec<_> = (0..nth).map(|it| legendre_table(cfg.l_max, cfg.m_max.max(1), d.cos_t[it], d.sin_t[it])).collect();
    let nq = d.n_q();
    for m in 0..=cfg.m_max {
        let modes = d.modes_for(m);
        let nm = modes.len();
        let mut eu = ZMat::zeros(3 * nq, nm);
        let mut eg = ZMat::zeros(9 * nq, nm);
        let mut elap = ZMat::zeros(3 * nq, nm);
        let mut su = ZMat::zeros(3 * nth, nm);
        let mut sg = ZMat::zeros(9 * nth, nm);
        let mut sp = ZMat::zeros(nth, nm);
        for (j, mode) in modes.iter().enumerate() {
            for ir in 0..nqr {
                for it in 0..nth {
                    let q = ir * nth + it;
                    let (x, s) = (d.cos_t[it], d.sin_t[it]);
                    let e = d.eval_mode_tab(m, *mode, d.r[ir], x, s, &tabs[it].0, &tabs[it].1);
                    for k in 0..3 {
                        eu.set(3 * q + k, j, e.u[k]);
                        elap.set(3 * q + k, j, e.lap[k]);
                    }
                    for k in 0..9 {
                        eg.set(9 * q + k, j, e.g[k]);
                    }
                }
            }
            for it in 0..nth {
                let (x, s) = (d.cos_t[it], d.sin_t[it]);
                let e = d.eval_mode_tab(m, *mode, 1.0, x, s, &tabs[it].0, &tabs[it].1);
                for k in 0..3 {
                    su.set(3 * it + k, j, e.u[k]);
                }
                for k in 0..9 {
                    sg.set(9 * it + k, j, e.g[k]);
                }
                sp.set(it, j, e.p);
            }
        }
        let (cvec, cvec_surf) = if m <= 1 {
            let mut v = Vec::with_capacity(3 * nq);
            for _ir in 0..nqr {
                for it in 0..nth {
                    v.extend(Discretization::const_vec(m, d.cos_t[it], d.sin_t[it]));
                }
            }
            let vs = (0..nth).flat_map(|it| Discretization::const_vec(m, d.cos_t[it], d.sin_t[it])).collect();
            (Some(v), Some(vs))
        } else {
            (None, None)
        };
        let gram_fluid = eu.adj_mul(&d.w_vol3, &eu, false);
        let dg = sym_grad(&eg);
        let dissip = dg.adj_mul(&d.w_vol9, &dg, false);
        let trans = modes.iter().position(|x| *x == Mode::Translation);
        let rot = modes.iter().position(|x| *x == Mode::Rotation);
        d.blocks.push(Block { m, modes, trans, rot, eu, eg, elap, su, sg, sp, cvec, cvec_surf, gram_fluid, dissip });
    }
    Ok(d)
}

/// Parity of a mode under the reflection `x3 → −x3` combined with the
/// exchange of orders `m ↔ −m`: a field is mirror-symmetric iff
/// `c_{−m} = S c_m` with `S = diag(mirror_sign)`.
pub fn mirror_sign(mode: Mode) -> f64 {
    match mode {
        Mode::Translation | Mode::Poloidal { .. } => 1.0,
        Mode::Rotation | Mode::Toroidal { .. } => -1.0,
    }
}

/// Symmetric part of stacked gradients (9 rows per node).
pub fn sym_grad(eg: &ZMat) -> ZMat {
    let mut out = eg.clone();
    let nq = eg.nrows() / 9;
    for q in 0..nq {
        for a in 0..3 {
            for b in 0..3 {
                let i = 9 * q + 3 * a + b;
                let t = 9 * q + 3 * b + a;
                for j in 0..eg.ncols() {
                    out.re[(i, j)] = 0.5 * (eg.re[(i, j)] + eg.re[(t, j)]);
                    out.im[(i, j)] = 0.5 * (eg.im[(i, j)] + eg.im[(t, j)]);
                }
            }
        }
    }
    out
}

/// Discrete velocity field with rigid body degrees of freedom: one complex
/// coefficient vector per azimuthal order `m = -m_max..=m_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledField {
    pub m_max: usize,
    pub blocks: Vec<Vec<C64>>,
    /// Real fields satisfy `block(-m) = conj(block(m))`.
    pub real: bool,
}

impl CoupledField {
    pub fn zeros(d: &Discretization) -> Self {
        let m_max = d.m_max();
        let blocks = (-(m_max as i32)..=m_max as i32).map(|m| vec![c(0.0, 0.0); d.block_len(m)]).collect();
        CoupledField { m_max, blocks, real: true }
    }

    pub fn block(&self, m: i32) -> &[C64] {
        &self.blocks[(m + self.m_max as i32) as usize]
    }

    pub fn block_mut(&mut self, m: i32) -> &mut Vec<C64> {
        &mut self.blocks[(m + self.m_max as i32) as usize]
    }

    pub fn ms(&self) -> std::ops::RangeInclusive<i32> {
        -(self.m_max as i32)..=self.m_max as i32
    }

    pub fn check(&self, d: &Discretization) -> Result<()> {
        if self.m_max != d.m_max() || self.blocks.len() != 2 * d.m_max() + 1 {
            return Err(Error::IndexMismatch("azimuthal range differs from discretization".into()));
        }
        for m in self.ms() {
            if self.block(m).len() != d.block_len(m) {
                return Err(Error::IndexMismatch(format!("block {m} length differs from discretization")));
            }
        }
        Ok(())
    }

    /// Single-block field.
    pub fn from_block(d: &Discretization, m: i32, v: Vec<C64>) -> Self {
        let mut f = CoupledField::zeros(d);
        *f.block_mut(m) = v;
        f.real = false;
        f
    }

    /// Rigid motion `χ + σ×x` extended into the fluid by the smooth lifts.
    pub fn from_rigid(d: &Discretization, chi: [C64; 3], sigma: [C64; 3]) -> Self {
        let mut f = CoupledField::zeros(d);
        let (a, b) = (split_rigid(chi), split_rigid(sigma));
        for (k, m) in [-1, 0, 1].into_iter().enumerate() {
            let blk = d.block(m);
            let v = f.block_mut(m);
            v[blk.trans.unwrap()] = a[k];
            v[blk.rot.unwrap()] = b[k];
        }
        f.real = chi.iter().chain(sigma.iter()).all(|z| z.im == 0.0);
        f
    }

    pub fn chi(&self, d: &Discretization) -> [C64; 3] {
        join_rigid(self.rigid_coeffs(d, true))
    }

    pub fn sigma(&self, d: &Discretization) -> [C64; 3] {
        join_rigid(self.rigid_coeffs(d, false))
    }

    /// `[a_{-1}, a_0, a_1]` for translation (or rotation).
    pub fn rigid_coeffs(&self, d: &Discretization, translation: bool) -> [C64; 3] {
        let mut out = [c(0.0, 0.0); 3];
        for (k, m) in [-1, 0, 1].into_iter().enumerate() {
            let blk = d.block(m);
            let idx = if translation { blk.trans } else { blk.rot };
            out[k] = self.block(m)[idx.unwrap()];
        }
        out
    }

    pub fn scale(&self, s: C64) -> Self {
        let mut f = self.clone();
        for b in f.blocks.iter_mut() {
            for z in b.iter_mut() {
                *z *= s;
            }
        }
        if s.im != 0.0 {
            f.real = false;
        }
        f
    }

    pub fn axpy(&mut self, s: C64, o: &CoupledField) {
        for (b, ob) in self.blocks.iter_mut().zip(&o.blocks) {
            for (z, w) in b.iter_mut().zip(ob) {
                *z += s * w;
            }
        }
        self.real = self.real && o.real && s.im == 0.0;
    }

    pub fn add(&self, o: &CoupledField) -> Self {
        let mut f = self.clone();
        f.axpy(c(1.0, 0.0), o);
        f
    }

    pub fn sub(&self, o: &CoupledField) -> Self {
        let mut f = self.clone();
        f.axpy(c(-1.0, 0.0), o);
        f
    }

    pub fn conj(&self) -> Self {
        let mut f = self.clone();
        let mm = self.m_max as i32;
        for m in self.ms() {
            *f.block_mut(m) = self.block(-m).iter().map(|z| z.conj()).collect();
        }
        let _ = mm;
        f
    }

    /// Real part of the represented field: `(u + conj(u)) / 2`.
    pub fn real_part(&self) -> Self {
        let mut f = self.add(&self.conj()).scale(c(0.5, 0.0));
        f.real = true;
        f
    }

    pub fn coeff_norm(&self) -> f64 {
        self.blocks.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest deviation from conjugate symmetry across blocks.
    pub fn realness_defect(&self) -> f64 {
        let mut e: f64 = 0.0;
        for m in self.ms() {
            for (a, b) in self.block(m).iter().zip(self.block(-m)) {
                e = e.max((a - b.conj()).norm());
            }
        }
        e
    }
}

/// `χ = Σ a_m c_m`: returns `[a_{-1}, a_0, a_1]`.
pub fn split_rigid(v: [C64; 3]) -> [C64; 3] {
    [(v[1] + I * v[2]) * 0.5, v[0], (v[1] - I * v[2]) * 0.5]
}

pub fn join_rigid(a: [C64; 3]) -> [C64; 3] {
    [a[1], a[2] + a[0], I * (a[2] - a[0])]
}

/// Velocity samples on the meridional grid, one 3Q vector per azimuthal
/// order, plus the rigid-body part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub m_max: usize,
    pub u: Vec<Vec<C64>>,
    pub chi: [C64; 3],
    pub sigma: [C64; 3],
}

impl GridField {
    pub fn block(&self, m: i32) -> &[C64] {
        &self.u[(m + self.m_max as i32) as usize]
    }
}

/// Gridded tensor samples, 9 per node and azimuthal order.
#[derive(Clone, Debug)]
pub struct GridTensor {
    pub m_max: usize,
    pub t: Vec<Vec<C64>>,
}

impl GridTensor {
    pub fn block(&self, m: i32) -> &[C64] {
        &self.t[(m + self.m_max as i32) as usize]
    }
}

/// Pressure harmonics at the surface nodes, one vector per order `m`.
#[derive(Clone, Debug)]
pub struct PressureField {
    pub m_max: usize,
    pub surface: Vec<Vec<C64>>,
}

pub fn to_physical(f: &CoupledField, d: &Discretization) -> Result<GridField> {
    f.check(d)?;
    let u = f.ms().map(|m| d.block(m).eu.mul_vec(f.block(m), m < 0)).collect();
    Ok(GridField { m_max: d.m_max(), u, chi: f.chi(d), sigma: f.sigma(d) })
}

/// Gradient samples `G[3a+b]` per order.
pub fn gradient(f: &CoupledField, d: &Discretization) -> Result<GridTensor> {
    f.check(d)?;
    let t = f.ms().map(|m| d.block(m).eg.mul_vec(f.block(m), m < 0)).collect();
    Ok(GridTensor { m_max: d.m_max(), t })
}

/// Least-squares solenoidal fit of grid samples in the inner product
/// `(u, w)_Ω + χ·χ̄ + σ·σ̄`; exact inverse of [`to_physical`] on the basis span.
pub fn to_spectral(samples: &GridField, d: &Discretization) -> Result<CoupledField> {
    to_spectral_weighted(samples, d, 1.0, 1.0)
}

pub fn to_spectral_weighted(samples: &GridField, d: &Discretization, mass: f64, inertia: f64) -> Result<CoupledField> {
    if samples.m_max != d.m_max() || samples.u.len() != 2 * d.m_max() + 1 {
        return Err(Error::ShapeMismatch("azimuthal range".into()));
    }
    let mut out = CoupledField::zeros(d);
    let a = split_rigid(samples.chi);
    let b = split_rigid(samples.sigma);
    for m in out.ms() {
        let blk = d.block(m);
        let conj = m < 0;
        let y = samples.block(m);
        if y.len() != 3 * d.n_q() {
            return Err(Error::ShapeMismatch(format!("block {m} has {} samples", y.len())));
        }
        let mut rhs = blk.eu.adj_mul_vec(&d.w_vol3, y, conj);
        let mut g = if conj { blk.gram_fluid.map(|z| z.conj()) } else { blk.gram_fluid.clone() };
        if m.abs() <= 1 {
            let k = (m + 1) as usize;
            let w = Discretization::cnorm2(m);
            let (ti, ri) = (blk.trans.unwrap(), blk.rot.unwrap());
            rhs[ti] += a[k] * mass * w;
            rhs[ri] += b[k] * inertia * w;
            g[(ti, ti)] += mass * w;
            g[(ri, ri)] += inertia * w;
        }
        let x = g.cholesky().ok_or_else(|| Error::Singular("Gram matrix".into()))?.solve(&rhs);
        *out.block_mut(m) = x.iter().copied().collect();
    }
    out.real = false;
    Ok(out)
}

/// Samples of `D(u)` as 3×3 tensors in the local frame.
pub fn strain_rate(f: &CoupledField, d: &Discretization) -> Result<GridTensor> {
    let g = gradient(f, d)?;
    let t = g
        .t
        .iter()
        .map(|gm| {
            let mut out = gm.clone();
            for q in 0..gm.len() / 9 {
                for a in 0..3 {
                    for b in 0..3 {
                        out[9 * q + 3 * a + b] = (gm[9 * q + 3 * a + b] + gm[9 * q + 3 * b + a]) * 0.5;
                    }
                }
            }
            out
        })
        .collect();
    Ok(GridTensor { m_max: g.m_max, t })
}

/// Pressure of the Stokes part of `f` at `r = 1`: each poloidal harmonic
/// carries `p_lm = (r D_l f)'` with `D_l f = f'' + 2f'/r - l(l+1) f / r²`.
pub fn recover_pressure(f: &CoupledField, d: &Discretization) -> Result<PressureField> {
    f.check(d)?;
    let surface = f
        .ms()
        .map(|m| {
            let blk = d.block(m);
            if m.abs() > 2 {
                return vec![c(0.0, 0.0); d.n_theta()];
            }
            blk.sp.mul_vec(f.block(m), m < 0)
        })
        .collect();
    Ok(PressureField { m_max: d.m_max(), surface })
}

/// Force `F = ∫ T(u,p)·n` and torque `G = ∫ x × T(u,p)·n` on the sphere,
/// `T = -p 1 + 2 D(u)`, `n = -e_r`. Only orders |m| ≤ 1 contribute.
pub fn surface_traction(f: &CoupledField, p: &PressureField, d: &Discretization) -> Result<([C64; 3], [C64; 3])> {
    f.check(d)?;
    if d.cfg.n_r < 8 {
        return Err(Error::UnresolvedBoundary("n_r too small".into()));
    }
    let nth = d.n_theta();
    let mut fv = [c(0.0, 0.0); 3];
    let mut gv = [c(0.0, 0.0); 3];
    for (k, m) in [-1i32, 0, 1].into_iter().enumerate() {
        let blk = d.block(m);
        let conj = m < 0;
        let g = blk.sg.mul_vec(f.block(m), conj);
        let pm = &p.surface[(m + p.m_max as i32) as usize];
        let mut proj_f = c(0.0, 0.0);
        let mut proj_g = c(0.0, 0.0);
        for it in 0..nth {
            let (x, s) = (d.cos_t[it], d.sin_t[it]);
            // (T n)_a = p δ_ar - 2 D_ar
            let mut tn = [c(0.0, 0.0); 3];
            for a in 0..3 {
                let dar = (g[9 * it + 3 * a] + g[9 * it + a]) * 0.5;
                tn[a] = -dar * 2.0;
            }
            tn[0] += pm[it];
            let mut cv = Discretization::const_vec(m.unsigned_abs() as usize, x, s);
            let mut rv = Discretization::rot_vec(m.unsigned_abs() as usize, x, s);
            if conj {
                cv = cv.map(|z| z.conj());
                rv = rv.map(|z| z.conj());
            }
            for a in 0..3 {
                proj_f += tn[a] * cv[a].conj() * d.w_surf[it];
                proj_g += tn[a] * rv[a].conj() * d.w_surf[it];
            }
        }
        // proj = F · conj(c_m); invert the split.
        let _ = k;
        accumulate_from_projection(&mut fv, m, proj_f);
        accumulate_from_projection(&mut gv, m, proj_g);
    }
    Ok((fv, gv))
}

/// Given `P_m = V · conj(c_m)` for m = -1, 0, 1, rebuild `V` incrementally.
pub fn accumulate_from_projection(v: &mut [C64; 3], m: i32, pm: C64) {
    match m {
        0 => v[0] += pm,
        1 => {
            // P_+ = V2 - i V3
            v[1] += pm * 0.5;
            v[2] += I * pm * 0.5;
        }
        -1 => {
            // P_- = V2 + i V3
            v[1] += pm * 0.5;
            v[2] -= I * pm * 0.5;
        }
        _ => {}
    }
}

/// Cartesian velocity of a field at an arbitrary point (rigid motion inside
/// the sphere, zero outside the shell).
pub fn eval_point(f: &CoupledField, d: &Discretization, x: [f64; 3]) -> [C64; 3] {
    eval_point_ext(f, d, x, false)
}

/// As [`eval_point`], with the rigid modes replaced by the compactly
/// supported cut-off lift.
pub fn eval_point_compact(f: &CoupledField, d: &Discretization, x: [f64; 3]) -> [C64; 3] {
    eval_point_ext(f, d, x, true)
}

fn eval_point_ext(f: &CoupledField, d: &Discretization, x: [f64; 3], compact: bool) -> [C64; 3] {
    let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    if r < 1.0 {
        let chi = f.chi(d);
        let sg = f.sigma(d);
        return [
            chi[0] + sg[1] * x[2] - sg[2] * x[1],
            chi[1] + sg[2] * x[0] - sg[0] * x[2],
            chi[2] + sg[0] * x[1] - sg[1] * x[0],
        ];
    }
    if r >= d.cfg.r_out {
        return [c(0.0, 0.0); 3];
    }
    let ct = x[0] / r;
    let st = (1.0 - ct * ct).max(1e-300).sqrt();
    let phi = x[2].atan2(x[1]);
    let (p, dp) = legendre_table(d.cfg.l_max, d.cfg.m_max.max(1), ct, st);
    let mut loc = [c(0.0, 0.0); 3];
    for m in f.ms() {
        let ma = m.unsigned_abs() as usize;
        let blk = d.block(m);
        let ph = C64::from_polar(1.0, m as f64 * phi);
        for (j, mode) in blk.modes.iter().enumerate() {
            let e = d.eval_mode_ext(ma, *mode, r, ct, st, &p, &dp, compact);
            for k in 0..3 {
                let v = if m < 0 { e.u[k].conj() } else { e.u[k] };
                loc[k] += f.block(m)[j] * v * ph;
            }
        }
    }
    let (cp, sp) = (phi.cos(), phi.sin());
    let er = [ct, st * cp, st * sp];
    let et = [-st, ct * cp, ct * sp];
    let ep = [0.0, -sp, cp];
    [0, 1, 2].map(|i| loc[0] * er[i] + loc[1] * et[i] + loc[2] * ep[i])
}

/// Coefficient-space bookkeeping: flatten/unflatten a field.
pub fn flatten(f: &CoupledField) -> CVec {
    CVec::from_iterator(f.blocks.iter().map(|b| b.len()).sum(), f.blocks.iter().flatten().copied())
}

pub fn unflatten(d: &Discretization, v: &CVec) -> Result<CoupledField> {
    if v.len() != d.total_dofs() {
        return Err(Error::ShapeMismatch(format!("expected {} coefficients", d.total_dofs())));
    }
    let mut f = CoupledField::zeros(d);
    let mut k = 0;
    for m in f.ms() {
        let n = d.block_len(m);
        *f.block_mut(m) = v.rows(k, n).iter().copied().collect();
        k += n;
    }
    f.real = false;
    Ok(f)
}

/// Conjugate a block matrix for negative orders.
pub fn maybe_conj(a: &CMat, conj: bool) -> CMat {
    if conj {
        a.map(|z| z.conj())
    } else {
        a.clone()
    }
}

/// Dense real matrix helper used by tests and diagnostics.
pub fn real_part(a: &CMat) -> DMatrix<f64> {
    a.map(|z| z.re)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Discretization {
        build_discretization(&DiscretizationConfig {
            l_max: 4,
            m_max: 2,
            n_r: 12,
            r_out: 20.0,
            k_max: 2,
            backend: Backend::Spectral,
        })
        .unwrap()
    }

    #[test]
    fn sphere_area_and_shell_volume() {
        let d = small();
        let area: f64 = d.w_surf.iter().sum();
        assert!((area - 4.0 * PI).abs() < 1e-12);
        let vol: f64 = d.w_vol.iter().sum();
        let exact = 4.0 * PI / 3.0 * (20f64.powi(3) - 1.0);
        assert!((vol - exact).abs() / exact < 1e-12);
    }

    #[test]
    fn lift_traces() {
        let d = small();
        for m in 0..=1usize {
            let b = &d.blocks[m];
            for it in 0..d.n_theta() {
                let (x, s) = (d.cos_t[it], d.sin_t[it]);
                let cv = Discretization::const_vec(m, x, s);
                let rv = Discretization::rot_vec(m, x, s);
                for k in 0..3 {
                    assert!((b.su.get(3 * it + k, b.trans.unwrap(), false) - cv[k]).norm() < 1e-14);
                    assert!((b.su.get(3 * it + k, b.rot.unwrap(), false) - rv[k]).norm() < 1e-14);
                }
                for j in 2..b.len() {
                    assert_eq!(b.su.get(3 * it + 1, j, false).norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn divergence_free_basis() {
        let d = small();
        for b in &d.blocks {
            for q in 0..d.n_q() {
                for j in 0..b.len() {
                    let div = b.eg.get(9 * q, j, false) + b.eg.get(9 * q + 4, j, false) + b.eg.get(9 * q + 8, j, false);
                    let scale = (0..9).map(|k| b.eg.get(9 * q + k, j, false).norm()).fold(1.0, f64::max);
                    assert!(div.norm() < 1e-11 * scale, "m={} j={} div={}", b.m, j, div);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = small();
        let mut f = CoupledField::zeros(&d);
        for m in f.ms() {
            let n = f.block(m).len();
            let v: Vec<C64> = (0..n).map(|j| c(((j * 7 + 3) % 11) as f64 * 0.1 - 0.5, ((j * 5) % 7) as f64 * 0.05)).collect();
            *f.block_mut(m) = v;
        }
        let f = f.real_part();
        let x = [1.3, -0.7, 0.9];
        let h = 1e-5;
        // divergence by central differences of the Cartesian field
        let mut div = 0.0;
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            div += (eval_point(&f, &d, xp)[k].re - eval_point(&f, &d, xm)[k].re) / (2.0 * h);
        }
        assert!(div.abs() < 1e-7, "div {div}");
    }

    #[test]
    fn gradient_tensor_matches_finite_differences() {
        let d = small();
        let mut f = CoupledField::zeros(&d);
        for m in f.ms() {
            let n = f.block(m).len();
            let v: Vec<C64> = (0..n).map(|j| c(((j * 3 + 1) % 7) as f64 * 0.2 - 0.6, ((j * 11) % 5) as f64 * 0.1)).collect();
            *f.block_mut(m) = v;
        }
        let f = f.real_part();
        let x: [f64; 3] = [0.8, 1.1, -0.6];
        let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        let (ct, st) = (x[0] / r, (1.0 - (x[0] / r).powi(2)).sqrt());
        let phi = x[2].atan2(x[1]);
        let mut g = [c(0.0, 0.0); 9];
        for m in f.ms() {
            let ph = C64::from_polar(1.0, m as f64 * phi);
            for (j, mode) in d.block(m).modes.iter().enumerate() {
                let e = d.eval_mode(m.unsigned_abs() as usize, *mode, r, ct, st);
                for k in 0..9 {
                    let v = if m < 0 { e.g[k].conj() } else { e.g[k] };
                    g[k] += f.block(m)[j] * v * ph;
                }
            }
        }
        let (cp, sp) = (phi.cos(), phi.sin());
        let basis = [[ct, st * cp, st * sp], [-st, ct * cp, ct * sp], [0.0, -sp, cp]];
        let h = 1e-5;
        for i in 0..3 {
            for jd in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[jd] += h;
                xm[jd] -= h;
                let fd = (eval_point(&f, &d, xp)[i].re - eval_point(&f, &d, xm)[i].re) / (2.0 * h);
                let mut an = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        an += basis[a][i] * g[3 * a + b].re * basis[b][jd];
                    }
                }
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "i={i} j={jd} fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn rigid_trace_of_lifts() {
        let d = small();
        let chi = [c(1.0, 0.0), c(0.3, 0.0), c(-0.2, 0.0)];
        let sigma = [c(0.1, 0.0), c(0.0, 0.0), c(0.5, 0.0)];
        let f = CoupledField::from_rigid(&d, chi, sigma);
        assert!(f.realness_defect() < 1e-15);
        for p in [[1.0, 0.0, 0.0], [0.0, 0.6, 0.8], [0.6, 0.0, -0.8]] {
            let v = eval_point(&f, &d, [p[0] * (1.0 + 1e-12), p[1] * (1.0 + 1e-12), p[2] * (1.0 + 1e-12)]);
            let w = eval_point(&f, &d, [p[0] * 0.999999, p[1] * 0.999999, p[2] * 0.999999]);
            for k in 0..3 {
                assert!((v[k] - w[k]).norm() < 1e-5, "{:?} {:?}", v, w);
            }
        }
    }
}

#[cfg(test)]
mod mirror_tests {
    use super::*;

    #[test]
    fn mirror_parity_of_modes() {
        let d = build_discretization(&DiscretizationConfig { l_max: 3, m_max: 2, n_r: 8, r_out: 10.0, k_max: 2, backend: Backend::Spectral }).unwrap();
        for mm in 0..=2i32 {
            let blk = d.block(mm);
            let n = blk.len();
            let cm: Vec<C64> = (0..n).map(|j| c((j as f64 * 0.7).sin(), (j as f64 * 1.3).cos())).collect();
            let mut f = CoupledField::zeros(&d);
            let sm: Vec<C64> = blk.modes.iter().zip(&cm).map(|(md, z)| z * mirror_sign(*md)).collect();
            if mm == 0 {
                *f.block_mut(0) = sm.iter().zip(&cm).map(|(a, b)| (a + b) * 0.5).collect();
            } else {
                *f.block_mut(mm) = cm.clone();
                *f.block_mut(-mm) = sm;
            }
            for x in [[0.3, 1.1, 0.7], [-1.2, 0.4, 1.9], [2.0, -0.5, 0.25]] {
                let a = eval_point(&f, &d, x);
                let b = eval_point(&f, &d, [x[0], x[1], -x[2]]);
                assert!((a[0] - b[0]).norm() < 1e-12 && (a[1] - b[1]).norm() < 1e-12 && (a[2] + b[2]).norm() < 1e-12, "m={mm} {a:?} {b:?}");
            }
        }
    }
}
