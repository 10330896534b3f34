//! Function-space layer: mass-weighted inner product, dissipation inner
//! product, projection onto solenoidal coupled fields, and rigid lifts.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::discretization::{maybe_conj, to_spectral_weighted, CoupledField, Discretization, GridField};
use crate::error::{Error, Result};
use crate::linalg::{c, CMat, CVec, C64};

/// Physical parameters; `mass` and `inertia` are derived from the density ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub lambda: f64,
    pub density_ratio: f64,
    pub mass: f64,
    pub inertia: f64,
    pub e1: [f64; 3],
}

impl PhysicalParams {
    pub fn new(lambda: f64, density_ratio: f64) -> Result<Self> {
        if !(density_ratio > 0.0) || !(lambda >= 0.0) {
            return Err(Error::InvalidInput("density_ratio must be positive and lambda non-negative".into()));
        }
        Ok(PhysicalParams {
            lambda,
            density_ratio,
            mass: 4.0 * PI * density_ratio / 3.0,
            inertia: 8.0 * PI * density_ratio / 15.0,
            e1: [1.0, 0.0, 0.0],
        })
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        PhysicalParams { lambda, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LiftKind {
    Translation,
    Rotation,
}

/// Divergence-free extension of a rigid trace, supported in `r ≤ 2 r_cut`.
///
/// `field` carries the rigid coefficients; evaluation goes through the
/// cut-off profile rather than the (globally supported) basis lift.
#[derive(Clone, Debug)]
pub struct LiftField {
    pub kind: LiftKind,
    pub axis: usize,
    pub field: CoupledField,
    pub support: f64,
}

impl LiftField {
    pub fn eval(&self, d: &Discretization, x: [f64; 3]) -> [C64; 3] {
        crate::discretization::eval_point_compact(&self.field, d, x)
    }
}

/// Gram matrix of block `m` in the mass-weighted inner product; entry
/// `(i, j)` is `⟨φ_j, φ_i⟩`.
pub fn gram(d: &Discretization, p: &PhysicalParams, m: i32) -> CMat {
    let blk = d.block(m);
    let mut g = maybe_conj(&blk.gram_fluid, m < 0);
    if m.abs() <= 1 {
        let w = Discretization::cnorm2(m);
        g[(blk.trans.unwrap(), blk.trans.unwrap())] += c(p.mass * w, 0.0);
        g[(blk.rot.unwrap(), blk.rot.unwrap())] += c(p.inertia * w, 0.0);
    }
    g
}

pub fn dissipation(d: &Discretization, m: i32) -> CMat {
    maybe_conj(&d.block(m).dissip, m < 0)
}

fn check_pair(u: &CoupledField, w: &CoupledField, d: &Discretization) -> Result<()> {
    u.check(d).and_then(|_| w.check(d)).map_err(|e| Error::DiscretizationMismatch(e.to_string()))
}

/// `M χ_u·χ̄_w + I σ_u·σ̄_w + (u, w)_Ω`.
pub fn inner_rigid(u: &CoupledField, w: &CoupledField, p: &PhysicalParams, d: &Discretization) -> Result<C64> {
    check_pair(u, w, d)?;
    let mut s = c(0.0, 0.0);
    for m in u.ms() {
        let g = gram(d, p, m);
        let cu = CVec::from_column_slice(u.block(m));
        let cw = CVec::from_column_slice(w.block(m));
        s += cw.dotc(&(g * cu));
    }
    Ok(s)
}

/// `∫_Ω D(u) : conj(D(w))`.
pub fn inner_dissipation(u: &CoupledField, w: &CoupledField, d: &Discretization) -> Result<C64> {
    check_pair(u, w, d)?;
    let mut s = c(0.0, 0.0);
    for m in u.ms() {
        let g = dissipation(d, m);
        let cu = CVec::from_column_slice(u.block(m));
        let cw = CVec::from_column_slice(w.block(m));
        s += cw.dotc(&(g * cu));
    }
    Ok(s)
}

pub fn norm_rigid(u: &CoupledField, p: &PhysicalParams, d: &Discretization) -> f64 {
    inner_rigid(u, u, p, d).map(|z| z.re.max(0.0).sqrt()).unwrap_or(f64::NAN)
}

/// Orthogonal projection (in the mass-weighted inner product) of raw samples
/// onto the discrete space of solenoidal fields with coupled rigid part.
pub fn project_h(h: &GridField, p: &PhysicalParams, d: &Discretization) -> Result<CoupledField> {
    to_spectral_weighted(h, d, p.mass, p.inertia)
}

/// Same projection applied to an element given in coefficients plus an
/// additional raw field.
pub fn project_coupled(u: &CoupledField, p: &PhysicalParams, d: &Discretization) -> Result<CoupledField> {
    let g = crate::discretization::to_physical(u, d)?;
    project_h(&g, p, d)
}

pub fn rigid_lift(kind: LiftKind, axis: usize, d: &Discretization) -> Result<LiftField> {
    if axis > 2 {
        return Err(Error::InvalidInput("axis must be 0, 1 or 2".into()));
    }
    if d.cfg.r_out <= 2.0 * d.r_cut {
        return Err(Error::InvalidConfig("lift cutoff does not fit inside the shell".into()));
    }
    let mut e = [c(0.0, 0.0); 3];
    e[axis] = c(1.0, 0.0);
    let z = [c(0.0, 0.0); 3];
    let field = match kind {
        LiftKind::Translation => CoupledField::from_rigid(d, e, z),
        LiftKind::Rotation => CoupledField::from_rigid(d, z, e),
    };
    Ok(LiftField { kind, axis, field, support: 2.0 * d.r_cut })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::{build_discretization, to_physical, Backend, DiscretizationConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disc() -> Discretization {
        build_discretization(&DiscretizationConfig {
            l_max: 3,
            m_max: 2,
            n_r: 10,
            r_out: 15.0,
            k_max: 2,
            backend: Backend::Spectral,
        })
        .unwrap()
    }

    fn random_field(d: &Discretization, rng: &mut ChaCha8Rng) -> CoupledField {
        let mut f = CoupledField::zeros(d);
        for m in f.ms() {
            let n = f.block(m).len();
            *f.block_mut(m) = (0..n).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        }
        f.real = false;
        f
    }

    fn random_grid(d: &Discretization, rng: &mut ChaCha8Rng) -> GridField {
        let u = (0..2 * d.m_max() + 1).map(|_| (0..3 * d.n_q()).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()).collect();
        let r3 = |rng: &mut ChaCha8Rng| [0; 3].map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        GridField { m_max: d.m_max(), u, chi: r3(rng), sigma: r3(rng) }
    }

    #[test]
    fn rigid_inner_product_examples() {
        let d = disc();
        let p = PhysicalParams::new(0.0, 2.0).unwrap();
        let one = [c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)];
        let z = [c(0.0, 0.0); 3];
        // Pure rigid translation, zero fluid part, as raw samples.
        let g = GridField { m_max: d.m_max(), u: vec![vec![c(0.0, 0.0); 3 * d.n_q()]; 2 * d.m_max() + 1], chi: one, sigma: z };
        let mut e3 = z;
        e3[2] = c(1.0, 0.0);
        let g2 = GridField { chi: z, sigma: e3, ..g.clone() };
        let raw = |a: &GridField, b: &GridField| -> C64 {
            let mut s = c(0.0, 0.0);
            for k in 0..3 {
                s += a.chi[k] * b.chi[k].conj() * p.mass + a.sigma[k] * b.sigma[k].conj() * p.inertia;
            }
            s
        };
        assert!((raw(&g, &g).re - p.mass).abs() < 1e-15);
        assert_eq!(raw(&g, &g2), c(0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_field(&d, &mut rng);
        let w = random_field(&d, &mut rng);
        let a = inner_rigid(&u, &w, &p, &d).unwrap();
        let b = inner_rigid(&w, &u, &p, &d).unwrap();
        assert!((a - b.conj()).norm() < 1e-12 * a.norm().max(1.0));
        // The coefficient Gram form agrees with quadrature of the samples.
        let (gu, gw) = (to_physical(&u, &d).unwrap(), to_physical(&w, &d).unwrap());
        let mut q = raw(&gu, &gw);
        for m in u.ms() {
            let (x, y) = (gu.block(m), gw.block(m));
            for (k, wt) in d.w_vol3.iter().enumerate() {
                q += x[k] * y[k].conj() * *wt;
            }
        }
        assert!((q - a).norm() < 1e-10 * a.norm());
    }

    #[test]
    fn dissipation_positive_definite() {
        let d = disc();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_field(&d, &mut rng);
        let pos = inner_dissipation(&w, &w, &d).unwrap();
        assert!(pos.re > 0.0 && pos.im.abs() < 1e-10 * pos.re);
        let z = CoupledField::zeros(&d);
        assert_eq!(inner_dissipation(&z, &w, &d).unwrap(), c(0.0, 0.0));
    }

    #[test]
    fn projection_idempotent_self_adjoint_pythagoras() {
        let d = disc();
        let p = PhysicalParams::new(0.0, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_grid(&d, &mut rng);
        let g = random_grid(&d, &mut rng);
        let ph = project_h(&h, &p, &d).unwrap();
        let pg = project_h(&g, &p, &d).unwrap();
        let pph = project_coupled(&ph, &p, &d).unwrap();
        assert!(pph.sub(&ph).coeff_norm() < 1e-10 * ph.coeff_norm());
        // <Ph, g> = <h, Pg> with sample-level pairing of the raw fields
        let raw = |a: &GridField, b: &GridField| -> C64 {
            let mut s = c(0.0, 0.0);
            for k in 0..3 {
                s += a.chi[k] * b.chi[k].conj() * p.mass + a.sigma[k] * b.sigma[k].conj() * p.inertia;
            }
            for mi in 0..a.u.len() {
                for (k, wt) in d.w_vol3.iter().enumerate() {
                    s += a.u[mi][k] * b.u[mi][k].conj() * *wt;
                }
            }
            s
        };
        let phg = raw(&to_physical(&ph, &d).unwrap(), &g);
        let hpg = raw(&h, &to_physical(&pg, &d).unwrap());
        assert!((phg - hpg).norm() < 1e-10 * phg.norm().max(1.0));
        let n_h = raw(&h, &h).re;
        let n_ph = inner_rigid(&ph, &ph, &p, &d).unwrap().re;
        let phys = to_physical(&ph, &d).unwrap();
        let mut diff = h.clone();
        for mi in 0..diff.u.len() {
            for k in 0..diff.u[mi].len() {
                diff.u[mi][k] -= phys.u[mi][k];
            }
        }
        for k in 0..3 {
            diff.chi[k] -= phys.chi[k];
            diff.sigma[k] -= phys.sigma[k];
        }
        let n_rest = raw(&diff, &diff).re;
        assert!((n_h - n_ph - n_rest).abs() < 1e-10 * n_h);
    }

    #[test]
    fn lifts_have_rigid_trace_and_compact_support() {
        let d = disc();
        for kind in [LiftKind::Translation, LiftKind::Rotation] {
            for axis in 0..3 {
                let l = rigid_lift(kind, axis, &d).unwrap();
                let far = l.eval(&d, [0.0, l.support * 1.01, 0.3]);
                assert!(far.iter().all(|z| z.norm() < 1e-14));
                let x = [0.48, 0.6, 0.64].map(|v: f64| v * (1.0 + 1e-13));
                let v = l.eval(&d, x);
                let mut want = [0.0; 3];
                match kind {
                    LiftKind::Translation => want[axis] = 1.0,
                    LiftKind::Rotation => {
                        let mut e = [0.0; 3];
                        e[axis] = 1.0;
                        want = [e[1] * x[2] - e[2] * x[1], e[2] * x[0] - e[0] * x[2], e[0] * x[1] - e[1] * x[0]];
                    }
                }
                for k in 0..3 {
                    assert!((v[k].re - want[k]).abs() < 1e-12 && v[k].im.abs() < 1e-12, "{kind:?} {axis} {v:?}");
                }
            }
        }
    }
}
