//! Discrete bilinear and trilinear forms shared by all solvers.
//!
//! The transport term is always written as
//!
//! ```text
//! conv(a; u, φ) = ½ (a·∇u, φ)_Ω − ½ (a·∇φ̄, ū)_Ω + ½ ∮_{r=1} (a·n) (u·φ̄)
//! ```
//!
//! which equals `(a·∇u, φ)_Ω` for solenoidal `a` but is skew up to the
//! boundary flux *exactly* at the discrete level, whatever the quadrature.
//! All energy-type identities therefore hold to rounding.

use crate::discretization::{CoupledField, Discretization};
use crate::linalg::{c, CMat, CVec, ZMat, C64};

/// Samples of a field per azimuthal order: values (3Q), gradients (9Q),
/// and surface values (3S).
#[derive(Clone, Debug)]
pub struct FieldSamples {
    pub m_max: usize,
    pub u: Vec<Vec<C64>>,
    pub g: Vec<Vec<C64>>,
    pub us: Vec<Vec<C64>>,
}

impl FieldSamples {
    fn idx(&self, m: i32) -> usize {
        (m + self.m_max as i32) as usize
    }

    pub fn u(&self, m: i32) -> &[C64] {
        &self.u[self.idx(m)]
    }

    pub fn g(&self, m: i32) -> &[C64] {
        &self.g[self.idx(m)]
    }

    pub fn us(&self, m: i32) -> &[C64] {
        &self.us[self.idx(m)]
    }

    pub fn of(f: &CoupledField, d: &Discretization) -> Self {
        let mut u = Vec::new();
        let mut g = Vec::new();
        let mut us = Vec::new();
        for m in f.ms() {
            let b = d.block(m);
            let conj = m < 0;
            u.push(b.eu.mul_vec(f.block(m), conj));
            g.push(b.eg.mul_vec(f.block(m), conj));
            us.push(b.su.mul_vec(f.block(m), conj));
        }
        FieldSamples { m_max: f.m_max, u, g, us }
    }

    /// The constant field `χ_f` (rigid translation of `f`) everywhere.
    pub fn translation_of(f: &CoupledField, d: &Discretization) -> Self {
        let nq = d.n_q();
        let ns = d.n_theta();
        let mut out = FieldSamples::zero(d);
        let a = f.rigid_coeffs(d, true);
        for (k, m) in [-1i32, 0, 1].into_iter().enumerate() {
            let b = d.block(m);
            let cv = b.cvec.as_ref().unwrap();
            let cs = b.cvec_surf.as_ref().unwrap();
            let i = out.idx(m);
            let cj = |z: C64| if m < 0 { z.conj() } else { z };
            out.u[i] = (0..3 * nq).map(|q| a[k] * cj(cv[q])).collect();
            out.us[i] = (0..3 * ns).map(|q| a[k] * cj(cs[q])).collect();
        }
        out
    }

    pub fn zero(d: &Discretization) -> Self {
        let n = 2 * d.m_max() + 1;
        FieldSamples {
            m_max: d.m_max(),
            u: vec![vec![c(0.0, 0.0); 3 * d.n_q()]; n],
            g: vec![vec![c(0.0, 0.0); 9 * d.n_q()]; n],
            us: vec![vec![c(0.0, 0.0); 3 * d.n_theta()]; n],
        }
    }

    pub fn lin(&self, a: C64, o: &FieldSamples, b: C64) -> Self {
        let f = |x: &Vec<Vec<C64>>, y: &Vec<Vec<C64>>| -> Vec<Vec<C64>> {
            x.iter().zip(y).map(|(p, q)| p.iter().zip(q).map(|(s, t)| a * s + b * t).collect()).collect()
        };
        FieldSamples { m_max: self.m_max, u: f(&self.u, &o.u), g: f(&self.g, &o.g), us: f(&self.us, &o.us) }
    }
}

/// `conv(a; u, φ_i)` for every basis function `φ_i` of every order; orders
/// of the product outside `|m| ≤ m_max` are truncated.
pub fn conv_vec(d: &Discretization, a: &FieldSamples, u: &FieldSamples) -> Vec<CVec> {
    conv_sum(d, &[(a, u, c(1.0, 0.0))])
}

/// `Σ_k s_k conv(a_k; u_k, φ_i)`, projected once.
pub fn conv_sum(d: &Discretization, terms: &[(&FieldSamples, &FieldSamples, C64)]) -> Vec<CVec> {
    let mm = d.m_max() as i32;
    let nq = d.n_q();
    let ns = d.n_theta();
    let mut out = Vec::new();
    for m3 in -mm..=mm {
        let mut t1 = vec![c(0.0, 0.0); 3 * nq];
        let mut t2 = vec![c(0.0, 0.0); 9 * nq];
        let mut ts = vec![c(0.0, 0.0); 3 * ns];
        let mut any = false;
        for &(a, u, sc) in terms {
            for m1 in -mm..=mm {
                let m2 = m3 - m1;
                if m2.abs() > mm {
                    continue;
                }
                let (au, ug, uu) = (a.u(m1), u.g(m2), u.u(m2));
                if au.iter().all(|z| *z == c(0.0, 0.0)) {
                    continue;
                }
                any = true;
                for q in 0..nq {
                    for al in 0..3 {
                        let mut s = c(0.0, 0.0);
                        let ua = uu[3 * q + al] * sc;
                        for b in 0..3 {
                            let ab = au[3 * q + b];
                            s += ug[9 * q + 3 * al + b] * ab;
                            t2[9 * q + 3 * al + b] += ua * ab;
                        }
                        t1[3 * q + al] += s * sc;
                    }
                }
                let (asf, usf) = (a.us(m1), u.us(m2));
                for s in 0..ns {
                    let an = -asf[3 * s] * sc;
                    for al in 0..3 {
                        ts[3 * s + al] += an * usf[3 * s + al];
                    }
                }
            }
        }
        let blk = d.block(m3);
        let conj = m3 < 0;
        if !any {
            out.push(CVec::zeros(blk.len()));
            continue;
        }
        let r1 = blk.eu.adj_mul_vec(&d.w_vol3, &t1, conj);
        let r2 = blk.eg.adj_mul_vec(&d.w_vol9, &t2, conj);
        let rs = blk.su.adj_mul_vec(&d.w_surf3, &ts, conj);
        out.push((r1 - r2 + rs) * c(0.5, 0.0));
    }
    out
}

fn conj_if(z: C64, conj: bool) -> C64 {
    if conj {
        z.conj()
    } else {
        z
    }
}

/// Matrix of `u ↦ conv(a; u, φ_i)` on block `m` for an axisymmetric `a`
/// (only `a`'s order-0 samples are used).
pub fn conv_matrix_u(d: &Discretization, m: i32, a: &FieldSamples) -> CMat {
    let blk = d.block(m);
    let conj = m < 0;
    let (nq, ns, n) = (d.n_q(), d.n_theta(), blk.len());
    let a0 = a.u(0);
    let as0 = a.us(0);
    let mut t1 = ZMat::zeros(3 * nq, n);
    let mut t2 = ZMat::zeros(9 * nq, n);
    let mut tsm = ZMat::zeros(3 * ns, n);
    for j in 0..n {
        for q in 0..nq {
            for al in 0..3 {
                let mut s = c(0.0, 0.0);
                let uj = conj_if(blk.eu.get(3 * q + al, j, false), conj);
                for b in 0..3 {
                    let ab = a0[3 * q + b];
                    s += conj_if(blk.eg.get(9 * q + 3 * al + b, j, false), conj) * ab;
                    t2.set(9 * q + 3 * al + b, j, uj * ab);
                }
                t1.set(3 * q + al, j, s);
            }
        }
        for s in 0..ns {
            let an = -as0[3 * s];
            for al in 0..3 {
                tsm.set(3 * s + al, j, an * conj_if(blk.su.get(3 * s + al, j, false), conj));
            }
        }
    }
    let r1 = blk.eu.adj_mul(&d.w_vol3, &t1, conj);
    let r2 = blk.eg.adj_mul(&d.w_vol9, &t2, conj);
    let rs = blk.su.adj_mul(&d.w_surf3, &tsm, conj);
    (r1 - r2 + rs) * c(0.5, 0.0)
}

/// Matrix of `u ↦ conv(χ_u − u; b, φ_i)` on block `m` for an axisymmetric
/// field `b` (only order-0 samples used).
pub fn conv_matrix_a(d: &Discretization, m: i32, bsm: &FieldSamples) -> CMat {
    let blk = d.block(m);
    let conj = m < 0;
    let (nq, ns, n) = (d.n_q(), d.n_theta(), blk.len());
    let (bu, bg, bs) = (bsm.u(0), bsm.g(0), bsm.us(0));
    let mut t1 = ZMat::zeros(3 * nq, n);
    let mut t2 = ZMat::zeros(9 * nq, n);
    let mut tsm = ZMat::zeros(3 * ns, n);
    let cv = blk.cvec.as_ref();
    let cs = blk.cvec_surf.as_ref();
    for j in 0..n {
        let is_t = Some(j) == blk.trans;
        for q in 0..nq {
            let mut aj = [c(0.0, 0.0); 3];
            for b in 0..3 {
                let mut v = -conj_if(blk.eu.get(3 * q + b, j, false), conj);
                if is_t {
                    v += conj_if(cv.unwrap()[3 * q + b], conj);
                }
                aj[b] = v;
            }
            for al in 0..3 {
                let mut s = c(0.0, 0.0);
                for b in 0..3 {
                    s += bg[9 * q + 3 * al + b] * aj[b];
                    t2.set(9 * q + 3 * al + b, j, bu[3 * q + al] * aj[b]);
                }
                t1.set(3 * q + al, j, s);
            }
        }
        for s in 0..ns {
            let mut ar = -conj_if(blk.su.get(3 * s, j, false), conj);
            if is_t {
                ar += conj_if(cs.unwrap()[3 * s], conj);
            }
            for al in 0..3 {
                tsm.set(3 * s + al, j, -ar * bs[3 * s + al]);
            }
        }
    }
    let r1 = blk.eu.adj_mul(&d.w_vol3, &t1, conj);
    let r2 = blk.eg.adj_mul(&d.w_vol9, &t2, conj);
    let rs = blk.su.adj_mul(&d.w_surf3, &tsm, conj);
    (r1 - r2 + rs) * c(0.5, 0.0)
}

/// `Σ_m c_w(m)^H r(m)`: pair a per-order residual with a field.
pub fn pair(r: &[CVec], w: &CoupledField) -> C64 {
    let mut s = c(0.0, 0.0);
    for (k, m) in w.ms().enumerate() {
        s += CVec::from_column_slice(w.block(m)).dotc(&r[k]);
    }
    s
}

/// Coefficients of the constant vector `e1` test functional on every block:
/// `φ ↦ e1 · conj(χ_φ)`, nonzero only on the order-0 translation lift.
pub fn gravity_functional(d: &Discretization) -> Vec<CVec> {
    let mm = d.m_max() as i32;
    (-mm..=mm)
        .map(|m| {
            let mut v = CVec::zeros(d.block_len(m));
            if m == 0 {
                v[d.block(0).trans.unwrap()] = c(1.0, 0.0);
            }
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::{build_discretization, Backend, DiscretizationConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn disc() -> Discretization {
        build_discretization(&DiscretizationConfig { l_max: 3, m_max: 2, n_r: 10, r_out: 15.0, k_max: 2, backend: Backend::Spectral }).unwrap()
    }

    fn rand_field(d: &Discretization, seed: u64, real: bool) -> CoupledField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = CoupledField::zeros(d);
        for m in f.ms() {
            let n = f.block(m).len();
            *f.block_mut(m) = (0..n).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        }
        f.real = false;
        if real {
            f.real_part()
        } else {
            f
        }
    }

    #[test]
    fn transport_skew_with_boundary_flux() {
        let d = disc();
        let u = rand_field(&d, 1, true);
        let a = rand_field(&d, 2, true);
        let (us, as_) = (FieldSamples::of(&u, &d), FieldSamples::of(&a, &d));
        let val = pair(&conv_vec(&d, &as_, &us), &u);
        // ½∮ (a·n)|u|²
        let mut flux = 0.0;
        let ns = d.n_theta();
        for m1 in a.ms() {
            for m2 in u.ms() {
                let m3 = m1 + m2;
                if m3.abs() > 2 {
                    continue;
                }
                for s in 0..ns {
                    let ar = -as_.us(m1)[3 * s];
                    for al in 0..3 {
                        flux += 0.5 * (ar * us.us(m2)[3 * s + al] * us.us(m3)[3 * s + al].conj()).re * d.w_surf[s];
                    }
                }
            }
        }
        assert!((val.re - flux).abs() < 1e-10 * (1.0 + val.norm()), "{val} vs {flux}");
    }

    #[test]
    fn matrices_match_vector_form() {
        let d = disc();
        let base = rand_field(&d, 4, true);
        let mut ax = CoupledField::zeros(&d);
        *ax.block_mut(0) = base.block(0).to_vec();
        let bs = FieldSamples::of(&ax, &d);
        for m in [-2, -1, 0, 1, 2] {
            let mut w = CoupledField::zeros(&d);
            let v = rand_field(&d, (9 + m) as u64, false);
            *w.block_mut(m) = v.block(m).to_vec();
            let ws = FieldSamples::of(&w, &d);
            let cw = CVec::from_column_slice(w.block(m));
            let k = (m + 2) as usize;
            let lhs = conv_matrix_u(&d, m, &bs) * &cw;
            let rhs = &conv_vec(&d, &bs, &ws)[k];
            assert!((lhs - rhs).norm() < 1e-10 * rhs.norm().max(1.0));
            let a = FieldSamples::translation_of(&w, &d).lin(c(1.0, 0.0), &ws, c(-1.0, 0.0));
            let lhs2 = conv_matrix_a(&d, m, &bs) * &cw;
            let rhs2 = &conv_vec(&d, &a, &bs)[k];
            assert!((lhs2 - rhs2).norm() < 1e-10 * rhs2.norm().max(1.0));
        }
    }

    #[test]
    fn whole_space_pairing_with_constant_transport_vanishes() {
        // With unit density in the body, ⟨e·∇u, u⟩ over R³ vanishes: the
        // fluid form's flux is balanced by (4π/3) (σ×e)·χ̄ from the body.
        let d = disc();
        let u = rand_field(&d, 21, true);
        let e = CoupledField::from_rigid(&d, [c(0.3, 0.0), c(-0.4, 0.0), c(0.5, 0.0)], [c(0.0, 0.0); 3]);
        let es = FieldSamples::translation_of(&e, &d);
        let us = FieldSamples::of(&u, &d);
        let fluid = pair(&conv_vec(&d, &es, &us), &u);
        let (chi, sg) = (u.chi(&d), u.sigma(&d));
        let ev = e.chi(&d);
        let sxe = [sg[1] * ev[2] - sg[2] * ev[1], sg[2] * ev[0] - sg[0] * ev[2], sg[0] * ev[1] - sg[1] * ev[0]];
        let body: C64 = (0..3).map(|k| sxe[k] * chi[k].conj()).sum::<C64>() * (4.0 * PI / 3.0);
        assert!((fluid.re + body.re).abs() < 1e-10 * (1.0 + fluid.norm()), "{fluid} {body}");
    }
}
