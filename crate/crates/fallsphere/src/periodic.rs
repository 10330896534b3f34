//! Time-periodic linear problems about the rest state of the fluid seen
//! from the falling body: auxiliary oscillatory solves, grand resistance
//! matrices, the mode-by-mode solution of the periodic Oseen/body system,
//! and the operators `Q0 = ζ0∂s + L0`, `Q = ζ0∂s + L2`.
//!
//! Every frequency problem here has the shape
//!
//! ```text
//! iω h − t ∂1 h = Δh − ∇p,  div h = 0,  h = prescribed trace on the sphere,
//! ```
//!
//! discretized weakly: `(iω G_Ω + 2D − t C1) c` tested against every basis
//! function. Tractions are *weak*: the residual of the fluid rows tested
//! with the rigid lifts equals `∮ (T·n)·ψ̄`, so energy identities between
//! volume and surface terms hold to rounding.

use nalgebra::linalg::LU;
use nalgebra::Dyn;
use serde::{Deserialize, Serialize};

use crate::discretization::{join_rigid, maybe_conj, split_rigid, CoupledField, Discretization, GridField};
use crate::error::{Error, Result};
use crate::forms::{conv_matrix_u, FieldSamples};
use crate::linalg::{c, min_singular_value, CMat, CVec, C64, I};
use crate::linop::BlockOperator;
use crate::spaces::{dissipation, gram, PhysicalParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuxKind {
    /// Trace `e_i`.
    Translation,
    /// Trace `e_i × x`.
    Rotation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuxiliarySolution {
    pub omega: f64,
    pub transport: f64,
    pub kind: AuxKind,
    pub axis: usize,
    /// Coefficients; the rigid-mode coefficients encode the boundary trace.
    pub field: CoupledField,
    /// `∫ T(h,p)·n` and `∫ x × T(h,p)·n`.
    pub force: [C64; 3],
    pub torque: [C64; 3],
    /// Relative residual of the interior equations.
    pub residual: f64,
}

/// Norms entering the a-priori estimates of the auxiliary fields.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AuxNorms {
    pub l2: f64,
    pub grad: f64,
    /// `‖Δh‖`, the computable stand-in for `‖D²h‖`.
    pub second: f64,
}

struct BlockSystem {
    weak: CMat,
    interior: Vec<usize>,
    lu: LU<C64, Dyn, Dyn>,
}

/// Factorized frequency problem `iω h − t∂1 h = Δh − ∇p` on every order.
pub struct FrequencySolver<'a> {
    pub d: &'a Discretization,
    pub omega: f64,
    pub transport: f64,
    blocks: Vec<BlockSystem>,
}

/// `(∂1 u, φ_i)` on block `m`.
pub fn transport_matrix(d: &Discretization, m: i32) -> CMat {
    let e1 = CoupledField::from_rigid(d, [c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0); 3]);
    conv_matrix_u(d, m, &FieldSamples::translation_of(&e1, d))
}

/// Weak matrix of `iω − t∂1 − Δ + ∇p` on the fluid only.
pub fn fluid_weak_block(d: &Discretization, m: i32, omega: f64, transport: f64) -> CMat {
    let gf = maybe_conj(&d.block(m).gram_fluid, m < 0);
    let mut w = gf * (I * omega) + dissipation(d, m) * c(2.0, 0.0);
    if transport != 0.0 {
        w -= transport_matrix(d, m) * c(transport, 0.0);
    }
    w
}

/// Cartesian vector from weak rigid test rows `[r_{-1}, r_0, r_1]`.
fn rows_to_cartesian(rows: [C64; 3]) -> [C64; 3] {
    join_rigid([rows[0] * 0.5, rows[1], rows[2] * 0.5])
}

/// Weak rigid test rows of the functional `F·χ̄_φ`.
fn cartesian_to_rows(f: [C64; 3]) -> [C64; 3] {
    let s = split_rigid(f);
    [s[0] * 2.0, s[1], s[2] * 2.0]
}

fn unit(axis: usize) -> [C64; 3] {
    let mut e = [c(0.0, 0.0); 3];
    e[axis] = c(1.0, 0.0);
    e
}

impl<'a> FrequencySolver<'a> {
    pub fn new(d: &'a Discretization, omega: f64, transport: f64) -> Result<Self> {
        let mut blocks = Vec::new();
        let mm = d.m_max() as i32;
        for m in -mm..=mm {
            let blk = d.block(m);
            let weak = fluid_weak_block(d, m, omega, transport);
            let interior: Vec<usize> = (0..blk.len()).filter(|&j| Some(j) != blk.trans && Some(j) != blk.rot).collect();
            let wii = CMat::from_fn(interior.len(), interior.len(), |i, j| weak[(interior[i], interior[j])]);
            blocks.push(BlockSystem { weak, interior, lu: wii.lu() });
        }
        Ok(FrequencySolver { d, omega, transport, blocks })
    }

    fn sys(&self, m: i32) -> &BlockSystem {
        &self.blocks[(m + self.d.m_max() as i32) as usize]
    }

    /// Solve the interior rows with the rigid coefficients of `c` fixed and
    /// the interior load `load` (zero if `None`).
    fn solve_interior(&self, m: i32, c0: &mut CVec, load: Option<&CVec>) -> Result<()> {
        let s = self.sys(m);
        if s.interior.is_empty() {
            return Ok(());
        }
        // the second pass is one step of iterative refinement
        for _ in 0..2 {
            let full = &s.weak * &*c0;
            let rhs = CVec::from_fn(s.interior.len(), |i, _| load.map(|l| l[s.interior[i]]).unwrap_or(c(0.0, 0.0)) - full[s.interior[i]]);
            let x = s.lu.solve(&rhs).ok_or_else(|| Error::Singular(format!("frequency problem, order {m}")))?;
            for (k, &j) in s.interior.iter().enumerate() {
                c0[j] += x[k];
            }
        }
        Ok(())
    }

    /// Weak residual `W c − load` per order.
    pub fn residual(&self, u: &CoupledField, load: Option<&[CVec]>) -> Vec<CVec> {
        u.ms()
            .enumerate()
            .map(|(k, m)| {
                let r = &self.sys(m).weak * CVec::from_column_slice(u.block(m));
                match load {
                    Some(l) => r - &l[k],
                    None => r,
                }
            })
            .collect()
    }

    /// Force and torque exerted through the sphere on a field `u` that
    /// satisfies the fluid equations with load `load` in the interior.
    pub fn traction(&self, u: &CoupledField, load: Option<&[CVec]>) -> ([C64; 3], [C64; 3]) {
        let r = self.residual(u, load);
        let mm = self.d.m_max() as i32;
        let mut ft = [c(0.0, 0.0); 3];
        let mut gt = [c(0.0, 0.0); 3];
        for (k, m) in [-1i32, 0, 1].into_iter().enumerate() {
            let blk = self.d.block(m);
            let rm = &r[(m + mm) as usize];
            ft[k] = rm[blk.trans.unwrap()];
            gt[k] = rm[blk.rot.unwrap()];
        }
        (rows_to_cartesian(ft), rows_to_cartesian(gt))
    }

    /// Componentwise backward error of the interior rows,
    /// `max_j |r_j| / (|W| |c| + |load|)_j`: the far-field rows of a large
    /// shell cancel strongly, so `‖r‖/‖Wc‖` is floored by rounding.
    fn interior_residual(&self, u: &CoupledField, load: Option<&[CVec]>) -> f64 {
        let r = self.residual(u, load);
        let mut worst: f64 = 0.0;
        for (k, m) in u.ms().enumerate() {
            let s = self.sys(m);
            let cm = u.block(m);
            for &j in &s.interior {
                let mut den: f64 = (0..cm.len()).map(|i| s.weak[(j, i)].norm() * cm[i].norm()).sum();
                if let Some(l) = load {
                    den += l[k][j].norm();
                }
                if den > 0.0 {
                    worst = worst.max(r[k][j].norm() / den);
                } else if r[k][j].norm() > 0.0 {
                    worst = f64::INFINITY;
                }
            }
        }
        worst
    }

    /// Field with trace `χ + σ × x` solving the homogeneous fluid problem.
    pub fn rigid_response(&self, chi: [C64; 3], sigma: [C64; 3]) -> Result<CoupledField> {
        let mut u = CoupledField::from_rigid(self.d, chi, sigma);
        u.real = false;
        for m in -1..=1 {
            let mut cm = CVec::from_column_slice(u.block(m));
            self.solve_interior(m, &mut cm, None)?;
            *u.block_mut(m) = cm.iter().copied().collect();
        }
        Ok(u)
    }

    pub fn auxiliary(&self, kind: AuxKind, axis: usize) -> Result<AuxiliarySolution> {
        if axis > 2 {
            return Err(Error::InvalidInput(format!("axis {axis} out of range")));
        }
        let (chi, sigma) = match kind {
            AuxKind::Translation => (unit(axis), [c(0.0, 0.0); 3]),
            AuxKind::Rotation => ([c(0.0, 0.0); 3], unit(axis)),
        };
        let field = self.rigid_response(chi, sigma)?;
        let (force, torque) = self.traction(&field, None);
        let residual = self.interior_residual(&field, None);
        if !(residual < 1e-10) {
            return Err(Error::NoConvergence(format!("auxiliary residual {residual:.2e}")));
        }
        Ok(AuxiliarySolution { omega: self.omega, transport: self.transport, kind, axis, field, force, torque, residual })
    }

    /// Solution with zero trace of the fluid problem with load `load`.
    pub fn zero_trace_solve(&self, load: &[CVec]) -> Result<CoupledField> {
        let mut z = CoupledField::zeros(self.d);
        z.real = false;
        for (k, m) in z.ms().enumerate() {
            let mut cm = CVec::zeros(self.d.block_len(m));
            self.solve_interior(m, &mut cm, Some(&load[k]))?;
            *z.block_mut(m) = cm.iter().copied().collect();
        }
        Ok(z)
    }

    pub fn resistance(&self, p: &PhysicalParams) -> Result<ResistanceMatrices> {
        let mut aux = Vec::new();
        for kind in [AuxKind::Translation, AuxKind::Rotation] {
            for axis in 0..3 {
                aux.push(self.auxiliary(kind, axis)?);
            }
        }
        let mut k = [[c(0.0, 0.0); 3]; 3];
        let mut a = k;
        let mut pm = k;
        let mut s = k;
        for i in 0..3 {
            for j in 0..3 {
                k[j][i] = aux[i].force[j];
                pm[j][i] = aux[i].torque[j];
                s[j][i] = aux[3 + i].force[j];
                a[j][i] = aux[3 + i].torque[j];
            }
        }
        Ok(ResistanceMatrices {
            omega: self.omega,
            transport: self.transport,
            mass: p.mass,
            inertia: p.inertia,
            k,
            a,
            p: pm,
            s,
            aux,
        })
    }
}

/// Grand resistance matrices at one frequency:
/// `K_ji = ∫(T(h⁽ⁱ⁾)·n)_j`, `P_ji = ∫(x×T(h⁽ⁱ⁾)·n)_j`,
/// `S_ji = ∫(T(H⁽ⁱ⁾)·n)_j`, `A_ji = ∫(x×T(H⁽ⁱ⁾)·n)_j`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResistanceMatrices {
    pub omega: f64,
    pub transport: f64,
    pub mass: f64,
    pub inertia: f64,
    #[serde(rename = "K")]
    pub k: [[C64; 3]; 3],
    #[serde(rename = "A")]
    pub a: [[C64; 3]; 3],
    #[serde(rename = "P")]
    pub p: [[C64; 3]; 3],
    #[serde(rename = "S")]
    pub s: [[C64; 3]; 3],
    #[serde(skip)]
    pub aux: Vec<AuxiliarySolution>,
}

fn to_cmat(a: &[[C64; 3]; 3]) -> CMat {
    CMat::from_fn(3, 3, |i, j| a[i][j])
}

impl ResistanceMatrices {
    /// The 6×6 matrix with `ζ^H A6 ζ = ∮ v̄·T(v)·n` for
    /// `v = ζ_i h⁽ⁱ⁾ + ζ_{i+3} H⁽ⁱ⁾`: force rows `[K S]`, torque rows `[P A]`.
    pub fn a6(&self) -> CMat {
        let mut m = CMat::zeros(6, 6);
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = self.k[i][j];
                m[(i, j + 3)] = self.s[i][j];
                m[(i + 3, j)] = self.p[i][j];
                m[(i + 3, j + 3)] = self.a[i][j];
            }
        }
        m
    }

    /// The block layout `[[K, P], [S, A]]` read literally;
    /// equal to [`Self::a6`] whenever `P = S`.
    pub fn a6_as_printed(&self) -> CMat {
        let mut m = self.a6();
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j + 3)] = self.p[i][j];
                m[(i + 3, j)] = self.s[i][j];
            }
        }
        m
    }

    /// `B = iω diag(M, M, M, I, I, I) + A6`.
    pub fn b(&self) -> CMat {
        let mut b = self.a6();
        for i in 0..3 {
            b[(i, i)] += I * (self.omega * self.mass);
            b[(i + 3, i + 3)] += I * (self.omega * self.inertia);
        }
        b
    }

    pub fn b_min_singular(&self) -> f64 {
        min_singular_value(&self.b())
    }

    /// `min_μ σ_min(K + iμ)` and `min_μ σ_min(A + iμ)` over a μ grid.
    pub fn shifted_min_singular(&self, mus: &[f64]) -> (f64, f64) {
        let id = CMat::identity(3, 3);
        let f = |a: &CMat| mus.iter().map(|&mu| min_singular_value(&(a + &id * (I * mu)))).fold(f64::INFINITY, f64::min);
        (f(&to_cmat(&self.k)), f(&to_cmat(&self.a)))
    }

    /// `v = ζ_i h⁽ⁱ⁾ + ζ_{i+3} H⁽ⁱ⁾`.
    pub fn combine(&self, zeta: &[C64; 6]) -> Result<CoupledField> {
        if self.aux.len() != 6 {
            return Err(Error::InvalidInput("auxiliary fields not retained".into()));
        }
        let mut v = self.aux[0].field.scale(zeta[0]);
        for i in 1..6 {
            v.axpy(zeta[i], &self.aux[i].field);
        }
        Ok(v)
    }

    /// Relative residual of the volume–surface identity
    /// `iω‖v‖² + 2‖Dv‖² − t(∂1v, v̄) = ζ^H A6 ζ`, with the volume side
    /// assembled from the separate Gram, dissipation and transport forms.
    pub fn identity_residual(&self, zeta: &[C64; 6], d: &Discretization) -> Result<f64> {
        let v = self.combine(zeta)?;
        let mut lhs = c(0.0, 0.0);
        let mut scale = 0.0;
        for m in v.ms() {
            let cm = CVec::from_column_slice(v.block(m));
            let gf = maybe_conj(&d.block(m).gram_fluid, m < 0);
            let l2 = cm.dotc(&(gf * &cm));
            let dd = cm.dotc(&(dissipation(d, m) * &cm));
            let tr = if self.transport != 0.0 { cm.dotc(&(transport_matrix(d, m) * &cm)) } else { c(0.0, 0.0) };
            lhs += I * self.omega * l2 + dd * 2.0 - tr * self.transport;
            scale += (self.omega * l2.re).abs() + 2.0 * dd.re + (self.transport * tr.norm()).abs();
        }
        let z = CVec::from_column_slice(zeta);
        let rhs = z.dotc(&(self.a6() * &z));
        Ok((lhs - rhs).norm() / scale.max(1e-300))
    }

    /// One CSV row: `omega, transport`, then the 36 entries of `A6` and the
    /// 36 entries of `B`, each as `re, im`, row-major.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![format!("{}", self.omega), format!("{}", self.transport)];
        for m in [self.a6(), self.b()] {
            for i in 0..6 {
                for j in 0..6 {
                    cols.push(format!("{:.16e}", m[(i, j)].re));
                    cols.push(format!("{:.16e}", m[(i, j)].im));
                }
            }
        }
        cols.join(",")
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["omega".to_string(), "transport".to_string()];
        for name in ["A6", "B"] {
            for i in 0..6 {
                for j in 0..6 {
                    cols.push(format!("{name}_{i}{j}_re"));
                    cols.push(format!("{name}_{i}{j}_im"));
                }
            }
        }
        cols.join(",")
    }
}

/// Auxiliary solution for the frequency index `k` (`ω = k`) and transport
/// speed `tau` along `e1`.
pub fn auxiliary_solve(k: i32, kind: AuxKind, axis: usize, tau: f64, d: &Discretization) -> Result<AuxiliarySolution> {
    if k == 0 {
        return Err(Error::InvalidInput("frequency index must be nonzero".into()));
    }
    FrequencySolver::new(d, k as f64, tau)?.auxiliary(kind, axis)
}

pub fn coupling_matrices(k: i32, tau: f64, p: &PhysicalParams, d: &Discretization) -> Result<ResistanceMatrices> {
    if k == 0 {
        return Err(Error::InvalidInput("frequency index must be nonzero".into()));
    }
    let r = FrequencySolver::new(d, k as f64, tau)?.resistance(p)?;
    if !(r.b_min_singular() > 1e-12) {
        return Err(Error::Singular(format!("B at k = {k}: discretization failure")));
    }
    Ok(r)
}

pub fn aux_norms(h: &CoupledField, d: &Discretization) -> AuxNorms {
    let (mut l2, mut g2, mut s2) = (0.0, 0.0, 0.0);
    for m in h.ms() {
        let blk = d.block(m);
        let cm = h.block(m);
        let gf = maybe_conj(&blk.gram_fluid, m < 0);
        let cv = CVec::from_column_slice(cm);
        l2 += cv.dotc(&(gf * &cv)).re;
        let gr = blk.eg.mul_vec(cm, m < 0);
        g2 += gr.iter().zip(&d.w_vol9).map(|(z, w)| z.norm_sqr() * w).sum::<f64>();
        let lp = blk.elap.mul_vec(cm, m < 0);
        s2 += lp.iter().zip(&d.w_vol3).map(|(z, w)| z.norm_sqr() * w).sum::<f64>();
    }
    AuxNorms { l2: l2.max(0.0).sqrt(), grad: g2.sqrt(), second: s2.sqrt() }
}

/// Fourier data of one mode: fluid load `f` (samples on the volume grid;
/// its rigid part is ignored), body force `F` and torque `G`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeData {
    pub k: i32,
    pub f: Option<GridField>,
    pub force: [C64; 3],
    pub torque: [C64; 3],
}

impl ModeData {
    pub fn zero(k: i32) -> Self {
        ModeData { k, f: None, force: [c(0.0, 0.0); 3], torque: [c(0.0, 0.0); 3] }
    }

    /// Mode `−k` of a real signal.
    pub fn conj(&self) -> Self {
        ModeData {
            k: -self.k,
            f: self.f.as_ref().map(|g| {
                let mm = g.m_max as i32;
                GridField {
                    m_max: g.m_max,
                    u: (-mm..=mm).map(|m| g.block(-m).iter().map(|z| z.conj()).collect()).collect(),
                    chi: g.chi.map(|z| z.conj()),
                    sigma: g.sigma.map(|z| z.conj()),
                }
            }),
            force: self.force.map(|z| z.conj()),
            torque: self.torque.map(|z| z.conj()),
        }
    }

    fn fluid_load(&self, d: &Discretization) -> Result<Vec<CVec>> {
        let mm = d.m_max() as i32;
        (-mm..=mm)
            .map(|m| match &self.f {
                None => Ok(CVec::zeros(d.block_len(m))),
                Some(g) => {
                    let y = g.u.get((m + g.m_max as i32) as usize).ok_or_else(|| Error::ShapeMismatch("forcing orders".into()))?;
                    if y.len() != 3 * d.n_q() || g.m_max != d.m_max() {
                        return Err(Error::ShapeMismatch("forcing samples".into()));
                    }
                    Ok(d.block(m).eu.adj_mul_vec(&d.w_vol3, y, m < 0))
                }
            })
            .collect()
    }

    /// Full weak load: fluid part plus `F·χ̄_φ + G·σ̄_φ`.
    pub fn load(&self, d: &Discretization) -> Result<Vec<CVec>> {
        let mut l = self.fluid_load(d)?;
        let mm = d.m_max() as i32;
        let (fr, gr) = (cartesian_to_rows(self.force), cartesian_to_rows(self.torque));
        for (k, m) in [-1i32, 0, 1].into_iter().enumerate() {
            let blk = d.block(m);
            let v = &mut l[(m + mm) as usize];
            v[blk.trans.unwrap()] += fr[k];
            v[blk.rot.unwrap()] += gr[k];
        }
        Ok(l)
    }

    pub fn norm(&self, d: &Discretization) -> f64 {
        let fl = match &self.f {
            None => 0.0,
            Some(g) => g.u.iter().map(|b| b.iter().zip(&d.w_vol3).map(|(z, w)| z.norm_sqr() * w).sum::<f64>()).sum::<f64>(),
        };
        let r: f64 = self.force.iter().chain(&self.torque).map(|z| z.norm_sqr()).sum();
        (fl + r).sqrt()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeSolution {
    pub k: i32,
    pub omega: f64,
    /// Total field `z + Σ χ_i h⁽ⁱ⁾ + σ_i H⁽ⁱ⁾`.
    pub u: CoupledField,
    /// Zero-trace part.
    pub z: CoupledField,
    pub chi: [C64; 3],
    pub sigma: [C64; 3],
    /// Modified body data `(𝓕, 𝓖) = (F, G) − tractions of z`.
    pub rhs6: [C64; 6],
    pub residual: f64,
    /// Distance to the monolithic coupled solve (relative).
    pub monolithic_gap: f64,
}

/// Solve one Fourier mode of the periodic linear problem at frequency
/// `ω = k ζ`: `iω u − t∂1 u = Δu − ∇q + f`, `u = χ + σ × x` on the sphere,
/// `iωMχ + ∫T·n = F`, `iωIσ + ∫x×T·n = G`.
pub fn mode_solve(data: &ModeData, zeta: f64, transport: f64, p: &PhysicalParams, d: &Discretization) -> Result<ModeSolution> {
    if data.k == 0 {
        return Err(Error::InvalidInput("zero-mean problem: mode k = 0 excluded".into()));
    }
    let omega = data.k as f64 * zeta;
    let fs = FrequencySolver::new(d, omega, transport)?;
    let fluid = data.fluid_load(d)?;
    let z = fs.zero_trace_solve(&fluid)?;
    let (fz, gz) = fs.traction(&z, Some(&fluid));
    let mut rhs6 = [c(0.0, 0.0); 6];
    for i in 0..3 {
        rhs6[i] = data.force[i] - fz[i];
        rhs6[i + 3] = data.torque[i] - gz[i];
    }
    let rm = fs.resistance(p)?;
    let b = rm.b();
    let xi = b.clone().lu().solve(&CVec::from_column_slice(&rhs6)).ok_or_else(|| Error::Singular(format!("B at k = {}", data.k)))?;
    let chi = [xi[0], xi[1], xi[2]];
    let sigma = [xi[3], xi[4], xi[5]];
    let mut u = z.clone();
    u.axpy(c(1.0, 0.0), &fs.rigid_response(chi, sigma)?);

    // Monolithic check: (iω G + 2D − t C1) c = load with mass-weighted G.
    let load = data.load(d)?;
    let mut mono = CoupledField::zeros(d);
    mono.real = false;
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, m) in u.ms().enumerate() {
        let a = fluid_weak_block(d, m, omega, transport) + (gram(d, p, m) - maybe_conj(&d.block(m).gram_fluid, m < 0)) * (I * omega);
        let x = a.clone().lu().solve(&load[k]).ok_or_else(|| Error::Singular("monolithic mode system".into()))?;
        let cu = CVec::from_column_slice(u.block(m));
        num += (&a * &cu - &load[k]).norm_squared();
        den += load[k].norm_squared() + (&a * &cu).norm_squared();
        *mono.block_mut(m) = x.iter().copied().collect();
    }
    let residual = (num / den.max(1e-300)).sqrt();
    let gap = mono.sub(&u).coeff_norm() / u.coeff_norm().max(1e-300);
    let monolithic_gap = if u.coeff_norm() == 0.0 { mono.coeff_norm() } else { gap };
    if !(residual < 1e-10) {
        return Err(Error::NoConvergence(format!("mode {} residual {residual:.2e}", data.k)));
    }
    Ok(ModeSolution { k: data.k, omega, u, z, chi, sigma, rhs6, residual, monolithic_gap })
}

/// A zero-mean time-periodic field `Σ_{k≠0} w_k e^{iks}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeriodicField {
    pub modes: Vec<(i32, CoupledField)>,
}

impl PeriodicField {
    pub fn mode(&self, k: i32) -> Option<&CoupledField> {
        self.modes.iter().find(|(j, _)| *j == k).map(|(_, f)| f)
    }

    /// `Re[w0 e^{−is}] = ½ w0 e^{−is} + ½ w̄0 e^{is}`.
    pub fn first_harmonic(w0: &CoupledField) -> Self {
        PeriodicField { modes: vec![(-1, w0.scale(c(0.5, 0.0))), (1, w0.conj().scale(c(0.5, 0.0)))] }
    }

    pub fn is_real(&self, tol: f64) -> bool {
        self.modes.iter().all(|(k, f)| match self.mode(-k) {
            Some(g) => f.sub(&g.conj()).coeff_norm() <= tol * (1.0 + f.coeff_norm()),
            None => f.coeff_norm() <= tol,
        })
    }

    /// Field value at time `s`.
    pub fn at(&self, s: f64) -> CoupledField {
        let mut out = self.modes[0].1.scale(c(0.0, 0.0));
        for (k, f) in &self.modes {
            out.axpy(C64::from_polar(1.0, *k as f64 * s), f);
        }
        out
    }

    pub fn norm(&self, p: &PhysicalParams, d: &Discretization) -> f64 {
        self.modes
            .iter()
            .map(|(_, f)| crate::spaces::inner_rigid(f, f, p, d).map(|z| z.re).unwrap_or(f64::NAN))
            .sum::<f64>()
            .sqrt()
    }

    pub fn coeff_norm(&self) -> f64 {
        self.modes.iter().map(|(_, f)| f.coeff_norm().powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeriodicSolution {
    pub zeta: f64,
    pub transport: f64,
    pub modes: Vec<ModeSolution>,
    /// `(Σ (k²+1)‖u_k‖² + ‖∇u_k‖² + ‖Δu_k‖² + k²|ξ_k|²)^{1/2}`.
    pub solution_norm: f64,
    pub data_norm: f64,
    /// `solution_norm / data_norm`, the observed constant of the bound.
    pub bound_ratio: f64,
}

impl PeriodicSolution {
    pub fn field(&self) -> PeriodicField {
        PeriodicField { modes: self.modes.iter().map(|m| (m.k, m.u.clone())).collect() }
    }
}

/// Inverse of `ζ∂s + L0`-type periodic problems mode by mode (transport
/// speed `t` along `e1`).
pub fn periodic_solve(data: &[ModeData], zeta: f64, transport: f64, p: &PhysicalParams, d: &Discretization) -> Result<PeriodicSolution> {
    let mut seen = std::collections::BTreeSet::new();
    let mut modes = Vec::new();
    let (mut sn, mut dn) = (0.0, 0.0);
    for md in data {
        if md.k == 0 {
            return Err(Error::InvalidInput("data must have zero mean (no k = 0 mode)".into()));
        }
        if !seen.insert(md.k) {
            return Err(Error::InvalidInput(format!("mode {} given twice", md.k)));
        }
        let ms = mode_solve(md, zeta, transport, p, d)?;
        let n = aux_norms(&ms.u, d);
        let k2 = (md.k as f64 * zeta).powi(2);
        let xi2: f64 = ms.chi.iter().chain(&ms.sigma).map(|z| z.norm_sqr()).sum();
        sn += (k2 + 1.0) * n.l2 * n.l2 + n.grad * n.grad + n.second * n.second + k2 * xi2;
        dn += md.norm(d).powi(2);
        modes.push(ms);
    }
    let (sn, dn) = (sn.sqrt(), dn.sqrt());
    Ok(PeriodicSolution { zeta, transport, modes, solution_norm: sn, data_norm: dn, bound_ratio: if dn > 0.0 { sn / dn } else { 0.0 } })
}

/// `Q(w) = ζ0 ∂s w + L(w)` mode by mode, with `L` given by its weak
/// matrices (`L0` gives `Q0`, `L2` gives `Q`).
pub fn apply_q(w: &PeriodicField, zeta0: f64, op: &BlockOperator) -> Result<PeriodicField> {
    let mut modes = Vec::new();
    for (k, f) in &w.modes {
        if *k == 0 {
            return Err(Error::InvalidInput("periodic field must have zero mean".into()));
        }
        let mut out = op.apply(f)?;
        out.axpy(I * (*k as f64 * zeta0), f);
        modes.push((*k, out));
    }
    Ok(PeriodicField { modes })
}
