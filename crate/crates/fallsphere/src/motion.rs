//! Rigid-body content of the critical mode: the translational and angular
//! velocity amplitudes `(χ0, σ0)` of the eigenvector, reconstructed from
//! auxiliary problems and two volume functionals, and the lateral
//! oscillation criterion.
//!
//! Conventions. The eigenvector entering here, `w0`, satisfies
//! `(iζ0 G + J) w0 = 0` weakly, i.e. it belongs to the eigenvalue `−iζ0` of
//! `L2`; it is the conjugate of the eigenvector reported by
//! [`crate::linop::find_critical`]. The auxiliary fields solve
//! `−iζ0 h + λτ ∂1 h = div T(h, p)` with rigid traces `e_i` (`h⁽ⁱ⁾`) and
//! `e_i × x` (`H⁽ⁱ⁾`). Testing the eigen-equation with `h⁽ⁱ⁾` gives
//!
//! ```text
//! (K̃ χ0 + P̂ σ0)_i = F_i := −(K w0, h⁽ⁱ⁾),    K̃ = iMζ0 + K̂,
//! (Ŝ χ0 + Ã σ0)_i = G_i := −(K w0, H⁽ⁱ⁾),    Ã = iIζ0 + Â,
//! ```
//!
//! with `K w0 = λ[v·∇w0 + (w0 − χ0)·∇v]` and the hatted matrices the
//! boundary pairings of `B^H h` (`B = iζ0 G_Ω + 2D − λτ C1`), which the
//! auxiliary equations make vanish away from the rigid rows.

use serde::{Deserialize, Serialize};

use crate::discretization::{maybe_conj, CoupledField, Discretization};
use crate::error::{Error, Result};
use crate::forms::pair;
use crate::linalg::{c, min_singular_value, CMat, CVec, C64, I};
use crate::linop::{assemble, BlockOperator, CriticalPoint, OpKind};
use crate::periodic::{fluid_weak_block, AuxKind, AuxiliarySolution, FrequencySolver};
use crate::spaces::{gram, PhysicalParams};
use crate::steady::SteadyState;

/// How the hatted matrices are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HatForm {
    /// Rigid rows of `B^H h`: includes the transport flux `λ∮(τ·n) w0·h̄`.
    Adjoint,
    /// Conjugated auxiliary tractions only, `∫ T(h*, p*)·n`.
    Traction,
}

/// Which formula turns `(F, G)` into `(χ0, σ0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Formula {
    /// `χ0 = H(F + K̃Ã⁻¹G)`, `σ0 = M(G + ÃK̃⁻¹F)`.
    Printed,
    /// Block elimination: `χ0 = H(F − P̂Ã⁻¹G)`, `σ0 = M(G − ŜK̃⁻¹F)`.
    Schur,
    /// Both; keep the one that reproduces the eigenvector's rigid parts.
    Auto,
}

/// Auxiliary family used in the torque functional `G`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TorqueTest {
    /// `H⁽ⁱ⁾` (trace `e_i × x`), pairing with the torque balance.
    Rotational,
    /// `h⁽ⁱ⁾`, the literal reading (then `G = F`).
    Translational,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotionSettings {
    /// Lateral amplitude threshold, relative to `‖w0‖ = 1`.
    pub threshold: f64,
    pub formula: Formula,
    pub hat_form: HatForm,
    pub torque_test: TorqueTest,
}

impl Default for MotionSettings {
    fn default() -> Self {
        MotionSettings { threshold: 1e-6, formula: Formula::Auto, hat_form: HatForm::Adjoint, torque_test: TorqueTest::Rotational }
    }
}

pub type Mat3 = [[C64; 3]; 3];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HattedMatrices {
    pub form: HatForm,
    pub k_hat: Mat3,
    pub a_hat: Mat3,
    pub p_hat: Mat3,
    pub s_hat: Mat3,
    pub k_tilde: Mat3,
    pub a_tilde: Mat3,
    /// `(K̃ − P̂ Ã⁻¹ Ŝ)⁻¹`.
    pub h: Mat3,
    /// `(Ã − Ŝ K̃⁻¹ P̂)⁻¹`.
    pub m: Mat3,
    /// Smallest singular values of `K̃`, `Ã` and the 6×6 block matrix.
    pub min_singular: [f64; 3],
}

fn to_mat(a: &Mat3) -> CMat {
    CMat::from_fn(3, 3, |i, j| a[i][j])
}

fn from_mat(a: &CMat) -> Mat3 {
    let mut out = [[c(0.0, 0.0); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = a[(i, j)];
        }
    }
    out
}

fn inv(a: &CMat, what: &str) -> Result<CMat> {
    a.clone().try_inverse().ok_or_else(|| Error::Singular(what.into()))
}

fn v3(a: [C64; 3]) -> CVec {
    CVec::from_column_slice(&a)
}

fn a3(v: &CVec) -> [C64; 3] {
    [v[0], v[1], v[2]]
}

impl HattedMatrices {
    fn build(form: HatForm, k_hat: Mat3, a_hat: Mat3, p_hat: Mat3, s_hat: Mat3, zeta0: f64, p: &PhysicalParams) -> Result<Self> {
        let id = CMat::identity(3, 3);
        let kt = to_mat(&k_hat) + &id * (I * (p.mass * zeta0));
        let at = to_mat(&a_hat) + &id * (I * (p.inertia * zeta0));
        let (pm, sm) = (to_mat(&p_hat), to_mat(&s_hat));
        let mut big = CMat::zeros(6, 6);
        big.view_mut((0, 0), (3, 3)).copy_from(&kt);
        big.view_mut((0, 3), (3, 3)).copy_from(&pm);
        big.view_mut((3, 0), (3, 3)).copy_from(&sm);
        big.view_mut((3, 3), (3, 3)).copy_from(&at);
        let min_singular = [min_singular_value(&kt), min_singular_value(&at), min_singular_value(&big)];
        let scale = 1.0 + big.norm();
        if min_singular.iter().any(|s| !(*s > 1e-12 * scale)) {
            return Err(Error::Singular(format!("hatted matrices (sigma_min = {min_singular:?})")));
        }
        let (kti, ati) = (inv(&kt, "K tilde")?, inv(&at, "A tilde")?);
        let h = inv(&(&kt - &pm * &ati * &sm), "Schur complement of A tilde")?;
        let m = inv(&(&at - &sm * &kti * &pm), "Schur complement of K tilde")?;
        Ok(HattedMatrices {
            form,
            k_hat,
            a_hat,
            p_hat,
            s_hat,
            k_tilde: from_mat(&kt),
            a_tilde: from_mat(&at),
            h: from_mat(&h),
            m: from_mat(&m),
            min_singular,
        })
    }

    /// `(χ0, σ0)` from the functionals.
    pub fn solve(&self, f: [C64; 3], g: [C64; 3], formula: Formula) -> Result<([C64; 3], [C64; 3])> {
        let (kt, at, pm, sm) = (to_mat(&self.k_tilde), to_mat(&self.a_tilde), to_mat(&self.p_hat), to_mat(&self.s_hat));
        let (h, m) = (to_mat(&self.h), to_mat(&self.m));
        let (fv, gv) = (v3(f), v3(g));
        let (kti, ati) = (inv(&kt, "K tilde")?, inv(&at, "A tilde")?);
        let (chi, sigma) = match formula {
            Formula::Printed => (&h * (&fv + &kt * &ati * &gv), &m * (&gv + &at * &kti * &fv)),
            Formula::Schur | Formula::Auto => (&h * (&fv - &pm * &ati * &gv), &m * (&gv - &sm * &kti * &fv)),
        };
        Ok((a3(&chi), a3(&sigma)))
    }
}

/// Everything about the critical state needed by the reconstruction.
pub struct OscillationContext<'a> {
    pub d: &'a Discretization,
    pub p: PhysicalParams,
    pub lambda: f64,
    pub tau: f64,
    pub zeta0: f64,
    /// `h⁽ⁱ⁾` then `H⁽ⁱ⁾`.
    pub aux: Vec<AuxiliarySolution>,
    pub hats: HattedMatrices,
    /// Largest interior row of `B^H h` relative to its rigid rows.
    pub adjoint_defect: f64,
    op: BlockOperator,
    k_op: BlockOperator,
    rows: Vec<Vec<CVec>>,
}

/// Auxiliary problems `−iζ0 h + λτ∂1 h = div T(h, p)` with trace `e_i`
/// (translation) or `e_i × x` (rotation).
pub fn oscillation_auxiliary(i: usize, kind: AuxKind, crit: &CriticalPoint, s_c: &SteadyState, d: &Discretization) -> Result<AuxiliarySolution> {
    check_state(crit, s_c)?;
    FrequencySolver::new(d, -crit.zeta0, -crit.lambda_c * s_c.tau0[0])?.auxiliary(kind, i)
}

fn check_state(crit: &CriticalPoint, s_c: &SteadyState) -> Result<()> {
    if (crit.lambda_c - s_c.lambda).abs() > 1e-9 * (1.0 + crit.lambda_c.abs()) {
        return Err(Error::InvalidInput("steady state is not at the critical parameter".into()));
    }
    if !s_c.axis_aligned() {
        return Err(Error::InvalidInput("steady translation must be aligned with gravity".into()));
    }
    if !(crit.zeta0 > 0.0) {
        return Err(Error::InvalidInput("critical frequency must be positive".into()));
    }
    Ok(())
}

fn units() -> [[C64; 3]; 3] {
    let mut e = [[c(0.0, 0.0); 3]; 3];
    for (i, row) in e.iter_mut().enumerate() {
        row[i] = c(1.0, 0.0);
    }
    e
}

impl<'a> OscillationContext<'a> {
    pub fn new(crit: &CriticalPoint, s_c: &SteadyState, p: &PhysicalParams, d: &'a Discretization, form: HatForm) -> Result<Self> {
        Self::at(crit.lambda_c, crit.zeta0, s_c, p, d, form)
    }

    /// Context at an arbitrary frequency `ζ0 > 0` on the branch point `s_c`.
    pub fn at(lambda: f64, zeta0: f64, s_c: &SteadyState, p: &PhysicalParams, d: &'a Discretization, form: HatForm) -> Result<Self> {
        if (lambda - s_c.lambda).abs() > 1e-9 * (1.0 + lambda.abs()) || !s_c.axis_aligned() || !(zeta0 > 0.0) {
            return Err(Error::InvalidInput("need an axis-aligned steady state at lambda and zeta0 > 0".into()));
        }
        let tau = s_c.tau0[0];
        let solver = FrequencySolver::new(d, -zeta0, -lambda * tau)?;
        let mut aux = Vec::new();
        for kind in [AuxKind::Translation, AuxKind::Rotation] {
            for axis in 0..3 {
                aux.push(solver.auxiliary(kind, axis)?);
            }
        }
        let mm = d.m_max() as i32;
        let bf: Vec<CMat> = (-mm..=mm).map(|m| fluid_weak_block(d, m, zeta0, lambda * tau)).collect();
        // rows of B^H h for every auxiliary field
        let rows: Vec<Vec<CVec>> = aux
            .iter()
            .map(|a| a.field.ms().enumerate().map(|(k, m)| bf[k].adjoint() * CVec::from_column_slice(a.field.block(m))).collect())
            .collect();
        let mut defect: f64 = 0.0;
        for r in &rows {
            let (mut rig, mut int) = (0.0f64, 0.0f64);
            for (k, m) in (-mm..=mm).enumerate() {
                let blk = d.block(m);
                for (j, z) in r[k].iter().enumerate() {
                    if Some(j) == blk.trans || Some(j) == blk.rot {
                        rig = rig.max(z.norm());
                    } else {
                        int = int.max(z.norm());
                    }
                }
            }
            defect = defect.max(int / rig.max(1e-300));
        }
        let e = units();
        let basis_t: Vec<CoupledField> = e.iter().map(|x| CoupledField::from_rigid(d, *x, [c(0.0, 0.0); 3])).collect();
        let basis_r: Vec<CoupledField> = e.iter().map(|x| CoupledField::from_rigid(d, [c(0.0, 0.0); 3], *x)).collect();
        let mut hat = [[[c(0.0, 0.0); 3]; 3]; 4];
        for i in 0..3 {
            for j in 0..3 {
                match form {
                    HatForm::Adjoint => {
                        // (B^H h)^H w paired with the rigid motion e_j (or e_j × x)
                        hat[0][i][j] = pair(&rows[i], &basis_t[j]).conj();
                        hat[2][i][j] = pair(&rows[i], &basis_r[j]).conj();
                        hat[3][i][j] = pair(&rows[3 + i], &basis_t[j]).conj();
                        hat[1][i][j] = pair(&rows[3 + i], &basis_r[j]).conj();
                    }
                    HatForm::Traction => {
                        hat[0][i][j] = aux[i].force[j].conj();
                        hat[2][i][j] = aux[i].torque[j].conj();
                        hat[3][i][j] = aux[3 + i].force[j].conj();
                        hat[1][i][j] = aux[3 + i].torque[j].conj();
                    }
                }
            }
        }
        let hats = HattedMatrices::build(form, hat[0], hat[1], hat[2], hat[3], zeta0, p)?;
        let op = assemble(OpKind::L2, s_c, p, d)?;
        let k_op = assemble(OpKind::K, s_c, p, d)?;
        Ok(OscillationContext { d, p: p.clone(), lambda, tau, zeta0, aux, hats, adjoint_defect: defect, op, k_op, rows })
    }

    /// `F_i = −(K w, h⁽ⁱ⁾)` and `G_i = −(K w, H⁽ⁱ⁾)` (or `h⁽ⁱ⁾`).
    pub fn functionals(&self, w: &CoupledField, test: TorqueTest) -> Result<([C64; 3], [C64; 3])> {
        w.check(self.d)?;
        let kw = self.k_op.apply_weak(w);
        let mut f = [c(0.0, 0.0); 3];
        let mut g = [c(0.0, 0.0); 3];
        for i in 0..3 {
            f[i] = -pair(&kw, &self.aux[i].field);
            g[i] = match test {
                TorqueTest::Rotational => -pair(&kw, &self.aux[3 + i].field),
                TorqueTest::Translational => f[i],
            };
        }
        Ok((f, g))
    }

    /// Pairings of the weak eigen-residual `(iζ0 G + J) w` with the
    /// auxiliary fields; zero for an exact eigenvector.
    pub fn residual_pairings(&self, w: &CoupledField) -> ([C64; 3], [C64; 3]) {
        let r = self.eigen_rows(w);
        let mut f = [c(0.0, 0.0); 3];
        let mut g = [c(0.0, 0.0); 3];
        for i in 0..3 {
            f[i] = pair(&r, &self.aux[i].field);
            g[i] = pair(&r, &self.aux[3 + i].field);
        }
        (f, g)
    }

    fn eigen_rows(&self, w: &CoupledField) -> Vec<CVec> {
        let jw = self.op.apply_weak(w);
        w.ms()
            .enumerate()
            .map(|(k, m)| &jw[k] + gram(self.d, &self.p, m) * CVec::from_column_slice(w.block(m)) * (I * self.zeta0))
            .collect()
    }

    /// Relative weak residual `‖(iζ0 G + J) w‖ / ‖G w‖`.
    pub fn eigen_residual(&self, w: &CoupledField) -> f64 {
        let r = self.eigen_rows(w);
        let num: f64 = r.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt();
        let den: f64 = w.ms().map(|m| (gram(self.d, &self.p, m) * CVec::from_column_slice(w.block(m))).norm_squared()).sum::<f64>().sqrt();
        num / den.max(1e-300) / self.zeta0.max(1.0)
    }

    /// Rigid rows of `B^H h⁽ⁱ⁾` (or of `B^H H⁽ⁱ⁾` for `i ≥ 3`).
    pub fn adjoint_rows(&self, i: usize) -> &[CVec] {
        &self.rows[i]
    }

    /// Fluid Gram block (no body mass), used in the mass-term check.
    pub fn fluid_gram(&self, m: i32) -> CMat {
        maybe_conj(&self.d.block(m).gram_fluid, m < 0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OscillationResult {
    pub zeta0: f64,
    #[serde(rename = "F")]
    pub f_vec: [C64; 3],
    #[serde(rename = "G")]
    pub g_vec: [C64; 3],
    pub chi0: [C64; 3],
    pub sigma0: [C64; 3],
    /// `|(χ0)_2|² + |(χ0)_3|²` (gravity along `e1`).
    pub lateral_amplitude: f64,
    pub threshold: f64,
    pub criterion: bool,
    /// `‖(χ0, σ0) − rigid parts of w0‖`, with `‖w0‖ = 1`.
    pub consistency_gap: f64,
    /// The same gap for the other formula (diagnostic).
    pub alternative_gap: f64,
    pub formula: Formula,
    pub hat_form: HatForm,
    pub eigen_residual: f64,
    /// Rigid parts of the normalized eigenvector itself.
    pub chi_eig: [C64; 3],
    pub sigma_eig: [C64; 3],
    pub hats: HattedMatrices,
}

impl OscillationResult {
    pub fn verdict(&self) -> String {
        format!(
            "lateral amplitude {:.3e} {} threshold {:.1e}: {} (consistency gap {:.2e}, {:?} formula)",
            self.lateral_amplitude,
            if self.criterion { ">" } else { "<=" },
            self.threshold,
            if self.criterion { "sideways oscillation of the centre of mass" } else { "no sideways oscillation" },
            self.consistency_gap,
            self.formula
        )
    }
}

fn gap(a: ([C64; 3], [C64; 3]), b: ([C64; 3], [C64; 3])) -> f64 {
    a.0.iter().chain(&a.1).zip(b.0.iter().chain(&b.1)).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
}

/// The eigenvector in the convention of this module, normalized so that
/// `w0^H G w0 = 1`.
pub fn normalized_mode(crit: &CriticalPoint, p: &PhysicalParams, d: &Discretization) -> Result<CoupledField> {
    let w = crit.w0.as_ref().ok_or_else(|| Error::InvalidInput("critical point carries no eigenvector field".into()))?.conj();
    let n: f64 = w.ms().map(|m| {
        let x = CVec::from_column_slice(w.block(m));
        x.dotc(&(gram(d, p, m) * &x)).re
    }).sum();
    if !(n > 0.0) {
        return Err(Error::InvalidInput("eigenvector has zero norm".into()));
    }
    Ok(w.scale(c(1.0 / n.sqrt(), 0.0)))
}

/// Reconstruct `(χ0, σ0)` of `w` from the functionals and compare with its
/// own rigid parts. With `forced`, the weak eigen-residual of `w` tested
/// with the auxiliary fields is added to `(F, G)`, which turns the
/// reconstruction into an identity for any `w` (used for planted modes).
pub fn reconstruct(ctx: &OscillationContext, w: &CoupledField, s: &MotionSettings, forced: bool) -> Result<OscillationResult> {
    let (mut f, mut g) = ctx.functionals(w, s.torque_test)?;
    if forced {
        let (rf, rg) = ctx.residual_pairings(w);
        for i in 0..3 {
            f[i] += rf[i];
            g[i] += match s.torque_test {
                TorqueTest::Rotational => rg[i],
                TorqueTest::Translational => rf[i],
            };
        }
    }
    let own = (w.chi(ctx.d), w.sigma(ctx.d));
    let printed = ctx.hats.solve(f, g, Formula::Printed)?;
    let schur = ctx.hats.solve(f, g, Formula::Schur)?;
    let (gp, gs) = (gap(printed, own), gap(schur, own));
    let (formula, (chi0, sigma0), consistency_gap, alternative_gap) = match s.formula {
        Formula::Printed => (Formula::Printed, printed, gp, gs),
        Formula::Schur => (Formula::Schur, schur, gs, gp),
        Formula::Auto if gp < gs => (Formula::Printed, printed, gp, gs),
        Formula::Auto => (Formula::Schur, schur, gs, gp),
    };
    let lateral_amplitude = chi0[1].norm_sqr() + chi0[2].norm_sqr();
    Ok(OscillationResult {
        zeta0: ctx.zeta0,
        f_vec: f,
        g_vec: g,
        chi0,
        sigma0,
        lateral_amplitude,
        threshold: s.threshold,
        criterion: lateral_amplitude > s.threshold,
        consistency_gap,
        alternative_gap,
        formula,
        hat_form: ctx.hats.form,
        eigen_residual: ctx.eigen_residual(w),
        chi_eig: own.0,
        sigma_eig: own.1,
        hats: ctx.hats.clone(),
    })
}

/// `(F, G)` for the critical eigenvector (normalized, in this module's
/// conjugation convention).
pub fn oscillation_functionals(crit: &CriticalPoint, s_c: &SteadyState, d: &Discretization, p: &PhysicalParams, test: TorqueTest) -> Result<([C64; 3], [C64; 3])> {
    let ctx = OscillationContext::new(crit, s_c, p, d, HatForm::Adjoint)?;
    ctx.functionals(&normalized_mode(crit, p, d)?, test)
}

/// Direction of the centre-of-mass oscillation at onset.
pub fn oscillation_direction(crit: &CriticalPoint, s_c: &SteadyState, d: &Discretization, p: &PhysicalParams, s: &MotionSettings) -> Result<OscillationResult> {
    check_state(crit, s_c)?;
    let ctx = OscillationContext::new(crit, s_c, p, d, s.hat_form)?;
    reconstruct(&ctx, &normalized_mode(crit, p, d)?, s, false)
}
