//! Three solver entry points for the static demo page. Each returns a JSON
//! string so the page needs no bindings beyond `wasm-bindgen` itself.

use std::f64::consts::PI;

use fallsphere::discretization::{build_discretization, Backend, DiscretizationConfig};
use fallsphere::hopf::{hopf_solve_abstract, HopfSettings, NormalForm};
use fallsphere::linalg::I;
use fallsphere::periodic::FrequencySolver;
use fallsphere::spaces::PhysicalParams;
use fallsphere::steady::steady_solve;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn spectral(l_max: usize, n_r: usize, r_out: f64) -> DiscretizationConfig {
    DiscretizationConfig { l_max, m_max: 1, n_r, r_out, k_max: 1, backend: Backend::Spectral }
}

/// Steady drag `|τ|` at a small Galilei number against the unbounded Stokes
/// value `λ/(6π)`.
#[wasm_bindgen]
pub fn stokes_drag(lambda: f64, l_max: usize, n_r: usize, r_out: f64) -> Result<String, JsValue> {
    let d = build_discretization(&spectral(l_max, n_r, r_out)).map_err(err)?;
    let p = PhysicalParams::new(lambda, 1.0).map_err(err)?;
    let s = steady_solve(lambda, &p, &d, None).map_err(err)?;
    let stokes = lambda / (6.0 * PI);
    Ok(json!({
        "tau": s.tau_norm(),
        "stokes": stokes,
        "rel": s.tau_norm() / stokes - 1.0,
        "energy_gap": s.energy_gap,
        "dofs": d.total_dofs(),
    })
    .to_string())
}

/// Resistance of a sphere oscillating at frequency `omega` in fluid at rest,
/// with `σ_min(B)` of the coupled rigid system.
#[wasm_bindgen]
pub fn resistance(omega: f64, l_max: usize, n_r: usize, r_out: f64) -> Result<String, JsValue> {
    let d = build_discretization(&spectral(l_max, n_r, r_out)).map_err(err)?;
    let p = PhysicalParams::new(0.0, 1.0).map_err(err)?;
    let r = FrequencySolver::new(&d, omega, 0.0).and_then(|s| s.resistance(&p)).map_err(err)?;
    let k11 = r.k[0][0];
    let k22 = r.k[1][1];
    let q = (I * omega).sqrt();
    let unbounded = (q * q / 9.0 + q + 1.0) * (6.0 * PI);
    Ok(json!({
        "K_unbounded": [unbounded.re, unbounded.im],
        "omega": r.omega,
        "K11": [k11.re, k11.im],
        "K22": [k22.re, k22.im],
        "sigma_min_B": r.b_min_singular(),
    })
    .to_string())
}

/// Branch of the planar Hopf normal form with frequency shift `a`, computed
/// by the engine used for the fluid problem; the exact branch is `μ = ε²`,
/// `ζ = 1 − aε²`.
#[wasm_bindgen]
pub fn normal_form_branch(a: f64, eps_max: f64, n_eps: usize) -> Result<String, JsValue> {
    let s = HopfSettings { eps_max, n_eps, ..HopfSettings::default() };
    let b = hopf_solve_abstract(&NormalForm { a, k_max: 3 }, &s).map_err(err)?;
    let pts: Vec<_> = b.points.iter().map(|p| json!({ "eps": p.eps, "mu": p.mu, "zeta": p.zeta, "mu_exact": p.eps * p.eps, "zeta_exact": 1.0 - a * p.eps * p.eps })).collect();
    Ok(json!({ "points": pts, "parity_mu": b.parity_mu, "parity_zeta": b.parity_zeta }).to_string())
}
