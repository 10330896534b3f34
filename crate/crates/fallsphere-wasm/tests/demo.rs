use fallsphere_wasm::{normal_form_branch, resistance, stokes_drag};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn normal_form_matches_exact_branch() {
    let v = parse(normal_form_branch(2.0, 0.3, 5).unwrap());
    for p in v["points"].as_array().unwrap() {
        assert!((p["mu"].as_f64().unwrap() - p["mu_exact"].as_f64().unwrap()).abs() < 1e-10);
        assert!((p["zeta"].as_f64().unwrap() - p["zeta_exact"].as_f64().unwrap()).abs() < 1e-10);
    }
}

#[test]
fn coarse_drag_and_resistance_are_near_unbounded_values() {
    let v = parse(stokes_drag(1e-3, 2, 16, 100.0).unwrap());
    assert!(v["rel"].as_f64().unwrap().abs() < 0.05);
    let r = parse(resistance(1.0, 2, 16, 100.0).unwrap());
    let (k, u) = (&r["K11"], &r["K_unbounded"]);
    assert!((k[0].as_f64().unwrap() / u[0].as_f64().unwrap() - 1.0).abs() < 0.01);
    assert!(r["sigma_min_B"].as_f64().unwrap() > 1.0);
}
