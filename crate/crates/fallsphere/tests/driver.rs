use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use fallsphere::driver::*;
use fallsphere::error::Error;
use fallsphere::hopf::HopfBranch;
use fallsphere::motion::OscillationResult;

const COARSE: &str = "profile = reduced\nbackend = spectral\nl_max = 2\nm_max = 1\nn_r = 16\nr_out = 400\nsteady_lambdas = 1e-3\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fallsphere"))
}

#[test]
fn config_parses_overrides_and_comments() {
    let c = RunConfig::parse("# a run\nlambda_min = 1  # lower end\nlambda_max=2\nformula = printed\nshifts = 0:1, 0.5:-2\n", Profile::Reduced).unwrap();
    assert_eq!((c.lambda_min, c.lambda_max), (1.0, 2.0));
    assert_eq!(c.motion.formula, fallsphere::motion::Formula::Printed);
    assert_eq!(c.critical.shifts.len(), 2);
    assert_eq!(c.critical.shifts[1].im, -2.0);
    assert_eq!(c.disc, fallsphere::discretization::DiscretizationConfig::reduced());
    let r = RunConfig::parse("profile = reference", Profile::Reduced).unwrap();
    assert_eq!(r.profile, Profile::Reference);
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(matches!(RunConfig::parse("lambda_mni = 3", Profile::Reduced), Err(Error::InvalidConfig(_))));
    assert!(matches!(RunConfig::parse("lambda_min = x", Profile::Reduced), Err(Error::Parse(_))));
    assert!(matches!(RunConfig::parse("no equals sign", Profile::Reduced), Err(Error::Parse(_))));
    assert!(matches!(RunConfig::parse("seed = 1\nseed = 2", Profile::Reduced), Err(Error::Parse(_))));
    assert!(matches!(RunConfig::parse("hopf_tol = 0", Profile::Reduced), Err(Error::InvalidConfig(_))));
    assert!(matches!(RunConfig::parse("gravity = 0,1,0", Profile::Reduced), Err(Error::InvalidConfig(_))));
    assert!(matches!(RunConfig::parse("lambda_min = 5\nlambda_max = 4", Profile::Reduced), Err(Error::InvalidConfig(_))));
}

#[test]
fn config_hash_ignores_output_directory() {
    let a = RunConfig::parse("out = x", Profile::Reduced).unwrap();
    let b = RunConfig::parse("out = y", Profile::Reduced).unwrap();
    let c = RunConfig::parse("seed = 9", Profile::Reduced).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn exit_codes() {
    assert_eq!(exit_code(&Error::InvalidConfig("x".into())), 2);
    assert_eq!(exit_code(&Error::NoConvergence("x".into())), 3);
    assert_eq!(exit_code(&Error::NoCrossing("x".into())), 3);
    assert_eq!(exit_code(&Error::Hypothesis("x".into())), 4);
}

#[test]
fn missing_config_is_a_usage_error() {
    let st = bin().args(["steady", "--config", "/nonexistent/run.cfg"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = bin().args(["steady", "--profile", "bogus"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn steady_command_is_deterministic_and_near_stokes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, COARSE).unwrap();
    let mut csv = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("o{k}"));
        let st = bin().args(["steady", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
        assert_eq!(st.code(), Some(0));
        csv.push(fs::read(out.join("steady.csv")).unwrap());
    }
    assert_eq!(csv[0], csv[1]);
    let text = String::from_utf8(csv[0].clone()).unwrap();
    assert!(text.starts_with("# fallsphere schema=1 kind=steady\n"));
    let tau: f64 = text.lines().nth(2).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    let stokes = 1e-3 / (6.0 * std::f64::consts::PI);
    assert!((tau / stokes - 1.0).abs() < 0.01, "tau {tau}");
}

#[test]
fn json_outputs_are_schema_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(COARSE, Profile::Reduced).unwrap();
    cfg.out = tmp.path().to_path_buf();
    let ctx = Context::new(cfg).unwrap();
    let (states, files) = cmd_steady(&ctx).unwrap();
    assert_eq!(files.len(), 2);
    let back: Vec<fallsphere::steady::SteadyState> = read_json(&tmp.path().join("steady.json"), "steady_states").unwrap();
    assert_eq!(back[0].tau0, states[0].tau0);
    assert!(read_json::<Vec<fallsphere::steady::SteadyState>>(&tmp.path().join("steady.json"), "hopf_branch").is_err());
}

#[test]
fn range_without_crossing_stops_after_spectrum() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse("lambda_min = 1\nlambda_max = 20\nlambda_steps = 4", Profile::Reduced).unwrap();
    cfg.out = tmp.path().to_path_buf();
    let out = cmd_pipeline(&Context::new(cfg).unwrap(), false).unwrap();
    let st: Vec<StageStatus> = out.manifest.stages.iter().map(|s| s.status).collect();
    assert_eq!(st, [StageStatus::Ok, StageStatus::NoCrossing, StageStatus::Skipped, StageStatus::Skipped, StageStatus::Skipped]);
    assert_eq!(out.exit_code, 3);
    RunManifest::load(tmp.path()).unwrap();
}

struct Full {
    _tmp: tempfile::TempDir,
    dir: std::path::PathBuf,
    cfg: RunConfig,
    first: PipelineOutcome,
}

fn full() -> &'static Full {
    static F: OnceLock<Full> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut cfg = RunConfig::profile(Profile::Reduced);
        cfg.out = dir.clone();
        let first = cmd_pipeline(&Context::new(cfg.clone()).unwrap(), false).unwrap();
        Full { _tmp: tmp, dir, cfg, first }
    })
}

fn copy_run(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

#[test]
fn reduced_pipeline_completes_with_checksummed_manifest() {
    let f = full();
    assert_eq!(f.first.exit_code, 0, "{:?}", f.first.lines);
    assert_eq!(f.first.executed, STAGES.map(String::from).to_vec());
    let m = RunManifest::load(&f.dir).unwrap();
    assert_eq!(m.config_hash, f.cfg.hash());
    assert!(m.stages.iter().all(|s| s.status == StageStatus::Ok && !s.files.is_empty()));
    let h: HopfBranch = read_json(&f.dir.join("hopf.json"), "hopf_branch").unwrap();
    assert!(h.parity_mu < 1e-8 && h.parity_zeta < 1e-8);
}

#[test]
fn resume_runs_only_missing_stages() {
    let f = full();
    let tmp = tempfile::tempdir().unwrap();
    copy_run(&f.dir, tmp.path());
    let mut cfg = f.cfg.clone();
    cfg.out = tmp.path().to_path_buf();
    let ctx = Context::new(cfg).unwrap();
    let again = cmd_pipeline(&ctx, true).unwrap();
    assert!(again.executed.is_empty());
    assert!(again.manifest.stages.iter().all(|s| s.status == StageStatus::Cached));
    // drop the last stage from the manifest: only it is recomputed
    let mut m = RunManifest::load(tmp.path()).unwrap();
    m.stages.retain(|s| s.name != "oscillate");
    fs::write(tmp.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
    let third = cmd_pipeline(&ctx, true).unwrap();
    assert_eq!(third.executed, vec!["oscillate".to_string()]);
    assert_eq!(third.exit_code, 0);
    let a: OscillationResult = read_json(&f.dir.join("oscillation.json"), "oscillation").unwrap();
    let b: OscillationResult = read_json(&tmp.path().join("oscillation.json"), "oscillation").unwrap();
    for (x, y) in a.chi0.iter().zip(&b.chi0) {
        assert!((x - y).norm() < 1e-9 * (1.0 + x.norm()));
    }
}

#[test]
fn resume_refuses_a_changed_config_or_tampered_files() {
    let f = full();
    let tmp = tempfile::tempdir().unwrap();
    copy_run(&f.dir, tmp.path());
    let mut cfg = f.cfg.clone();
    cfg.out = tmp.path().to_path_buf();
    cfg.seed += 1;
    assert!(matches!(cmd_pipeline(&Context::new(cfg).unwrap(), true), Err(Error::InvalidConfig(_))));
    fs::write(tmp.path().join("branch.csv"), "tampered").unwrap();
    assert!(RunManifest::load(tmp.path()).is_err());
}
