//! Run configuration, pipeline stages and output files.
//!
//! A run is described by a flat `key = value` file (`#` starts a comment);
//! unknown keys are rejected. Every JSON output is wrapped in an envelope
//! carrying [`SCHEMA_VERSION`] and a kind tag, every CSV starts with a
//! `# fallsphere schema=… kind=…` line, and the run directory holds a
//! `manifest.json` listing each file with its SHA-256 checksum.
//!
//! Documented keys (defaults come from the profile):
//!
//! | key | meaning |
//! |-----|---------|
//! | `profile` | `reduced` or `reference` |
//! | `l_max`, `m_max`, `n_r`, `r_out`, `k_max`, `backend` | discretization |
//! | `density_ratio` | body density over liquid density |
//! | `gravity` | gravity direction, must be `1,0,0` |
//! | `lambda_min`, `lambda_max`, `lambda_steps` | Galilei-number scan |
//! | `steady_lambdas` | comma list for the `steady` command |
//! | `spectrum_lambda` | Galilei number for the `spectrum` command |
//! | `orders`, `subspace` | azimuthal orders searched, `mirror` or `full` |
//! | `eig_method`, `krylov`, `n_eigs`, `shifts` | eigensolver (`dense`/`shift_invert`; shifts as `re:im` list) |
//! | `n_scan`, `tol_lambda`, `gap_rel`, `transversality_tol`, `strict` | crossing search |
//! | `eps_min`, `eps_max`, `n_eps`, `hopf_tol`, `max_newton`, `dense_limit`, `mu_min`, `mu_max` | periodic branch |
//! | `motion_threshold`, `formula`, `hat_form`, `torque_test` | oscillation direction |
//! | `out`, `seed` | output directory and seed of randomized probes |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discretization::{build_discretization, Backend, Discretization, DiscretizationConfig};
use crate::error::{Error, Result};
use crate::hopf::{hopf_solve_abstract, hopf_solve_fsi, BranchData, HopfBranch, HopfSettings, NormalForm};
use crate::linalg::{c, C64};
use crate::linop::{assemble, find_critical, spectrum_near_axis, CriticalPoint, CriticalSettings, EigenMethod, OpKind, SpectrumResult, SteadyFamily, Subspace};
use crate::motion::{oscillation_direction, Formula, HatForm, MotionSettings, OscillationResult, TorqueTest};
use crate::periodic::coupling_matrices;
use crate::spaces::PhysicalParams;
use crate::steady::{steady_branch, steady_solve, SteadyState};

pub const SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Reduced,
    Reference,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reduced" => Ok(Profile::Reduced),
            "reference" => Ok(Profile::Reference),
            _ => Err(Error::InvalidConfig(format!("unknown profile '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub disc: DiscretizationConfig,
    pub density_ratio: f64,
    pub gravity: [f64; 3],
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_steps: usize,
    pub steady_lambdas: Vec<f64>,
    pub spectrum_lambda: f64,
    pub orders: Vec<i32>,
    pub subspace: Subspace,
    pub critical: CriticalSettings,
    pub hopf: HopfSettings,
    pub mu_range: (f64, f64),
    pub motion: MotionSettings,
    pub out: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            // the first m = 1 pair crossing of the reduced backend lies in [130, 165]
            Profile::Reduced => RunConfig {
                profile,
                disc: DiscretizationConfig::reduced(),
                density_ratio: 1.0,
                gravity: [1.0, 0.0, 0.0],
                lambda_min: 130.0,
                lambda_max: 165.0,
                lambda_steps: 33,
                steady_lambdas: vec![1e-3, 1.0, 10.0],
                spectrum_lambda: 165.0,
                orders: vec![0, 1, 2],
                subspace: Subspace::Mirror,
                critical: CriticalSettings { n_eigs: 4000, n_scan: 5, ..Default::default() },
                hopf: HopfSettings::default(),
                mu_range: (-20.0, 20.0),
                motion: MotionSettings::default(),
                out: PathBuf::from("run-reduced"),
                seed: 1,
            },
            Profile::Reference => RunConfig {
                profile,
                disc: DiscretizationConfig::reference(),
                density_ratio: 1.0,
                gravity: [1.0, 0.0, 0.0],
                lambda_min: 20.0,
                lambda_max: 200.0,
                lambda_steps: 36,
                steady_lambdas: vec![1e-3, 1.0, 10.0],
                spectrum_lambda: 200.0,
                orders: vec![0, 1],
                subspace: Subspace::Mirror,
                critical: CriticalSettings {
                    n_eigs: 12,
                    n_scan: 10,
                    method: EigenMethod::ShiftInvert { krylov: 60 },
                    shifts: vec![c(0.0, 0.0), c(0.0, 1.0), c(0.0, 3.0)],
                    ..Default::default()
                },
                hopf: HopfSettings::default(),
                mu_range: (-20.0, 20.0),
                motion: MotionSettings::default(),
                out: PathBuf::from("run-reference"),
                seed: 1,
            },
        }
    }

    /// Parse `key = value` text on top of the profile named by its
    /// `profile` key (default `fallback`).
    pub fn parse(text: &str, fallback: Profile) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse(format!("line {}: expected key = value", n + 1)))?;
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key '{}'", n + 1, k.trim())));
            }
        }
        let profile = match kv.remove("profile") {
            Some(p) => p.parse()?,
            None => fallback,
        };
        let mut cfg = RunConfig::profile(profile);
        for (k, v) in &kv {
            cfg.set(k, v)?;
        }
        if !kv.contains_key("orders") {
            let m_max = cfg.disc.m_max as i32;
            cfg.orders.retain(|&m| m <= m_max);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, fallback: Profile) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text, fallback)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let bad = |what: &str| Error::Parse(format!("{key}: invalid {what} '{v}'"));
        let f = || v.parse::<f64>().map_err(|_| bad("number"));
        let u = || v.parse::<usize>().map_err(|_| bad("integer"));
        let b = || v.parse::<bool>().map_err(|_| bad("boolean"));
        let fl = || v.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| bad("number list"))).collect::<Result<Vec<_>>>();
        match key {
            "l_max" => self.disc.l_max = u()?,
            "m_max" => self.disc.m_max = u()?,
            "n_r" => self.disc.n_r = u()?,
            "r_out" => self.disc.r_out = f()?,
            "k_max" => self.disc.k_max = u()?,
            "backend" => {
                self.disc.backend = match v {
                    "spectral" => Backend::Spectral,
                    "reduced" => Backend::Reduced,
                    _ => return Err(bad("backend")),
                }
            }
            "density_ratio" => self.density_ratio = f()?,
            "gravity" => {
                let g = fl()?;
                self.gravity = g.try_into().map_err(|_| bad("3-vector"))?;
            }
            "lambda_min" => self.lambda_min = f()?,
            "lambda_max" => self.lambda_max = f()?,
            "lambda_steps" => self.lambda_steps = u()?,
            "steady_lambdas" => self.steady_lambdas = fl()?,
            "spectrum_lambda" => self.spectrum_lambda = f()?,
            "orders" => self.orders = v.split(',').map(|x| x.trim().parse::<i32>().map_err(|_| bad("order list"))).collect::<Result<_>>()?,
            "subspace" => {
                self.subspace = match v {
                    "mirror" => Subspace::Mirror,
                    "full" => Subspace::Full,
                    _ => return Err(bad("subspace")),
                }
            }
            "eig_method" => {
                self.critical.method = match v {
                    "dense" => EigenMethod::Dense,
                    "shift_invert" => EigenMethod::ShiftInvert { krylov: 60 },
                    _ => return Err(bad("eigen method")),
                }
            }
            "krylov" => {
                let k = u()?;
                match &mut self.critical.method {
                    EigenMethod::ShiftInvert { krylov } => *krylov = k,
                    EigenMethod::Dense => self.critical.method = EigenMethod::ShiftInvert { krylov: k },
                }
            }
            "n_eigs" => self.critical.n_eigs = u()?,
            "shifts" => {
                self.critical.shifts = v
                    .split(',')
                    .map(|x| {
                        let (re, im) = x.trim().split_once(':').unwrap_or((x.trim(), "0"));
                        Ok(c(re.trim().parse().map_err(|_| bad("shift"))?, im.trim().parse().map_err(|_| bad("shift"))?))
                    })
                    .collect::<Result<_>>()?
            }
            "n_scan" => self.critical.n_scan = u()?,
            "tol_lambda" => self.critical.tol_lambda = f()?,
            "gap_rel" => self.critical.gap_rel = f()?,
            "transversality_tol" => self.critical.transversality_tol = f()?,
            "strict" => self.critical.strict = b()?,
            "eps_min" => self.hopf.eps_min = f()?,
            "eps_max" => self.hopf.eps_max = f()?,
            "n_eps" => self.hopf.n_eps = u()?,
            "hopf_tol" => self.hopf.tol = f()?,
            "max_newton" => self.hopf.max_newton = u()?,
            "dense_limit" => self.hopf.dense_limit = u()?,
            "mu_min" => self.mu_range.0 = f()?,
            "mu_max" => self.mu_range.1 = f()?,
            "motion_threshold" => self.motion.threshold = f()?,
            "formula" => {
                self.motion.formula = match v {
                    "auto" => Formula::Auto,
                    "printed" => Formula::Printed,
                    "schur" => Formula::Schur,
                    _ => return Err(bad("formula")),
                }
            }
            "hat_form" => {
                self.motion.hat_form = match v {
                    "adjoint" => HatForm::Adjoint,
                    "traction" => HatForm::Traction,
                    _ => return Err(bad("hat form")),
                }
            }
            "torque_test" => {
                self.motion.torque_test = match v {
                    "rotational" => TorqueTest::Rotational,
                    "translational" => TorqueTest::Translational,
                    _ => return Err(bad("torque test")),
                }
            }
            "out" => self.out = PathBuf::from(v),
            "seed" => self.seed = v.parse().map_err(|_| bad("seed"))?,
            _ => return Err(Error::InvalidConfig(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.disc.validate()?;
        if self.gravity != [1.0, 0.0, 0.0] {
            return bad("gravity must point along e1 (gravity = 1,0,0)".into());
        }
        if !(self.density_ratio > 0.0) {
            return bad("density_ratio must be positive".into());
        }
        if !(self.lambda_min >= 0.0 && self.lambda_min < self.lambda_max) || self.lambda_steps == 0 {
            return bad("need 0 <= lambda_min < lambda_max and lambda_steps > 0".into());
        }
        if self.steady_lambdas.iter().any(|l| !(*l >= 0.0)) || !(self.spectrum_lambda >= 0.0) {
            return bad("Galilei numbers must be non-negative".into());
        }
        if self.orders.is_empty() || self.orders.iter().any(|&m| m < 0 || m as usize > self.disc.m_max) {
            return bad(format!("orders must lie in 0..={}", self.disc.m_max));
        }
        let cs = &self.critical;
        if cs.n_eigs == 0 || cs.n_scan < 2 || cs.shifts.is_empty() {
            return bad("need n_eigs > 0, n_scan >= 2 and at least one shift".into());
        }
        for (name, t) in [
            ("tol_lambda", cs.tol_lambda),
            ("gap_rel", cs.gap_rel),
            ("transversality_tol", cs.transversality_tol),
            ("hopf_tol", self.hopf.tol),
            ("eps_min", self.hopf.eps_min),
            ("motion_threshold", self.motion.threshold),
        ] {
            if !(t > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.hopf.eps_max >= self.hopf.eps_min) || self.hopf.n_eps == 0 || self.hopf.max_newton == 0 {
            return bad("need eps_max >= eps_min, n_eps > 0 and max_newton > 0".into());
        }
        if !(self.mu_range.0 < 0.0 && self.mu_range.1 > 0.0) {
            return bad("need mu_min < 0 < mu_max".into());
        }
        Ok(())
    }

    /// Canonical text form (the hashed identity of a run; `out` excluded).
    pub fn canonical(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().unwrap().remove("out");
        serde_json::to_string(&v).unwrap()
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn params(&self) -> Result<PhysicalParams> {
        PhysicalParams::new(0.0, self.density_ratio)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

// ---------------------------------------------------------------------------
// Files

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema_version: u32,
    kind: String,
    data: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<FileEntry> {
    let path = dir.join(name);
    fs::write(&path, content)?;
    Ok(FileEntry { path: name.to_string(), sha256: hex(&Sha256::digest(content.as_bytes())), bytes: content.len() as u64 })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, kind: &str, data: &T) -> Result<FileEntry> {
    let env = Envelope { schema_version: SCHEMA_VERSION, kind: kind.to_string(), data };
    let text = serde_json::to_string_pretty(&env).map_err(|e| Error::Parse(e.to_string()))?;
    write_file(dir, name, &text)
}

fn write_csv(dir: &Path, name: &str, kind: &str, body: &str) -> Result<FileEntry> {
    write_file(dir, name, &format!("# fallsphere schema={SCHEMA_VERSION} kind={kind}\n{body}"))
}

/// Read a JSON output, checking its schema version and kind.
pub fn read_json<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let env: Envelope<T> = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if env.schema_version != SCHEMA_VERSION || env.kind != kind {
        return Err(Error::Parse(format!("{}: expected {kind} schema {SCHEMA_VERSION}, found {} schema {}", path.display(), env.kind, env.schema_version)));
    }
    Ok(env.data)
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Cached,
    NoCrossing,
    HypothesisViolated,
    Failed,
    Skipped,
}

impl StageStatus {
    pub fn done(self) -> bool {
        matches!(self, StageStatus::Ok | StageStatus::Cached)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub message: Option<String>,
    pub wall_seconds: f64,
    pub files: Vec<FileEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub artifact_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig) -> Self {
        RunManifest { schema_version: SCHEMA_VERSION, artifact_version: ARTIFACT_VERSION.to_string(), config_hash: cfg.hash(), seed: cfg.seed, stages: Vec::new() }
    }

    /// Load and validate: schema version, and every listed file present
    /// with a matching checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse(format!("manifest schema {} (expected {SCHEMA_VERSION})", m.schema_version)));
        }
        for st in &m.stages {
            for f in &st.files {
                verify(dir, f)?;
            }
        }
        Ok(m)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    fn record(&mut self, rec: StageRecord) {
        match self.stages.iter_mut().find(|s| s.name == rec.name) {
            Some(s) => *s = rec,
            None => self.stages.push(rec),
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn verify(dir: &Path, f: &FileEntry) -> Result<()> {
    let bytes = fs::read(dir.join(&f.path)).map_err(|e| Error::Parse(format!("{}: {e}", f.path)))?;
    if hex(&Sha256::digest(&bytes)) != f.sha256 {
        return Err(Error::Parse(format!("{}: checksum mismatch", f.path)));
    }
    Ok(())
}

/// Exit status for an error: 2 usage, 3 numerical failure, 4 hypothesis violation.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::Parse(_) => 2,
        Error::Hypothesis(_) => 4,
        _ => 3,
    }
}

fn status_of(e: &Error) -> StageStatus {
    match e {
        Error::NoCrossing(_) => StageStatus::NoCrossing,
        Error::Hypothesis(_) => StageStatus::HypothesisViolated,
        _ => StageStatus::Failed,
    }
}

// ---------------------------------------------------------------------------
// Stage bodies

pub struct Context {
    pub cfg: RunConfig,
    pub d: Discretization,
    pub p: PhysicalParams,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let d = build_discretization(&cfg.disc)?;
        let p = cfg.params()?;
        Ok(Context { cfg, d, p })
    }

    fn dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.cfg.out)?;
        Ok(&self.cfg.out)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteadyRow {
    pub lambda: f64,
    pub tau: f64,
    pub energy_gap: f64,
    pub residual: f64,
}

impl SteadyRow {
    fn of(s: &SteadyState) -> Self {
        SteadyRow { lambda: s.lambda, tau: s.tau_norm(), energy_gap: s.energy_gap, residual: s.residual_norm }
    }
}

fn steady_csv(rows: &[SteadyRow]) -> String {
    let mut s = String::from("lambda,tau,energy_gap,residual\n");
    for r in rows {
        let _ = writeln!(s, "{:.12e},{:.12e},{:.3e},{:.3e}", r.lambda, r.tau, r.energy_gap, r.residual);
    }
    s
}

/// Steady states at `steady_lambdas` (each continued from the previous).
pub fn cmd_steady(ctx: &Context) -> Result<(Vec<SteadyState>, Vec<FileEntry>)> {
    let mut states: Vec<SteadyState> = Vec::new();
    let mut lams = ctx.cfg.steady_lambdas.clone();
    lams.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &l in &lams {
        let s = match steady_solve(l, &ctx.p, &ctx.d, states.last()) {
            Ok(s) => s,
            Err(_) => {
                let from = states.last().map(|s| s.lambda).unwrap_or(0.0);
                let br = steady_branch(from, l, ((l - from) / 5.0).ceil().max(1.0) as usize, &ctx.p, &ctx.d, 0.0)?;
                br.points.last().unwrap().state.clone()
            }
        };
        states.push(s);
    }
    let rows: Vec<SteadyRow> = states.iter().map(SteadyRow::of).collect();
    let dir = ctx.dir()?;
    let files = vec![write_json(dir, "steady.json", "steady_states", &states)?, write_csv(dir, "steady.csv", "steady", &steady_csv(&rows))?];
    Ok((states, files))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BranchSummary {
    pub rows: Vec<SteadyRow>,
    pub sigma_min: Vec<[f64; 2]>,
    pub max_energy_gap_rel: f64,
    pub stopped: Option<String>,
}

/// Steady branch from rest to `lambda_max`.
pub fn cmd_branch(ctx: &Context) -> Result<(BranchSummary, Vec<FileEntry>)> {
    let c = &ctx.cfg;
    let steps = (c.lambda_steps as f64 * c.lambda_max / (c.lambda_max - c.lambda_min)).ceil() as usize;
    let br = steady_branch(0.0, c.lambda_max, steps.max(1), &ctx.p, &ctx.d, 1e-12)?;
    let rows: Vec<SteadyRow> = br.points.iter().map(|b| SteadyRow::of(&b.state)).collect();
    let summary = BranchSummary {
        max_energy_gap_rel: rows.iter().map(|r| r.energy_gap / (1.0 + r.lambda * r.lambda)).fold(0.0, f64::max),
        sigma_min: br.points.iter().map(|b| b.sigma_min).collect(),
        rows,
        stopped: br.stopped,
    };
    let mut body = String::from("lambda,tau,energy_gap,residual,sigma_min_0,sigma_min_1\n");
    for (r, s) in summary.rows.iter().zip(&summary.sigma_min) {
        let _ = writeln!(body, "{:.12e},{:.12e},{:.3e},{:.3e},{:.6e},{:.6e}", r.lambda, r.tau, r.energy_gap, r.residual, s[0], s[1]);
    }
    let dir = ctx.dir()?;
    let files = vec![write_json(dir, "branch.json", "steady_branch", &summary)?, write_csv(dir, "branch.csv", "steady_branch", &body)?];
    Ok((summary, files))
}

fn spectrum_at(ctx: &Context, lambda: f64) -> Result<SpectrumResult> {
    let s = SteadyFamily::new(ctx.p.clone(), &ctx.d, ctx.cfg.orders.clone(), ctx.cfg.subspace).state(lambda)?;
    let op = assemble(OpKind::L2, &s, &ctx.p, &ctx.d)?;
    let cs = &ctx.cfg.critical;
    let mut all = spectrum_near_axis(&op, &ctx.d, &ctx.cfg.orders, cs.shifts[0], cs.n_eigs, cs.method, ctx.cfg.subspace)?;
    for sh in &cs.shifts[1..] {
        let more = spectrum_near_axis(&op, &ctx.d, &ctx.cfg.orders, *sh, cs.n_eigs, cs.method, ctx.cfg.subspace)?;
        for p in more.pairs {
            if !all.pairs.iter().any(|q| q.m == p.m && (q.nu - p.nu).norm() <= 1e-9 * (1.0 + p.nu.norm())) {
                all.pairs.push(p);
            }
        }
    }
    all.pairs.sort_by(|a, b| a.nu.re.partial_cmp(&b.nu.re).unwrap());
    Ok(all)
}

fn min_re(s: &SpectrumResult) -> Option<(i32, C64)> {
    s.pairs.first().map(|p| (p.m, p.nu))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub lambdas: Vec<f64>,
    /// Leftmost eigenvalue (smallest `Re ν`) at each Galilei number.
    pub leftmost: Vec<Option<(i32, C64)>>,
    /// Whether the leftmost real part changes sign over the range.
    pub crossing_bracketed: bool,
}

fn spectrum_csv(results: &[SpectrumResult]) -> String {
    let mut body = String::from("lambda,m,re_nu,im_nu,residual\n");
    for r in results {
        for p in &r.pairs {
            let _ = writeln!(body, "{:.12e},{},{:.12e},{:.12e},{:.3e}", r.lambda, p.m, p.nu.re, p.nu.im, p.residual);
        }
    }
    body
}

/// Eigenvalues near the axis at `spectrum_lambda`.
pub fn cmd_spectrum(ctx: &Context) -> Result<(SpectrumResult, Vec<FileEntry>)> {
    let r = spectrum_at(ctx, ctx.cfg.spectrum_lambda)?;
    let dir = ctx.dir()?;
    let files = vec![write_json(dir, "spectrum.json", "spectrum", &r)?, write_csv(dir, "spectrum.csv", "spectrum", &spectrum_csv(std::slice::from_ref(&r)))?];
    Ok((r, files))
}

/// Spectra at both ends of the scan; fails with `NoCrossing` when the
/// leftmost real part keeps its sign.
fn stage_spectrum(ctx: &Context) -> Result<(SpectrumSummary, Vec<FileEntry>)> {
    let ends = [spectrum_at(ctx, ctx.cfg.lambda_min)?, spectrum_at(ctx, ctx.cfg.lambda_max)?];
    let leftmost: Vec<_> = ends.iter().map(min_re).collect();
    let bracketed = matches!((leftmost[0], leftmost[1]), (Some((_, a)), Some((_, b))) if a.re > 0.0 && b.re <= 0.0);
    let summary = SpectrumSummary { lambdas: vec![ctx.cfg.lambda_min, ctx.cfg.lambda_max], leftmost, crossing_bracketed: bracketed };
    let dir = ctx.dir()?;
    let files = vec![write_json(dir, "spectrum.json", "spectrum_scan", &summary)?, write_csv(dir, "spectrum.csv", "spectrum", &spectrum_csv(&ends))?];
    if !bracketed {
        return Err(Error::NoCrossing(format!(
            "leftmost Re nu does not change sign on [{}, {}]",
            ctx.cfg.lambda_min, ctx.cfg.lambda_max
        )));
    }
    Ok((summary, files))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriticalOutput {
    pub crit: CriticalPoint,
    pub report: String,
}

/// Crossing search on `[lambda_min, lambda_max]`; writes the critical point
/// and the steady state there.
pub fn cmd_critical(ctx: &Context) -> Result<(CriticalPoint, SteadyState, Vec<FileEntry>)> {
    let fam = SteadyFamily::new(ctx.p.clone(), &ctx.d, ctx.cfg.orders.clone(), ctx.cfg.subspace);
    let crit = find_critical(&fam, ctx.cfg.lambda_min, ctx.cfg.lambda_max, &ctx.cfg.critical)?;
    let state = fam.state(crit.lambda_c)?;
    let dir = ctx.dir()?;
    let out = CriticalOutput { report: crit.hypothesis_report(), crit: crit.clone() };
    let files = vec![write_json(dir, "critical.json", "critical_point", &out)?, write_json(dir, "critical_state.json", "steady_state", &state)?];
    if !crit.hypotheses_hold() {
        return Err(Error::Hypothesis(crit.hypothesis_report()));
    }
    Ok((crit, state, files))
}

/// Critical point and state from a previous `critical` run in the output
/// directory, or a fresh search.
fn critical_input(ctx: &Context) -> Result<(CriticalPoint, SteadyState)> {
    let dir = &ctx.cfg.out;
    if let (Ok(c), Ok(s)) = (read_json::<CriticalOutput>(&dir.join("critical.json"), "critical_point"), read_json::<SteadyState>(&dir.join("critical_state.json"), "steady_state")) {
        if s.v0.check(&ctx.d).is_ok() {
            // re-polish: restores the pressure, which is not stored
            let s = steady_solve(s.lambda, &ctx.p, &ctx.d, Some(&s))?;
            return Ok((c.crit, s));
        }
    }
    let (c, s, _) = cmd_critical(ctx)?;
    Ok((c, s))
}

pub fn hopf_from(ctx: &Context, crit: &CriticalPoint, state: &SteadyState) -> Result<(HopfBranch, Vec<FileEntry>)> {
    let branch = BranchData::new(state.clone(), ctx.p.clone(), &ctx.d, ctx.cfg.mu_range)?;
    let hb = hopf_solve_fsi(crit, &branch, &ctx.cfg.hopf, &ctx.d)?;
    let dir = ctx.dir()?;
    let files = vec![write_json(dir, "hopf.json", "hopf_branch", &hb)?, write_csv(dir, "hopf.csv", "hopf_branch", &hb.csv())?];
    Ok((hb, files))
}

pub fn cmd_hopf(ctx: &Context) -> Result<(HopfBranch, Vec<FileEntry>)> {
    let (crit, state) = critical_input(ctx)?;
    hopf_from(ctx, &crit, &state)
}

pub fn oscillate_from(ctx: &Context, crit: &CriticalPoint, state: &SteadyState) -> Result<(OscillationResult, Vec<FileEntry>)> {
    if !crit.hypotheses_hold() {
        return Err(Error::Hypothesis(crit.hypothesis_report()));
    }
    let r = oscillation_direction(crit, state, &ctx.d, &ctx.p, &ctx.cfg.motion)?;
    let dir = ctx.dir()?;
    let files = vec![write_json(dir, "oscillation.json", "oscillation", &r)?];
    Ok((r, files))
}

pub fn cmd_oscillate(ctx: &Context) -> Result<(OscillationResult, Vec<FileEntry>)> {
    let (crit, state) = critical_input(ctx)?;
    oscillate_from(ctx, &crit, &state)
}

// ---------------------------------------------------------------------------
// Pipeline

pub const STAGES: [&str; 5] = ["steady", "spectrum", "critical", "hopf", "oscillate"];

#[derive(Debug)]
pub struct PipelineOutcome {
    pub manifest: RunManifest,
    /// Stages executed in this invocation (cached ones excluded).
    pub executed: Vec<String>,
    pub exit_code: i32,
    pub lines: Vec<String>,
}

/// steady → spectrum → critical → hopf → oscillate. With `resume`, stages
/// recorded as done in an existing manifest for the same configuration are
/// taken from disk. After a failed stage the rest are marked skipped.
pub fn cmd_pipeline(ctx: &Context, resume: bool) -> Result<PipelineOutcome> {
    let dir = ctx.dir()?.to_path_buf();
    let mut man = RunManifest::new(&ctx.cfg);
    if resume && dir.join("manifest.json").exists() {
        let old = RunManifest::load(&dir)?;
        if old.config_hash != man.config_hash {
            return Err(Error::InvalidConfig("configuration differs from the cached run; rerun without --resume".into()));
        }
        man.stages = old.stages.into_iter().filter(|s| s.status.done()).collect();
    }
    let mut executed = Vec::new();
    let mut lines = Vec::new();
    let mut failure: Option<(String, i32)> = None;
    let mut crit_data: Option<(CriticalPoint, SteadyState)> = None;
    for name in STAGES {
        if let Some((prev, _)) = &failure {
            man.record(StageRecord { name: name.into(), status: StageStatus::Skipped, message: Some(format!("after failed stage {prev}")), wall_seconds: 0.0, files: vec![] });
            lines.push(format!("{name}: skipped"));
            continue;
        }
        if let Some(rec) = man.stage(name).filter(|r| r.status.done()).cloned() {
            if name == "critical" {
                let c: CriticalOutput = read_json(&dir.join("critical.json"), "critical_point")?;
                let s: SteadyState = read_json(&dir.join("critical_state.json"), "steady_state")?;
                let s = steady_solve(s.lambda, &ctx.p, &ctx.d, Some(&s))?;
                crit_data = Some((c.crit, s));
            }
            man.record(StageRecord { status: StageStatus::Cached, ..rec });
            lines.push(format!("{name}: cached"));
            continue;
        }
        let t = Instant::now();
        executed.push(name.to_string());
        let res: Result<(Vec<FileEntry>, String)> = match name {
            "steady" => cmd_branch(ctx).map(|(s, f)| (f, format!("{} states, max relative energy gap {:.2e}", s.rows.len(), s.max_energy_gap_rel))),
            "spectrum" => stage_spectrum(ctx).map(|(s, f)| {
                let ends: Vec<String> = s
                    .lambdas
                    .iter()
                    .zip(&s.leftmost)
                    .map(|(l, e)| match e {
                        Some((m, nu)) => format!("lambda {l}: m = {m}, nu = {:.6e}{:+.6e}i", nu.re, nu.im),
                        None => format!("lambda {l}: none"),
                    })
                    .collect();
                (f, format!("leftmost eigenvalue {}", ends.join(", ")))
            }),
            "critical" => cmd_critical(ctx).map(|(c, s, f)| {
                let msg = format!("lambda_c = {:.8}, zeta0 = {:.6}, m = {}, {}", c.lambda_c, c.zeta0, c.m, c.hypothesis_report());
                crit_data = Some((c, s));
                (f, msg)
            }),
            "hopf" => {
                let (c, s) = crit_data.as_ref().expect("critical stage precedes");
                hopf_from(ctx, c, s).map(|(h, f)| {
                    (f, format!("mu2 = {:.6e} ({}), parity {:.1e}/{:.1e}, max residual {:.1e}", h.mu2, if h.supercritical { "supercritical" } else { "subcritical" }, h.parity_mu, h.parity_zeta, h.max_residual()))
                })
            }
            "oscillate" => {
                let (c, s) = crit_data.as_ref().expect("critical stage precedes");
                oscillate_from(ctx, c, s).map(|(r, f)| (f, r.verdict()))
            }
            _ => unreachable!(),
        };
        let wall = t.elapsed().as_secs_f64();
        match res {
            Ok((files, msg)) => {
                lines.push(format!("{name}: ok ({wall:.1} s) {msg}"));
                man.record(StageRecord { name: name.into(), status: StageStatus::Ok, message: Some(msg), wall_seconds: wall, files });
            }
            Err(e) => {
                let st = status_of(&e);
                lines.push(format!("{name}: {st:?} ({wall:.1} s) {e}"));
                // outputs written before the failure stay listed for inspection
                let files = partial_files(&dir, name);
                man.record(StageRecord { name: name.into(), status: st, message: Some(e.to_string()), wall_seconds: wall, files });
                failure = Some((name.to_string(), exit_code(&e)));
            }
        }
        man.save(&dir)?;
    }
    man.save(&dir)?;
    Ok(PipelineOutcome { manifest: man, executed, exit_code: failure.map(|f| f.1).unwrap_or(0), lines })
}

fn partial_files(dir: &Path, stage: &str) -> Vec<FileEntry> {
    let names: &[&str] = match stage {
        "spectrum" => &["spectrum.json", "spectrum.csv"],
        "critical" => &["critical.json", "critical_state.json"],
        _ => &[],
    };
    names
        .iter()
        .filter_map(|n| {
            let bytes = fs::read(dir.join(n)).ok()?;
            Some(FileEntry { path: n.to_string(), sha256: hex(&Sha256::digest(&bytes)), bytes: bytes.len() as u64 })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Self-test

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Normal form `ż = (μ + i)z − (1 + ia)|z|²z`: `μ = ε²`, `ζ = 1 − aε²`.
pub fn normal_form_check(a: f64) -> Result<Check> {
    let t = Instant::now();
    let b = hopf_solve_abstract(&NormalForm { a, k_max: 3 }, &HopfSettings::default())?;
    let wall = t.elapsed().as_secs_f64();
    let err = b.points.iter().map(|p| (p.mu - p.eps * p.eps).abs().max((p.zeta - (1.0 - a * p.eps * p.eps)).abs())).fold(0.0, f64::max);
    Ok(Check {
        name: format!("normal form (a = {a})"),
        pass: err < 1e-6 && b.parity_mu < 1e-8 && b.parity_zeta < 1e-8 && wall < 5.0,
        detail: format!("max error {err:.2e}, parity {:.1e}/{:.1e}, {wall:.2} s", b.parity_mu, b.parity_zeta),
    })
}

/// Volume–surface identity at rest for seeded random rigid data, `k = 1..4`.
pub fn identity_probe_check(ctx: &Context, n: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let mut worst: f64 = 0.0;
    for k in 1..=4 {
        let r = coupling_matrices(k, 0.0, &ctx.p, &ctx.d)?;
        for _ in 0..n {
            let z: [C64; 6] = std::array::from_fn(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            worst = worst.max(r.identity_residual(&z, &ctx.d)?);
        }
    }
    Ok(Check { name: "volume-surface identity".into(), pass: worst < 1e-8, detail: format!("max relative residual {worst:.2e}") })
}

/// Normal-form engine check, seeded identity probes and the full reduced
/// pipeline (in `ctx.cfg.out`).
pub fn cmd_selftest(ctx: &Context) -> Result<(Vec<Check>, PipelineOutcome)> {
    let t = Instant::now();
    let mut checks = vec![normal_form_check(2.0)?, identity_probe_check(ctx, 10)?];
    let out = cmd_pipeline(ctx, false)?;
    let dir = &ctx.cfg.out;
    let stage_ok = |n: &str| out.manifest.stage(n).map(|s| s.status.done()).unwrap_or(false);
    checks.push(Check { name: "pipeline".into(), pass: out.exit_code == 0, detail: out.lines.join("; ") });
    if stage_ok("critical") {
        let c: CriticalOutput = read_json(&dir.join("critical.json"), "critical_point")?;
        checks.push(Check { name: "critical hypotheses".into(), pass: c.crit.hypotheses_hold(), detail: c.report });
    }
    if stage_ok("hopf") {
        let h: HopfBranch = read_json(&dir.join("hopf.json"), "hopf_branch")?;
        checks.push(Check {
            name: "branch parity".into(),
            pass: h.parity_mu < 1e-8 && h.parity_zeta < 1e-8,
            detail: format!("{:.1e}/{:.1e}", h.parity_mu, h.parity_zeta),
        });
    }
    if stage_ok("oscillate") {
        let r: OscillationResult = read_json(&dir.join("oscillation.json"), "oscillation")?;
        checks.push(Check { name: "reconstruction identity".into(), pass: r.consistency_gap < 1e-8, detail: format!("gap {:.2e}", r.consistency_gap) });
    }
    let wall = t.elapsed().as_secs_f64();
    checks.push(Check { name: "runtime".into(), pass: wall < 600.0, detail: format!("{wall:.1} s") });
    Ok((checks, out))
}
