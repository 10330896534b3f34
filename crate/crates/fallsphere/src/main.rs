use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fallsphere::driver::{self, Context, Profile, RunConfig};

#[derive(Parser)]
#[command(name = "fallsphere", version, about = "Steady and time-periodic free fall of a rigid sphere in a liquid")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Steady states at the configured Galilei numbers.
    Steady(Common),
    /// Steady branch from rest to lambda_max, with L1 diagnostics.
    Branch(Common),
    /// Eigenvalues of the linearization near the imaginary axis.
    Spectrum(Common),
    /// Locate the first complex crossing and report the hypotheses.
    Critical(Common),
    /// Bifurcating time-periodic branch at the critical point.
    Hopf(Common),
    /// Direction of the centre-of-mass oscillation at onset.
    Oscillate(Common),
    /// steady -> spectrum -> critical -> hopf -> oscillate, with a manifest.
    Pipeline(Common),
    /// Normal-form engine check plus the reduced end-to-end pipeline.
    Selftest(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Reduced,
    Reference,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the `out` key).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse stages completed by a previous run with the same configuration.
    #[arg(long)]
    resume: bool,
    /// Seed for randomized probes.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "reduced")]
    profile: ProfileArg,
}

impl Common {
    fn config(&self, selftest: bool) -> fallsphere::Result<RunConfig> {
        let profile = match self.profile {
            ProfileArg::Reduced => Profile::Reduced,
            ProfileArg::Reference => Profile::Reference,
        };
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p, profile)?,
            None => RunConfig::profile(profile),
        };
        if selftest && self.config.is_none() {
            cfg.out = PathBuf::from("selftest-out");
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> fallsphere::Result<i32> {
    let (common, selftest) = match &cli.cmd {
        Cmd::Selftest(c) => (c, true),
        Cmd::Steady(c) | Cmd::Branch(c) | Cmd::Spectrum(c) | Cmd::Critical(c) | Cmd::Hopf(c) | Cmd::Oscillate(c) | Cmd::Pipeline(c) => (c, false),
    };
    let ctx = Context::new(common.config(selftest)?)?;
    let out = ctx.cfg.out.display().to_string();
    match &cli.cmd {
        Cmd::Steady(_) => {
            let (states, _) = driver::cmd_steady(&ctx)?;
            for s in &states {
                println!("lambda {:.6e}: |tau| = {:.10e}, energy gap {:.2e}, residual {:.2e}", s.lambda, s.tau_norm(), s.energy_gap, s.residual_norm);
            }
        }
        Cmd::Branch(_) => {
            let (b, _) = driver::cmd_branch(&ctx)?;
            println!("{} states, max relative energy gap {:.2e}", b.rows.len(), b.max_energy_gap_rel);
            if let Some(s) = &b.stopped {
                println!("stopped: {s}");
            }
        }
        Cmd::Spectrum(_) => {
            let (r, _) = driver::cmd_spectrum(&ctx)?;
            for p in r.pairs.iter().take(10) {
                println!("m = {:2}  nu = {:+.8e} {:+.8e}i  residual {:.1e}", p.m, p.nu.re, p.nu.im, p.residual);
            }
        }
        Cmd::Critical(_) => {
            let (c, _, _) = driver::cmd_critical(&ctx)?;
            println!("lambda_c = {:.10}, zeta0 = {:.8}, m = {}", c.lambda_c, c.zeta0, c.m);
            println!("{}", c.hypothesis_report());
        }
        Cmd::Hopf(_) => {
            let (h, _) = driver::cmd_hopf(&ctx)?;
            print!("{}", h.csv());
            println!("mu2 = {:.8e} ({})", h.mu2, if h.supercritical { "supercritical" } else { "subcritical" });
        }
        Cmd::Oscillate(_) => {
            let (r, _) = driver::cmd_oscillate(&ctx)?;
            println!("{}", r.verdict());
        }
        Cmd::Pipeline(c) => {
            let o = driver::cmd_pipeline(&ctx, c.resume)?;
            for l in &o.lines {
                println!("{l}");
            }
            println!("manifest: {out}/manifest.json");
            return Ok(o.exit_code);
        }
        Cmd::Selftest(_) => {
            let (checks, _) = driver::cmd_selftest(&ctx)?;
            let mut ok = true;
            for c in &checks {
                println!("[{}] {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.pass;
            }
            return Ok(if ok { 0 } else { 3 });
        }
    }
    println!("outputs in {out}");
    Ok(0)
}

fn main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => Ok(ExitCode::from(code as u8)),
        Err(e) => {
            let code = driver::exit_code(&e);
            let err = anyhow::Error::new(e).context("fallsphere failed");
            eprintln!("error: {err:#}");
            Ok(ExitCode::from(code as u8))
        }
    }
}
