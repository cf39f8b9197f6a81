//! `halo-nmpc`: orbit generation, closed-loop simulation, Monte Carlo and
//! iteration-cap sweeps. Every command writes a bundle directory holding its
//! data files and the fully resolved `config.json`; running the command again
//! with `--config <bundle>/config.json` reproduces the bundle byte for byte.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use halo_nmpc::orbits::{periodize, shoot_halo, sweep_family, Resampling};
use halo_nmpc::sim::{monte_carlo, simulate, tdo_sweep};
use halo_nmpc::{PeriodicOrbit, ReferenceOrbit, SimConfig};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfigFile;

const TDO_CSV_VERSION: &str = "# halo-nmpc tdo-sweep v1";

#[derive(Parser, Debug)]
#[command(
    name = "halo-nmpc",
    version,
    about = "Halo orbit station-keeping with suboptimal NMPC"
)]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output bundle directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides sim.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Progress on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Single-shooting halo orbit and its periodized reference.
    Orbit(OrbitArgs),
    /// One closed-loop run.
    Simulate(SimArgs),
    /// Closed-loop runs from a hypercube of initial offsets.
    Montecarlo(McArgs),
    /// Closed-loop cost against the SQP iteration cap.
    SweepTdo(SweepArgs),
    /// Prints the default configuration.
    DefaultConfig,
}

#[derive(Args, Debug)]
struct OrbitArgs {
    /// Initial x, LU.
    #[arg(long)]
    x0: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// Crossing residual tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Reference CSV path (sidecar JSON written alongside); defaults to
    /// `<out-dir>/reference.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Family mode: number of members starting at `--x0`.
    #[arg(long)]
    family: Option<usize>,
    /// Family spacing in x0, LU.
    #[arg(long, default_value_t = 1e-4, allow_hyphen_values = true)]
    family_step: f64,
    #[arg(long, value_parser = parse_resampling)]
    resampling: Option<Resampling>,
}

#[derive(Args, Debug, Clone)]
struct RunOverrides {
    /// Plant eccentricity.
    #[arg(long)]
    e: Option<f64>,
    /// SQP iterations per instant.
    #[arg(long)]
    ell: Option<usize>,
    #[arg(long)]
    revolutions: Option<f64>,
    /// Record controller wall time (breaks bitwise reproducibility).
    #[arg(long)]
    timing: bool,
    #[arg(long, value_parser = parse_resampling)]
    resampling: Option<Resampling>,
}

#[derive(Args, Debug)]
struct SimArgs {
    #[command(flatten)]
    run: RunOverrides,
}

#[derive(Args, Debug)]
struct McArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Number of hypercube samples.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Comma-separated iteration caps.
    #[arg(long = "ell-list", value_delimiter = ',')]
    ell_list: Option<Vec<usize>>,
}

fn parse_resampling(s: &str) -> Result<Resampling, String> {
    serde_json::from_value(json!(s)).map_err(|_| {
        format!("unknown resampling '{s}' (commensurate, shortened_final_step, uniform)")
    })
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        let (kind, message) = match self {
            CliError::Validation(m) => ("validation", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        json!({ "error": { "kind": kind, "message": message } })
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Validation(e.to_string().trim_end().to_owned());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfigFile::load(path).map_err(CliError::Validation)?,
        None => RunConfigFile::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output.out_dir = Some(dir.display().to_string());
    }
    let out_dir = PathBuf::from(cfg.output.out_dir.clone().unwrap_or_else(|| "out".into()));
    let ctx = Ctx {
        out_dir,
        verbose: cli.verbose,
    };
    match cli.command {
        Command::Orbit(args) => cmd_orbit(cfg, args, &ctx),
        Command::Simulate(args) => {
            apply_overrides(&mut cfg, &args.run);
            cmd_simulate(cfg, &ctx)
        }
        Command::Montecarlo(args) => {
            apply_overrides(&mut cfg, &args.run);
            if let Some(n) = args.samples {
                cfg.hypercube.samples = n;
            }
            cmd_montecarlo(cfg, &ctx)
        }
        Command::SweepTdo(args) => {
            apply_overrides(&mut cfg, &args.run);
            if let Some(list) = args.ell_list {
                cfg.sweep.ell_values = list;
            }
            cmd_sweep(cfg, &ctx)
        }
        Command::DefaultConfig => {
            print!("{}", RunConfigFile::default().echo());
            Ok(())
        }
    }
}

struct Ctx {
    out_dir: PathBuf,
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[halo-nmpc] {}", msg.as_ref());
        }
    }

    fn prepare(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out_dir)
            .map_err(|e| runtime(format!("{}: {e}", self.out_dir.display())))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn apply_overrides(cfg: &mut RunConfigFile, o: &RunOverrides) {
    if let Some(e) = o.e {
        cfg.sim.plant_e = e;
    }
    if let Some(ell) = o.ell {
        cfg.controller.ell = ell;
    }
    if let Some(r) = o.revolutions {
        cfg.sim.revolutions = r;
        cfg.montecarlo.revolutions = r;
        cfg.sweep.revolutions = r;
    }
    if o.timing {
        cfg.sim.timing = true;
    }
    if let Some(r) = o.resampling {
        cfg.orbit.resampling = r;
    }
}

fn validated(cfg: &RunConfigFile) -> Result<(), CliError> {
    cfg.validate().map_err(CliError::Validation)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(runtime)?;
    s.push('\n');
    write_text(path, &s)
}

fn build_reference(
    cfg: &RunConfigFile,
    ctx: &Ctx,
) -> Result<(PeriodicOrbit, ReferenceOrbit), CliError> {
    let o = &cfg.orbit;
    let orbit = shoot_halo(
        o.x0_lu,
        o.z0_guess_lu,
        o.ydot0_guess_lu_tu,
        cfg.model.mu,
        &cfg.shooting(),
    )
    .map_err(|e| runtime(format!("shooting from x0 = {}: {e}", o.x0_lu)))?;
    let reference = periodize(
        &orbit,
        cfg.ocp.dtheta_rad,
        o.resample_max_step_rad,
        o.resampling,
    )
    .map_err(runtime)?;
    ctx.log(format!(
        "orbit z0 = {:.6} ydot0 = {:.6} T = {:.6}; reference {} steps of {:.7}",
        orbit.z0(),
        orbit.ydot0(),
        orbit.period,
        reference.period_steps,
        reference.dtheta
    ));
    Ok((orbit, reference))
}

fn write_reference(
    orbit: &PeriodicOrbit,
    reference: &ReferenceOrbit,
    csv_path: &Path,
) -> Result<(), CliError> {
    let mut sidecar = reference.sidecar();
    sidecar.period = Some(orbit.period);
    sidecar.initial_state = Some(orbit.initial_state.into());
    sidecar.crossing_residual = Some(orbit.crossing_residual);
    reference.write_files(csv_path, &sidecar).map_err(runtime)?;
    Ok(())
}

fn sim_config(cfg: &RunConfigFile, reference: &ReferenceOrbit, revolutions: f64) -> SimConfig {
    SimConfig {
        revolutions,
        ..cfg.sim()
    }
    .on_grid_of(reference)
}

fn cmd_orbit(mut cfg: RunConfigFile, args: OrbitArgs, ctx: &Ctx) -> Result<(), CliError> {
    if let Some(x0) = args.x0 {
        cfg.orbit.x0_lu = x0;
    }
    if let Some(mu) = args.mu {
        cfg.model.mu = mu;
    }
    if let Some(tol) = args.tol {
        cfg.orbit.shooting_tol = tol;
    }
    if let Some(r) = args.resampling {
        cfg.orbit.resampling = r;
    }
    validated(&cfg)?;

    let Some(count) = args.family else {
        let csv_path = args
            .out
            .clone()
            .unwrap_or_else(|| ctx.path("reference.csv"));
        if let Some(parent) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(runtime)?;
        }
        let (orbit, reference) = build_reference(&cfg, ctx)?;
        write_reference(&orbit, &reference, &csv_path)?;
        return write_text(&csv_path.with_extension("config.json"), &cfg.echo());
    };

    if !(args.family_step.is_finite() && args.family_step != 0.0) {
        return Err(CliError::Validation(
            "--family-step must be finite and nonzero".into(),
        ));
    }
    ctx.prepare()?;
    let x0s: Vec<f64> = (0..count)
        .map(|i| cfg.orbit.x0_lu + i as f64 * args.family_step)
        .collect();
    let o = &cfg.orbit;
    let members = sweep_family(
        &x0s,
        o.z0_guess_lu,
        o.ydot0_guess_lu_tu,
        cfg.model.mu,
        &cfg.shooting(),
    );
    let mut index = Vec::with_capacity(members.len());
    let mut failures = 0;
    for (i, m) in members.iter().enumerate() {
        let name = format!("member_{i:03}.csv");
        let entry = match &m.orbit {
            Ok(orbit) => {
                match periodize(
                    orbit,
                    cfg.ocp.dtheta_rad,
                    o.resample_max_step_rad,
                    o.resampling,
                ) {
                    Ok(reference) => {
                        write_reference(orbit, &reference, &ctx.path(&name))?;
                        json!({
                            "x0": m.x0, "file": name, "converged": true,
                            "z0": orbit.z0(), "ydot0": orbit.ydot0(), "period": orbit.period,
                            "crossing_residual": orbit.crossing_residual,
                        })
                    }
                    Err(e) => {
                        failures += 1;
                        json!({ "x0": m.x0, "converged": true, "error": e.to_string() })
                    }
                }
            }
            Err(e) => {
                failures += 1;
                json!({ "x0": m.x0, "converged": false, "error": e.to_string() })
            }
        };
        ctx.log(format!("member {i}: {entry}"));
        index.push(entry);
    }
    write_json(
        &ctx.path("index.json"),
        &json!({ "mu": cfg.model.mu, "members": index }),
    )?;
    write_text(&ctx.path("config.json"), &cfg.echo())?;
    if failures > 0 {
        return Err(runtime(format!(
            "{failures} of {count} family members failed"
        )));
    }
    Ok(())
}

fn cmd_simulate(cfg: RunConfigFile, ctx: &Ctx) -> Result<(), CliError> {
    validated(&cfg)?;
    ctx.prepare()?;
    let (orbit, reference) = build_reference(&cfg, ctx)?;
    write_reference(&orbit, &reference, &ctx.path("reference.csv"))?;
    let sim = sim_config(&cfg, &reference, cfg.sim.revolutions);
    let log = simulate(&sim, &reference).map_err(runtime)?;
    log.write_csv(&ctx.path("simlog.csv")).map_err(runtime)?;
    log.write_summary(&ctx.path("summary.json"))
        .map_err(runtime)?;
    write_text(&ctx.path("config.json"), &cfg.echo())?;
    let s = &log.summary;
    ctx.log(format!(
        "J = {:.6e}, max |u|inf = {:.3} mN, max error = {:.3} km, terminal = {:.3} km, saturated steps = {}",
        s.cost_j, s.max_u_inf_mn, s.max_position_error_km, s.terminal_position_error_km, s.saturation_count
    ));
    if let Some(t) = &s.termination {
        return Err(runtime(format!("simulation terminated early: {t}")));
    }
    Ok(())
}

#[derive(Serialize)]
struct McEntry {
    index: usize,
    dr_km: [f64; 3],
    dv_km_s: [f64; 3],
    file: Option<String>,
    converged: bool,
    cost_j: Option<f64>,
    terminal_position_error_km: Option<f64>,
    max_u_inf_mn: Option<f64>,
    error: Option<String>,
}

fn cmd_montecarlo(cfg: RunConfigFile, ctx: &Ctx) -> Result<(), CliError> {
    validated(&cfg)?;
    ctx.prepare()?;
    let (_, reference) = build_reference(&cfg, ctx)?;
    let base = sim_config(&cfg, &reference, cfg.montecarlo.revolutions);
    let runs = monte_carlo(&cfg.hypercube(), &base, &reference).map_err(runtime)?;
    let threshold = cfg.montecarlo.converged_threshold_km;
    let mut entries = Vec::with_capacity(runs.len());
    for r in &runs {
        let converged = r.converged(threshold);
        let entry = match &r.log {
            Ok(log) => {
                let file = format!("run_{:03}.csv", r.index);
                log.write_csv(&ctx.path(&file)).map_err(runtime)?;
                McEntry {
                    index: r.index,
                    dr_km: r.dr_km,
                    dv_km_s: r.dv_km_s,
                    file: Some(file),
                    converged,
                    cost_j: Some(log.summary.cost_j),
                    terminal_position_error_km: Some(log.summary.terminal_position_error_km),
                    max_u_inf_mn: Some(log.summary.max_u_inf_mn),
                    error: log.summary.termination.clone(),
                }
            }
            Err(e) => McEntry {
                index: r.index,
                dr_km: r.dr_km,
                dv_km_s: r.dv_km_s,
                file: None,
                converged: false,
                cost_j: None,
                terminal_position_error_km: None,
                max_u_inf_mn: None,
                error: Some(e.clone()),
            },
        };
        ctx.log(format!(
            "run {}: converged = {}, terminal = {:?} km",
            entry.index, entry.converged, entry.terminal_position_error_km
        ));
        entries.push(entry);
    }
    let failures = entries.iter().filter(|e| e.error.is_some()).count();
    let all_converged = entries.iter().all(|e| e.converged);
    write_json(
        &ctx.path("montecarlo.json"),
        &json!({
            "seed": cfg.sim.seed,
            "revolutions": cfg.montecarlo.revolutions,
            "converged_threshold_km": threshold,
            "samples": entries.len(),
            "all_converged": all_converged,
            "failures": failures,
            "runs": entries,
        }),
    )?;
    write_text(&ctx.path("config.json"), &cfg.echo())?;
    if failures > 0 {
        return Err(runtime(format!(
            "{failures} of {} runs failed",
            entries.len()
        )));
    }
    Ok(())
}

fn cmd_sweep(cfg: RunConfigFile, ctx: &Ctx) -> Result<(), CliError> {
    validated(&cfg)?;
    if cfg.sweep.ell_values.is_empty() {
        return Err(CliError::Validation("empty ell list".into()));
    }
    ctx.prepare()?;
    let (_, reference) = build_reference(&cfg, ctx)?;
    let base = sim_config(&cfg, &reference, cfg.sweep.revolutions);
    let points = tdo_sweep(&cfg.sweep.ell_values, &base, &reference).map_err(runtime)?;

    let mut out = String::new();
    out.push_str(TDO_CSV_VERSION);
    out.push('\n');
    out.push_str("ell,cost_j,mean_step_ms,saturation_count,error\n");
    let mut failures = 0;
    for p in &points {
        match &p.log {
            Ok(log) => {
                let s = &log.summary;
                let err = s.termination.clone().unwrap_or_default();
                if !err.is_empty() {
                    failures += 1;
                }
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    p.ell,
                    s.cost_j,
                    s.mean_step_ms,
                    s.saturation_count,
                    csv_field(&err)
                ));
                ctx.log(format!(
                    "ell = {}: J = {:.6e}, mean step {:.3} ms",
                    p.ell, s.cost_j, s.mean_step_ms
                ));
            }
            Err(e) => {
                failures += 1;
                out.push_str(&format!("{},,,,{}\n", p.ell, csv_field(e)));
            }
        }
    }
    let path = ctx.path("tdo_sweep.csv");
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    write_text(&ctx.path("config.json"), &cfg.echo())?;
    if failures > 0 {
        return Err(runtime(format!(
            "{failures} of {} sweep points failed",
            points.len()
        )));
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}
