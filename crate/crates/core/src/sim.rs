//! Closed-loop simulation, Monte Carlo over initial-condition hypercubes,
//! iteration-cap sweeps and the closed-loop cost.
//!
//! The plant is the full model (elliptic when `plant_e > 0`) integrated with
//! RK4 substeps; the controller predicts with its own (circular) model and
//! sees the exact plant state. Process noise is a zero-mean Gaussian
//! acceleration, drawn per controller interval and axis from a ChaCha stream
//! seeded only by `seed`, so runs that differ in controller settings see
//! identical disturbances.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Matrix6, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{time_from_anomaly, ControlInput, SpacecraftState, ThreeBodyParams};
use crate::error::{Error, Result};
use crate::integrator::propagate_plant;
use crate::nmpc::{Controller, ControllerConfig};
use crate::orbits::ReferenceOrbit;

pub const SIMLOG_CSV_VERSION: &str = "# halo-nmpc simlog v1";

/// Relative margin below `u_max` at which a step counts as saturated.
const SATURATION_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// First reference sample.
    OnReference,
    Explicit {
        state: SpacecraftState,
    },
    /// Dimensional offset from the first reference sample.
    Offset {
        dr_km: [f64; 3],
        dv_km_s: [f64; 3],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub plant_e: f64,
    /// Standard deviation of the process-noise acceleration, km/s^2.
    pub tau_km_s2: f64,
    pub revolutions: f64,
    pub seed: u64,
    pub controller: ControllerConfig,
    pub substeps: usize,
    pub initial: InitialCondition,
    /// Record controller wall time; off by default because it breaks
    /// bitwise reproducibility of the log.
    pub timing: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            plant_e: 0.0,
            tau_km_s2: 1e-10,
            revolutions: 1.0,
            seed: 0,
            controller: ControllerConfig::default(),
            substeps: 10,
            initial: InitialCondition::OnReference,
            timing: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        if !(self.revolutions > 0.0 && self.revolutions.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "revolutions = {} must be positive",
                self.revolutions
            )));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidInput("plant substeps must be >= 1".into()));
        }
        if !(self.tau_km_s2 >= 0.0 && self.tau_km_s2.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "tau = {} must be >= 0",
                self.tau_km_s2
            )));
        }
        if !(0.0..1.0).contains(&self.plant_e) {
            return Err(Error::InvalidInput(format!(
                "plant e = {} outside [0, 1)",
                self.plant_e
            )));
        }
        Ok(())
    }

    /// Runs the controller on the reference grid step, which a commensurate
    /// resampling moves slightly away from the nominal step.
    pub fn on_grid_of(mut self, reference: &ReferenceOrbit) -> Self {
        self.controller.ocp.dtheta = reference.dtheta;
        self
    }

    pub fn plant(&self) -> ThreeBodyParams {
        self.controller.model.with_e(self.plant_e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypercubeSpec {
    /// Box center; the first reference sample when absent.
    pub center: Option<SpacecraftState>,
    pub dr_max_km: f64,
    pub dv_max_km_s: f64,
    pub samples: usize,
}

impl Default for HypercubeSpec {
    fn default() -> Self {
        Self {
            center: None,
            dr_max_km: 500.0,
            dv_max_km_s: 0.01,
            samples: 10,
        }
    }
}

impl HypercubeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dr_max_km >= 0.0 && self.dv_max_km_s >= 0.0) {
            return Err(Error::InvalidInput(
                "hypercube half-widths must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Uniform samples of `(dr_km, dv_km_s)`, a pure function of `seed`.
    pub fn sample_offsets(&self, seed: u64) -> Vec<([f64; 3], [f64; 3])> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4859_5045_5243_5542));
        let mut draw = |half: f64| -> f64 {
            let s: f64 = rng.random_range(-1.0..=1.0);
            s * half
        };
        (0..self.samples)
            .map(|_| {
                let dr = [
                    draw(self.dr_max_km),
                    draw(self.dr_max_km),
                    draw(self.dr_max_km),
                ];
                let dv = [
                    draw(self.dv_max_km_s),
                    draw(self.dv_max_km_s),
                    draw(self.dv_max_km_s),
                ];
                (dr, dv)
            })
            .collect()
    }
}

/// SplitMix64 finalizer over `seed ^ salt`.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = (seed ^ salt).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub k: usize,
    pub theta: f64,
    pub t_tu: f64,
    pub t_hours: f64,
    pub state: SpacecraftState,
    pub reference: SpacecraftState,
    /// Position error norm, LU.
    pub err_norm: f64,
    /// Control computed at this instant (nondimensional); the last record's
    /// control is computed but not applied.
    pub u: ControlInput,
    pub u_mn: [f64; 3],
    pub kkt_residual: f64,
    pub step_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub cost_j: f64,
    pub steps: usize,
    pub max_error_norm: f64,
    pub max_position_error_km: f64,
    pub terminal_position_error_km: f64,
    pub max_u_inf_mn: f64,
    pub saturation_count: usize,
    /// Largest QP overshoot of the bound that had to be projected away.
    pub max_bound_projection: f64,
    pub mean_step_ms: f64,
    /// Set when the run stopped early, e.g. on impact with a primary.
    pub termination: Option<String>,
    pub seed: u64,
    pub config: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLog {
    pub records: Vec<SimRecord>,
    pub summary: SimSummary,
}

impl SimLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        writeln!(f, "{SIMLOG_CSV_VERSION}")?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record([
            "k",
            "theta",
            "t_tu",
            "t_hours",
            "x",
            "y",
            "z",
            "xdot",
            "ydot",
            "zdot",
            "ref_x",
            "ref_y",
            "ref_z",
            "ref_xdot",
            "ref_ydot",
            "ref_zdot",
            "err_norm",
            "ux_mN",
            "uy_mN",
            "uz_mN",
            "kkt_residual",
            "step_ms",
        ])?;
        for r in &self.records {
            let mut row = vec![r.k.to_string()];
            let nums = [r.theta, r.t_tu, r.t_hours]
                .into_iter()
                .chain(r.state.iter().copied())
                .chain(r.reference.iter().copied())
                .chain([r.err_norm])
                .chain(r.u_mn)
                .chain([r.kkt_residual, r.step_ms]);
            row.extend(nums.map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &self.summary)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// `sum_j |xi_j - ref_j|_Q^2 + |u_j|_R^2` over all logged instants.
pub fn closed_loop_cost(records: &[SimRecord], q: &Matrix6<f64>, r: &Matrix3<f64>) -> f64 {
    records
        .iter()
        .map(|rec| {
            let e = rec.state - rec.reference;
            e.dot(&(q * e)) + rec.u.dot(&(r * rec.u))
        })
        .sum()
}

fn initial_state(cfg: &SimConfig, reference: &ReferenceOrbit) -> SpacecraftState {
    let plant = cfg.plant();
    match cfg.initial {
        InitialCondition::OnReference => *reference.sample(0),
        InitialCondition::Explicit { state } => state,
        InitialCondition::Offset { dr_km, dv_km_s } => {
            let mut x = *reference.sample(0);
            for i in 0..3 {
                x[i] += plant.km_to_lu(dr_km[i]);
                x[i + 3] += plant.velocity_to_nondim(dv_km_s[i], 0.0);
            }
            x
        }
    }
}

/// Number of controller intervals for the configured revolutions.
pub fn step_count(cfg: &SimConfig, reference: &ReferenceOrbit) -> usize {
    (cfg.revolutions * reference.period_steps as f64 - 1e-9)
        .ceil()
        .max(1.0) as usize
}

/// Runs the closed loop for `ceil(revolutions * period_steps)` intervals.
/// A plant singularity ends the run early with the partial log and a
/// `termination` note in the summary.
pub fn simulate(cfg: &SimConfig, reference: &ReferenceOrbit) -> Result<SimLog> {
    cfg.validate()?;
    let ocp = &cfg.controller.ocp;
    if (reference.dtheta - ocp.dtheta).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "reference grid step {} differs from controller step {}",
            reference.dtheta, ocp.dtheta
        )));
    }
    let plant = cfg.plant();
    let steps = step_count(cfg, reference);
    let tau = plant
        .accel_to_nondim(&Vector3::repeat(cfg.tau_km_s2 * 1e3))
        .x;
    let normal = Normal::new(0.0, tau).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut xi = initial_state(cfg, reference);
    let mut controller =
        Controller::initialize(cfg.controller, &xi, 0.0, &reference.window(0, ocp.horizon))?;
    let mut records = Vec::with_capacity(steps + 1);
    let mut termination = None;
    let mut max_projection: f64 = 0.0;
    for k in 0..=steps {
        let theta = k as f64 * ocp.dtheta;
        let window = reference.window(k, ocp.horizon);
        let (u, diag) = match controller.step(&xi, theta, &window) {
            Ok(out) => out,
            Err(e) => {
                termination = Some(format!("controller failed at step {k}: {e}"));
                break;
            }
        };
        max_projection = max_projection.max(diag.bound_violation);
        let t_tu = time_from_anomaly(0.0, theta, plant.e)?;
        let e_pos = (xi - window[0]).fixed_rows::<3>(0).norm();
        let u_mn = plant.accel_from_nondim(&u) * plant.mass_kg * 1e3;
        records.push(SimRecord {
            k,
            theta,
            t_tu,
            t_hours: plant.hours(t_tu),
            state: xi,
            reference: window[0],
            err_norm: e_pos,
            u,
            u_mn: [u_mn.x, u_mn.y, u_mn.z],
            kkt_residual: diag.kkt_norm,
            step_ms: if cfg.timing {
                diag.duration.as_secs_f64() * 1e3
            } else {
                0.0
            },
        });
        if k == steps {
            break;
        }
        let noise = ControlInput::from_fn(|_, _| normal.sample(&mut rng));
        match propagate_plant(theta, &xi, &u, ocp.dtheta, &plant, cfg.substeps, &noise) {
            Ok(next) => xi = next,
            Err(e) => {
                termination = Some(format!("plant propagation failed after step {k}: {e}"));
                break;
            }
        }
    }
    let summary = summarize(cfg, &records, termination, max_projection);
    Ok(SimLog { records, summary })
}

fn summarize(
    cfg: &SimConfig,
    records: &[SimRecord],
    termination: Option<String>,
    max_projection: f64,
) -> SimSummary {
    let plant = cfg.plant();
    let ocp = &cfg.controller.ocp;
    let max_err = records.iter().map(|r| r.err_norm).fold(0.0, f64::max);
    let max_u = records.iter().map(|r| r.u.amax()).fold(0.0, f64::max);
    let saturation_count = records
        .iter()
        .filter(|r| r.u.amax() >= ocp.u_max * (1.0 - SATURATION_MARGIN))
        .count();
    let mean_step_ms = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.step_ms).sum::<f64>() / records.len() as f64
    };
    SimSummary {
        cost_j: closed_loop_cost(records, &ocp.q, &ocp.r),
        steps: records.len().saturating_sub(1),
        max_error_norm: max_err,
        max_position_error_km: plant.lu_to_km(max_err),
        terminal_position_error_km: records
            .last()
            .map_or(f64::NAN, |r| plant.lu_to_km(r.err_norm)),
        max_u_inf_mn: plant.nondim_to_thrust_mn(max_u),
        saturation_count,
        max_bound_projection: max_projection,
        mean_step_ms,
        termination,
        seed: cfg.seed,
        config: *cfg,
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloRun {
    pub index: usize,
    pub dr_km: [f64; 3],
    pub dv_km_s: [f64; 3],
    pub log: std::result::Result<SimLog, String>,
}

impl MonteCarloRun {
    /// Completed the run with terminal position error below `threshold_km`.
    pub fn converged(&self, threshold_km: f64) -> bool {
        match &self.log {
            Ok(log) => {
                log.summary.termination.is_none()
                    && log.summary.terminal_position_error_km < threshold_km
            }
            Err(_) => false,
        }
    }
}

/// One closed-loop run per hypercube sample. Sample offsets depend only on
/// `base.seed`; every run replays the same noise stream as the nominal run.
/// Results are ordered by sample index.
pub fn monte_carlo(
    spec: &HypercubeSpec,
    base: &SimConfig,
    reference: &ReferenceOrbit,
) -> Result<Vec<MonteCarloRun>> {
    spec.validate()?;
    base.validate()?;
    let plant = base.plant();
    let offsets = spec.sample_offsets(base.seed);
    Ok(offsets
        .into_par_iter()
        .enumerate()
        .map(|(index, (dr_km, dv_km_s))| {
            let initial = match spec.center {
                None => InitialCondition::Offset { dr_km, dv_km_s },
                Some(center) => {
                    let mut state = center;
                    for i in 0..3 {
                        state[i] += plant.km_to_lu(dr_km[i]);
                        state[i + 3] += plant.velocity_to_nondim(dv_km_s[i], 0.0);
                    }
                    InitialCondition::Explicit { state }
                }
            };
            let cfg = SimConfig { initial, ..*base };
            let log = simulate(&cfg, reference).map_err(|e| e.to_string());
            MonteCarloRun {
                index,
                dr_km,
                dv_km_s,
                log,
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub ell: usize,
    pub log: std::result::Result<SimLog, String>,
}

impl SweepPoint {
    pub fn cost(&self) -> Option<f64> {
        self.log.as_ref().ok().map(|l| l.summary.cost_j)
    }
}

/// Closed-loop cost per iteration cap, all runs sharing `base` (including
/// its seed) except `ell`.
pub fn tdo_sweep(
    ell_values: &[usize],
    base: &SimConfig,
    reference: &ReferenceOrbit,
) -> Result<Vec<SweepPoint>> {
    base.validate()?;
    if ell_values.contains(&0) {
        return Err(Error::InvalidInput("ell values must be >= 1".into()));
    }
    Ok(ell_values
        .par_iter()
        .map(|&ell| {
            let mut cfg = *base;
            cfg.controller.ell = ell;
            SweepPoint {
                ell,
                log: simulate(&cfg, reference).map_err(|e| e.to_string()),
            }
        })
        .collect())
}
