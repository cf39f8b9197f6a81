//! Run configuration file. Every physical quantity carries its unit in the
//! key name; nondimensional values are marked as such or are plain ratios.

use std::path::Path;

use halo_nmpc::orbits::{Resampling, ShootingConfig};
use halo_nmpc::{
    ControllerConfig, HypercubeSpec, InitialCondition, Matrix3, Matrix6, OcpConfig, QpSolverConfig,
    SimConfig, ThreeBodyParams, Vector3, Vector6,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub model: ModelSection,
    pub orbit: OrbitSection,
    pub ocp: OcpSection,
    pub qp: QpSolverConfig,
    pub controller: ControllerSection,
    pub sim: SimSection,
    pub hypercube: HypercubeSection,
    pub montecarlo: MonteCarloSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub mu: f64,
    pub length_unit_km: f64,
    pub time_unit_s: f64,
    pub mass_kg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrbitSection {
    /// Initial x on the x-z plane, LU.
    pub x0_lu: f64,
    pub z0_guess_lu: f64,
    pub ydot0_guess_lu_tu: f64,
    pub shooting_tol: f64,
    pub max_shooting_iterations: usize,
    /// Largest RK4 step of the fine propagation used for resampling, rad.
    pub resample_max_step_rad: f64,
    pub resampling: Resampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[allow(non_snake_case)]
pub struct OcpSection {
    pub horizon: usize,
    pub q_diag: [f64; 6],
    pub r_diag: [f64; 3],
    pub u_max_mN: f64,
    pub dtheta_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub ell: usize,
    pub shift_warmstart: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub plant_e: f64,
    pub tau_km_s2: f64,
    pub revolutions: f64,
    pub seed: u64,
    pub substeps: usize,
    pub initial: InitialCondition,
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypercubeSection {
    /// Box center in LU and LU/TU; the first reference sample when null.
    pub center_lu: Option<[f64; 6]>,
    pub dr_max_km: f64,
    pub dv_max_km_s: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloSection {
    pub revolutions: f64,
    pub converged_threshold_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub ell_values: Vec<usize>,
    pub revolutions: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Bundle directory. Not echoed, so a bundle replays identically
    /// wherever it is written.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = ThreeBodyParams::default();
        Self {
            mu: p.mu,
            length_unit_km: p.length_unit_km,
            time_unit_s: p.time_unit_s,
            mass_kg: p.mass_kg,
        }
    }
}

impl Default for OrbitSection {
    fn default() -> Self {
        let s = ShootingConfig::default();
        Self {
            x0_lu: 0.9878,
            z0_guess_lu: 0.0290,
            ydot0_guess_lu_tu: 0.8763,
            shooting_tol: s.tol,
            max_shooting_iterations: s.max_iterations,
            resample_max_step_rad: 1e-3,
            resampling: Resampling::default(),
        }
    }
}

impl Default for OcpSection {
    fn default() -> Self {
        Self {
            horizon: 35,
            q_diag: [1e4, 1e4, 1e4, 1e3, 1e3, 1e3],
            r_diag: [1.0; 3],
            u_max_mN: 2000.0,
            dtheta_rad: 0.01,
        }
    }
}

impl Default for ControllerSection {
    fn default() -> Self {
        let c = ControllerConfig::default();
        Self {
            ell: c.ell,
            shift_warmstart: c.shift_warmstart,
        }
    }
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            plant_e: s.plant_e,
            tau_km_s2: s.tau_km_s2,
            revolutions: s.revolutions,
            seed: s.seed,
            substeps: s.substeps,
            initial: s.initial,
            timing: s.timing,
        }
    }
}

impl Default for HypercubeSection {
    fn default() -> Self {
        let h = HypercubeSpec::default();
        Self {
            center_lu: None,
            dr_max_km: h.dr_max_km,
            dv_max_km_s: h.dv_max_km_s,
            samples: h.samples,
        }
    }
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self {
            revolutions: 2.0,
            converged_threshold_km: 10.0,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ell_values: (1..=10).collect(),
            revolutions: 5.0,
        }
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Circular prediction model.
    pub fn model(&self) -> ThreeBodyParams {
        ThreeBodyParams {
            mu: self.model.mu,
            e: 0.0,
            length_unit_km: self.model.length_unit_km,
            time_unit_s: self.model.time_unit_s,
            mass_kg: self.model.mass_kg,
        }
    }

    pub fn shooting(&self) -> ShootingConfig {
        ShootingConfig {
            tol: self.orbit.shooting_tol,
            max_iterations: self.orbit.max_shooting_iterations,
            ..ShootingConfig::default()
        }
    }

    pub fn controller(&self) -> ControllerConfig {
        let model = self.model();
        ControllerConfig {
            ocp: OcpConfig {
                horizon: self.ocp.horizon,
                q: Matrix6::from_diagonal(&Vector6::from(self.ocp.q_diag)),
                r: Matrix3::from_diagonal(&Vector3::from(self.ocp.r_diag)),
                u_max: model.thrust_mn_to_nondim(self.ocp.u_max_mN),
                dtheta: self.ocp.dtheta_rad,
            },
            ell: self.controller.ell,
            qp: self.qp,
            shift_warmstart: self.controller.shift_warmstart,
            model,
        }
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            plant_e: self.sim.plant_e,
            tau_km_s2: self.sim.tau_km_s2,
            revolutions: self.sim.revolutions,
            seed: self.sim.seed,
            controller: self.controller(),
            substeps: self.sim.substeps,
            initial: self.sim.initial,
            timing: self.sim.timing,
        }
    }

    pub fn hypercube(&self) -> HypercubeSpec {
        HypercubeSpec {
            center: self.hypercube.center_lu.map(Vector6::from),
            dr_max_km: self.hypercube.dr_max_km,
            dv_max_km_s: self.hypercube.dv_max_km_s,
            samples: self.hypercube.samples,
        }
    }

    /// Checks everything that can be checked without running anything.
    pub fn validate(&self) -> Result<(), String> {
        self.model().validate().map_err(|e| e.to_string())?;
        if !(self.ocp.u_max_mN > 0.0) {
            return Err(format!(
                "ocp.u_max_mN = {} must be positive",
                self.ocp.u_max_mN
            ));
        }
        if !(self.orbit.shooting_tol > 0.0) || !(self.orbit.resample_max_step_rad > 0.0) {
            return Err(
                "orbit.shooting_tol and orbit.resample_max_step_rad must be positive".into(),
            );
        }
        self.sim().validate().map_err(|e| e.to_string())?;
        self.hypercube().validate().map_err(|e| e.to_string())?;
        if !(self.montecarlo.revolutions > 0.0) || !(self.sweep.revolutions > 0.0) {
            return Err("montecarlo.revolutions and sweep.revolutions must be positive".into());
        }
        if self.sweep.ell_values.contains(&0) {
            return Err("sweep.ell_values must all be >= 1".into());
        }
        Ok(())
    }

    /// Resolved config as written into an output bundle.
    pub fn echo(&self) -> String {
        let mut c = self.clone();
        c.output.out_dir = None;
        let mut s = serde_json::to_string_pretty(&c).expect("config serializes");
        s.push('\n');
        s
    }
}
