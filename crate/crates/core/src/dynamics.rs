//! Restricted three-body dynamics in the rotating (circular) or pulsating
//! (elliptic) frame, with the true anomaly of the primaries as independent
//! variable.
//!
//! Positions are in units of the primary separation (LU). Velocities are
//! derivatives with respect to true anomaly, which coincide with the
//! nondimensional time derivative when `e = 0`.

use nalgebra::{Matrix3, Matrix6, Matrix6x3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State `(x, y, z, x', y', z')`.
pub type SpacecraftState = Vector6<f64>;

/// Thruster acceleration `(u_x, u_y, u_z)` in nondimensional units.
pub type ControlInput = Vector3<f64>;

/// Distance to a massive primary below which the potential is treated as singular.
pub const SINGULARITY_EPS: f64 = 1e-12;

/// Earth-Moon length unit (mean separation).
pub const EARTH_MOON_LU_KM: f64 = 384_400.0;

/// Earth-Moon time unit (inverse mean motion).
pub const EARTH_MOON_TU_S: f64 = 375_190.0;

/// Coriolis block acting on the velocity.
pub const CORIOLIS: Matrix3<f64> = Matrix3::new(0.0, 2.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.0, 0.0);

/// Position feedback block: the `-z` term that pairs with the `z^2/2` part of
/// the pseudo-potential in the pulsating frame.
pub const POSITION_COUPLING: Matrix3<f64> =
    Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0);

/// Physical description of the primary pair and spacecraft.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeBodyParams {
    /// Mass ratio `m2 / (m1 + m2)`.
    pub mu: f64,
    /// Eccentricity of the primaries' relative orbit.
    pub e: f64,
    /// Kilometres per LU.
    pub length_unit_km: f64,
    /// Seconds per TU.
    pub time_unit_s: f64,
    /// Spacecraft mass in kilograms.
    pub mass_kg: f64,
}

impl Default for ThreeBodyParams {
    fn default() -> Self {
        Self {
            mu: 0.012,
            e: 0.0,
            length_unit_km: EARTH_MOON_LU_KM,
            time_unit_s: EARTH_MOON_TU_S,
            mass_kg: 10_000.0,
        }
    }
}

impl ThreeBodyParams {
    pub fn new(mu: f64, e: f64) -> Result<Self> {
        let p = Self {
            mu,
            e,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu < 0.5) {
            return Err(Error::InvalidInput(format!(
                "mu = {} outside (0, 0.5)",
                self.mu
            )));
        }
        if !(self.e >= 0.0 && self.e < 1.0) {
            return Err(Error::InvalidInput(format!(
                "e = {} outside [0, 1)",
                self.e
            )));
        }
        for (name, v) in [
            ("length_unit_km", self.length_unit_km),
            ("time_unit_s", self.time_unit_s),
            ("mass_kg", self.mass_kg),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Same system with a different eccentricity.
    pub fn with_e(self, e: f64) -> Self {
        Self { e, ..self }
    }

    /// The circular model used for prediction.
    pub fn circular(self) -> Self {
        self.with_e(0.0)
    }

    /// Acceleration unit in m/s^2.
    pub fn accel_unit_m_s2(&self) -> f64 {
        self.length_unit_km * 1e3 / (self.time_unit_s * self.time_unit_s)
    }

    pub fn velocity_unit_km_s(&self) -> f64 {
        self.length_unit_km / self.time_unit_s
    }

    pub fn accel_to_nondim(&self, a_m_s2: &Vector3<f64>) -> Vector3<f64> {
        a_m_s2 * (self.time_unit_s * self.time_unit_s / (self.length_unit_km * 1e3))
    }

    pub fn accel_from_nondim(&self, a: &Vector3<f64>) -> Vector3<f64> {
        a * (self.length_unit_km * 1e3 / (self.time_unit_s * self.time_unit_s))
    }

    /// Thrust magnitude in mN to a nondimensional acceleration.
    pub fn thrust_mn_to_nondim(&self, thrust_mn: f64) -> f64 {
        thrust_mn * 1e-3 / self.mass_kg / self.accel_unit_m_s2()
    }

    pub fn nondim_to_thrust_mn(&self, a: f64) -> f64 {
        a * self.accel_unit_m_s2() * self.mass_kg * 1e3
    }

    pub fn km_to_lu(&self, km: f64) -> f64 {
        km / self.length_unit_km
    }

    pub fn lu_to_km(&self, lu: f64) -> f64 {
        lu * self.length_unit_km
    }

    /// Dimensional velocity (km/s) to the anomaly-derivative velocity at `theta`.
    pub fn velocity_to_nondim(&self, v_km_s: f64, theta: f64) -> f64 {
        let rate = 1.0 + self.e * theta.cos();
        v_km_s / self.velocity_unit_km_s() / (rate * rate)
    }

    pub fn velocity_from_nondim(&self, v: f64, theta: f64) -> f64 {
        let rate = 1.0 + self.e * theta.cos();
        v * self.velocity_unit_km_s() * rate * rate
    }

    pub fn hours(&self, tu: f64) -> f64 {
        tu * self.time_unit_s / 3600.0
    }
}

fn primary_offsets(
    r: &Vector3<f64>,
    mu: f64,
    eps: f64,
) -> Result<(Vector3<f64>, f64, Vector3<f64>, f64)> {
    let d1 = Vector3::new(r.x + mu, r.y, r.z);
    let d2 = Vector3::new(r.x - 1.0 + mu, r.y, r.z);
    let n1 = d1.norm();
    let n2 = d2.norm();
    if !(n1.is_finite() && n2.is_finite()) {
        return Err(Error::InvalidInput("non-finite position".into()));
    }
    // a massless secondary exerts no pull, so it cannot be singular
    if n1 < eps {
        return Err(Error::Singular {
            body: 1,
            distance: n1,
        });
    }
    if mu > 0.0 && n2 < eps {
        return Err(Error::Singular {
            body: 2,
            distance: n2,
        });
    }
    Ok((d1, n1, d2, n2))
}

/// `U = (x^2 + y^2 + z^2)/2 + (1 - mu)/r1 + mu/r2`.
pub fn pseudo_potential(r: &Vector3<f64>, mu: f64) -> Result<f64> {
    pseudo_potential_eps(r, mu, SINGULARITY_EPS)
}

pub fn pseudo_potential_eps(r: &Vector3<f64>, mu: f64, eps: f64) -> Result<f64> {
    let (_, n1, _, n2) = primary_offsets(r, mu, eps)?;
    let secondary = if mu > 0.0 { mu / n2 } else { 0.0 };
    Ok(0.5 * r.norm_squared() + (1.0 - mu) / n1 + secondary)
}

pub fn pseudo_potential_gradient(r: &Vector3<f64>, mu: f64) -> Result<Vector3<f64>> {
    pseudo_potential_gradient_eps(r, mu, SINGULARITY_EPS)
}

pub fn pseudo_potential_gradient_eps(r: &Vector3<f64>, mu: f64, eps: f64) -> Result<Vector3<f64>> {
    let (d1, n1, d2, n2) = primary_offsets(r, mu, eps)?;
    let k1 = (1.0 - mu) / (n1 * n1 * n1);
    let k2 = if mu > 0.0 { mu / (n2 * n2 * n2) } else { 0.0 };
    Ok(r - d1 * k1 - d2 * k2)
}

/// Hessian of the pseudo-potential. Symmetric by construction.
pub fn pseudo_potential_hessian(r: &Vector3<f64>, mu: f64) -> Result<Matrix3<f64>> {
    let (d1, n1, d2, n2) = primary_offsets(r, mu, SINGULARITY_EPS)?;
    let mut h = Matrix3::identity();
    let mut add_body = |d: &Vector3<f64>, n: f64, m: f64| {
        let n3 = n * n * n;
        let n5 = n3 * n * n;
        for i in 0..3 {
            for j in i..3 {
                let delta = if i == j { 1.0 } else { 0.0 };
                let v = -m * (delta / n3 - 3.0 * d[i] * d[j] / n5);
                h[(i, j)] += v;
                if i != j {
                    h[(j, i)] += v;
                }
            }
        }
    };
    add_body(&d1, n1, 1.0 - mu);
    if mu > 0.0 {
        add_body(&d2, n2, mu);
    }
    Ok(h)
}

/// Right-hand side of the elliptic problem in the pulsating frame:
/// `r' = v`, `v' = A21 r + A22 v + grad U / (1 + e cos theta) + u`.
pub fn er3bp_rhs(
    theta: f64,
    state: &SpacecraftState,
    u: &ControlInput,
    params: &ThreeBodyParams,
) -> Result<SpacecraftState> {
    let r = state.fixed_rows::<3>(0).into_owned();
    let v = state.fixed_rows::<3>(3).into_owned();
    let scale = 1.0 / (1.0 + params.e * theta.cos());
    let grad = pseudo_potential_gradient(&r, params.mu)?;
    let acc = POSITION_COUPLING * r + CORIOLIS * v + grad * scale + u;
    Ok(Vector6::new(v.x, v.y, v.z, acc.x, acc.y, acc.z))
}

/// Circular problem written out component by component.
pub fn cr3bp_rhs(state: &SpacecraftState, u: &ControlInput, mu: f64) -> Result<SpacecraftState> {
    let (x, y, z) = (state[0], state[1], state[2]);
    let (vx, vy, vz) = (state[3], state[4], state[5]);
    let g = pseudo_potential_gradient(&Vector3::new(x, y, z), mu)?;
    let ax = 2.0 * vy + g.x + u.x;
    let ay = -2.0 * vx + g.y + u.y;
    let az = -z + g.z + u.z;
    Ok(Vector6::new(vx, vy, vz, ax, ay, az))
}

/// Analytic `(df/dxi, df/du)`.
pub fn er3bp_jacobians(
    theta: f64,
    state: &SpacecraftState,
    _u: &ControlInput,
    params: &ThreeBodyParams,
) -> Result<(Matrix6<f64>, Matrix6x3<f64>)> {
    let r = state.fixed_rows::<3>(0).into_owned();
    let scale = 1.0 / (1.0 + params.e * theta.cos());
    let hess = pseudo_potential_hessian(&r, params.mu)?;
    let mut a = Matrix6::zeros();
    a.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(POSITION_COUPLING + hess * scale));
    a.fixed_view_mut::<3, 3>(3, 3).copy_from(&CORIOLIS);
    Ok((a, control_jacobian()))
}

/// `[0; I]`: the control enters the velocity equations additively.
pub fn control_jacobian() -> Matrix6x3<f64> {
    let mut b = Matrix6x3::zeros();
    b.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&Matrix3::identity());
    b
}

/// Circular-problem energy `|v|^2/2 - U + z^2/2`, conserved at `e = 0`, `u = 0`.
pub fn jacobi_energy(state: &SpacecraftState, mu: f64) -> Result<f64> {
    let r = state.fixed_rows::<3>(0).into_owned();
    let v = state.fixed_rows::<3>(3);
    Ok(0.5 * v.norm_squared() - pseudo_potential(&r, mu)? + 0.5 * r.z * r.z)
}

/// Elapsed nondimensional time between two anomalies, `int dtheta / (1 + e cos theta)^2`.
pub fn time_from_anomaly(theta0: f64, theta1: f64, e: f64) -> Result<f64> {
    if !(theta1 >= theta0) {
        return Err(Error::InvalidInput(format!(
            "anomaly interval [{theta0}, {theta1}] is reversed"
        )));
    }
    if !(0.0..1.0).contains(&e) {
        return Err(Error::InvalidInput(format!("e = {e} outside [0, 1)")));
    }
    if e == 0.0 {
        return Ok(theta1 - theta0);
    }
    // Kepler: the integral is the mean anomaly scaled by (1 - e^2)^-3/2
    let scale = (1.0 - e * e).powf(-1.5);
    Ok(scale * (mean_anomaly(theta1, e) - mean_anomaly(theta0, e)))
}

/// Mean anomaly as a continuous function of the true anomaly (no wrapping).
fn mean_anomaly(theta: f64, e: f64) -> f64 {
    let beta = e / (1.0 + (1.0 - e * e).sqrt());
    let (s, c) = theta.sin_cos();
    let ecc = theta - 2.0 * (beta * s).atan2(1.0 + beta * c);
    ecc - e * ecc.sin()
}

/// `dU/dx` along the x axis.
fn collinear_slope(x: f64, mu: f64) -> f64 {
    let d1 = x + mu;
    let d2 = x - 1.0 + mu;
    x - (1.0 - mu) * d1 / d1.abs().powi(3) - mu * d2 / d2.abs().powi(3)
}

fn collinear_curvature(x: f64, mu: f64) -> f64 {
    let d1 = (x + mu).abs();
    let d2 = (x - 1.0 + mu).abs();
    1.0 + 2.0 * (1.0 - mu) / d1.powi(3) + 2.0 * mu / d2.powi(3)
}

fn collinear_root(mut lo: f64, mut hi: f64, mu: f64) -> Result<f64> {
    let f_lo = collinear_slope(lo, mu);
    let f_hi = collinear_slope(hi, mu);
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::Bracketing(format!(
            "dU/dx has equal signs at {lo} and {hi} for mu = {mu}"
        )));
    }
    let rising = f_hi > 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (collinear_slope(mid, mu) > 0.0) == rising {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..5 {
        let step = collinear_slope(x, mu) / collinear_curvature(x, mu);
        x -= step;
        if step.abs() < 1e-16 {
            break;
        }
    }
    let residual = collinear_slope(x, mu);
    if residual.abs() >= 1e-12 {
        return Err(Error::Bracketing(format!(
            "collinear point polish stalled at |dU/dx| = {residual:e}"
        )));
    }
    Ok(x)
}

/// The five equilibria `[L1, L2, L3, L4, L5]`. L1 lies between the primaries,
/// L2 beyond the secondary and L3 beyond the primary.
pub fn lagrange_points(mu: f64) -> Result<[Vector3<f64>; 5]> {
    if !(mu > 0.0 && mu < 0.5) {
        return Err(Error::Bracketing(format!("mu = {mu} outside (0, 0.5)")));
    }
    let gap = 1e-9;
    let l1 = collinear_root(-mu + gap, 1.0 - mu - gap, mu)?;
    let l2 = collinear_root(1.0 - mu + gap, 2.0, mu)?;
    let l3 = collinear_root(-2.0, -mu - gap, mu)?;
    let h = 0.75f64.sqrt();
    Ok([
        Vector3::new(l1, 0.0, 0.0),
        Vector3::new(l2, 0.0, 0.0),
        Vector3::new(l3, 0.0, 0.0),
        Vector3::new(0.5 - mu, h, 0.0),
        Vector3::new(0.5 - mu, -h, 0.0),
    ])
}

/// Samples `U` on a regular `z = 0` grid; rows are `(x, y, U)`. Points within
/// the singularity guard are skipped.
pub fn potential_grid(
    mu: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
    resolution: usize,
) -> Vec<(f64, f64, f64)> {
    let n = resolution.max(2);
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        let y = y_range.0 + (y_range.1 - y_range.0) * j as f64 / (n - 1) as f64;
        for i in 0..n {
            let x = x_range.0 + (x_range.1 - x_range.0) * i as f64 / (n - 1) as f64;
            if let Ok(u) = pseudo_potential(&Vector3::new(x, y, 0.0), mu) {
                out.push((x, y, u));
            }
        }
    }
    out
}
