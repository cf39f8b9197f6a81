//! Halo orbit generation by single shooting, natural-parameter family sweeps
//! and the periodized reference trajectory consumed by the controller.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Matrix6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::dynamics::{er3bp_rhs, SpacecraftState, ThreeBodyParams};
use crate::error::{Error, Result};
use crate::integrator::{propagate_fine, rk4_step_with_sensitivities};

pub const REFERENCE_CSV_VERSION: &str = "# halo-nmpc reference v1";

/// Dense sub-grid used to march toward a plane crossing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossingConfig {
    /// RK4 step of the marching grid.
    pub step: f64,
    /// Largest anomaly span searched before giving up.
    pub max_span: f64,
}

impl Default for CrossingConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_span: 2.0 * PI,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShootingConfig {
    /// Bound on `|x'_f|` and `|z'_f|` at the half-period crossing.
    pub tol: f64,
    pub max_iterations: usize,
    /// Step halvings allowed when a Newton update increases the residual.
    pub max_halvings: usize,
    pub crossing: CrossingConfig,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 50,
            max_halvings: 8,
            crossing: CrossingConfig::default(),
        }
    }
}

/// Located x-z plane crossing.
#[derive(Debug, Clone, PartialEq)]
pub struct Crossing {
    pub theta: f64,
    pub state: SpacecraftState,
    /// Discrete state-transition matrix from the start to the crossing
    /// (fixed anomaly, no event correction).
    pub stm: Matrix6<f64>,
}

/// Symmetric periodic orbit of the circular problem, started on the x-z plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicOrbit {
    /// `(x0, 0, z0, 0, y'0, 0)`.
    pub initial_state: SpacecraftState,
    /// Full period in radians of anomaly.
    pub period: f64,
    pub mu: f64,
    /// `(x'_f, z'_f)` at the half-period crossing.
    pub crossing_residual: [f64; 2],
    pub iterations: usize,
}

impl PeriodicOrbit {
    pub fn x0(&self) -> f64 {
        self.initial_state[0]
    }
    pub fn z0(&self) -> f64 {
        self.initial_state[2]
    }
    pub fn ydot0(&self) -> f64 {
        self.initial_state[4]
    }
}

/// How the last partial interval of the period is handled when resampling
/// onto the controller grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    /// `n = round(T / dtheta)` full steps of `T / n`, so the grid step is
    /// adjusted slightly and the samples stay on the natural-motion orbit
    /// with no phase jump at the wrap. The shift only removes integration
    /// error. Callers must run the controller on `ReferenceOrbit::dtheta`.
    #[default]
    Commensurate,
    /// `ceil(T / dtheta)` samples; the final interval is shortened so the last
    /// sample lands at exactly one period. Wrapping then skips
    /// `ceil(T / dtheta) * dtheta - T` of anomaly in one step.
    ShortenedFinalStep,
    /// `round(T / dtheta)` full steps; the endpoint mismatch is absorbed
    /// entirely by the linear shift.
    Uniform,
}

/// Closed reference trajectory on a uniform anomaly grid with wrap-around
/// indexing. `samples.len() == period_steps + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceOrbit {
    pub dtheta: f64,
    pub samples: Vec<SpacecraftState>,
    pub period_steps: usize,
    pub shifted: bool,
    pub mu: f64,
    /// `|X_f - X_0|` removed by the shift.
    pub shift_magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSidecar {
    pub mu: f64,
    pub dtheta: f64,
    pub period_steps: usize,
    pub shifted: bool,
    pub shift_magnitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<[f64; 6]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crossing_residual: Option<[f64; 2]>,
}

impl ReferenceOrbit {
    /// Reference state at step `k`, wrapping modulo the period.
    pub fn sample(&self, k: usize) -> &SpacecraftState {
        &self.samples[k % self.period_steps]
    }

    /// `N + 1` consecutive reference states starting at step `k`.
    pub fn window(&self, k: usize, horizon: usize) -> Vec<SpacecraftState> {
        (k..=k + horizon).map(|i| *self.sample(i)).collect()
    }

    pub fn period(&self) -> f64 {
        self.period_steps as f64 * self.dtheta
    }

    pub fn sidecar(&self) -> ReferenceSidecar {
        ReferenceSidecar {
            mu: self.mu,
            dtheta: self.dtheta,
            period_steps: self.period_steps,
            shifted: self.shifted,
            shift_magnitude: self.shift_magnitude,
            period: None,
            initial_state: None,
            crossing_residual: None,
        }
    }

    /// Writes `<stem>.csv` and `<stem>.json` next to each other.
    pub fn write_files(&self, csv_path: &Path, sidecar: &ReferenceSidecar) -> Result<PathBuf> {
        let mut out = BufWriter::new(File::create(csv_path)?);
        writeln!(out, "{REFERENCE_CSV_VERSION}")?;
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(["index", "theta", "x", "y", "z", "xdot", "ydot", "zdot"])?;
            for (i, s) in self.samples.iter().enumerate() {
                let mut row = vec![i.to_string(), (i as f64 * self.dtheta).to_string()];
                row.extend(s.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        out.flush()?;
        let json_path = csv_path.with_extension("json");
        serde_json::to_writer_pretty(BufWriter::new(File::create(&json_path)?), sidecar)?;
        Ok(json_path)
    }

    pub fn read_files(csv_path: &Path) -> Result<Self> {
        let sidecar: ReferenceSidecar =
            serde_json::from_reader(BufReader::new(File::open(csv_path.with_extension("json"))?))?;
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(BufReader::new(File::open(csv_path)?));
        let mut samples = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() != 8 {
                return Err(Error::InvalidInput(format!("row {i}: expected 8 columns")));
            }
            let vals: std::result::Result<Vec<f64>, _> =
                rec.iter().skip(2).map(str::parse).collect();
            let vals = vals.map_err(|e| Error::InvalidInput(format!("row {i}: {e}")))?;
            samples.push(Vector6::from_column_slice(&vals));
        }
        if samples.len() != sidecar.period_steps + 1 {
            return Err(Error::Dimension {
                what: "reference samples",
                expected: sidecar.period_steps + 1,
                got: samples.len(),
            });
        }
        Ok(Self {
            dtheta: sidecar.dtheta,
            samples,
            period_steps: sidecar.period_steps,
            shifted: sidecar.shifted,
            mu: sidecar.mu,
            shift_magnitude: sidecar.shift_magnitude,
        })
    }
}

/// Marches the circular problem from `state0` on a dense RK4 grid until `y`
/// changes sign, then refines the crossing to `|y| < 1e-12` with safeguarded
/// Newton on the sub-step length. A start on the plane is not reported.
pub fn find_plane_crossing(
    theta0: f64,
    state0: &SpacecraftState,
    params: &ThreeBodyParams,
    cfg: &CrossingConfig,
) -> Result<Crossing> {
    let zero = Vector3::zeros();
    let h = cfg.step;
    let max_steps = (cfg.max_span / h).ceil() as usize;
    let mut x = *state0;
    let mut stm = Matrix6::identity();
    let mut theta = theta0;
    let mut side = if state0[1] != 0.0 {
        state0[1].signum()
    } else {
        0.0
    };
    for _ in 0..max_steps {
        let step = rk4_step_with_sensitivities(theta, &x, &zero, h, params)?;
        let y_next = step.next_state[1];
        if side == 0.0 {
            if y_next != 0.0 {
                side = y_next.signum();
            }
        } else if y_next == 0.0 || y_next.signum() != side {
            return refine_crossing(theta, &x, &stm, h, params);
        }
        stm = step.state_sensitivity * stm;
        x = step.next_state;
        theta += h;
    }
    Err(Error::NoCrossing { span: cfg.max_span })
}

fn refine_crossing(
    theta: f64,
    start: &SpacecraftState,
    stm: &Matrix6<f64>,
    h: f64,
    params: &ThreeBodyParams,
) -> Result<Crossing> {
    let zero = Vector3::zeros();
    let y_at = |s: f64| -> Result<(f64, SpacecraftState)> {
        let st = rk4_step_with_sensitivities(theta, start, &zero, s, params)?;
        Ok((st.next_state[1], st.next_state))
    };
    let y_lo = start[1];
    let (mut lo, mut hi) = (0.0, h);
    let rising = y_lo < 0.0;
    let mut s = 0.5 * h;
    let mut best = None;
    for _ in 0..200 {
        let (y, xs) = y_at(s)?;
        if y.abs() < 1e-12 {
            best = Some(s);
            break;
        }
        if (y > 0.0) == rising {
            hi = s;
        } else {
            lo = s;
        }
        // y' from the vector field approximates d y(s) / ds closely enough to drive Newton
        let slope = er3bp_rhs(theta + s, &xs, &zero, params)?[1];
        let newton = s - y / slope;
        s = if slope != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 * h {
            best = Some(s);
            break;
        }
    }
    let s = best.unwrap_or(s);
    let step = rk4_step_with_sensitivities(theta, start, &zero, s, params)?;
    Ok(Crossing {
        theta: theta + s,
        state: step.next_state,
        stm: step.state_sensitivity * stm,
    })
}

fn crossing_residual(
    x0: f64,
    unknowns: &Vector2<f64>,
    params: &ThreeBodyParams,
    cfg: &CrossingConfig,
) -> Result<(Vector2<f64>, Crossing)> {
    let start = Vector6::new(x0, 0.0, unknowns[0], 0.0, unknowns[1], 0.0);
    let c = find_plane_crossing(0.0, &start, params, cfg)?;
    Ok((Vector2::new(c.state[3], c.state[5]), c))
}

/// Differential correction on `(z0, y'0)` for fixed `x0` until `x'_f = z'_f = 0`
/// at the next x-z plane crossing.
pub fn shoot_halo(
    x0: f64,
    z0_guess: f64,
    ydot0_guess: f64,
    mu: f64,
    cfg: &ShootingConfig,
) -> Result<PeriodicOrbit> {
    let params = ThreeBodyParams::new(mu, 0.0)?;
    let mut p = Vector2::new(z0_guess, ydot0_guess);
    let (mut res, mut crossing) = crossing_residual(x0, &p, &params, &cfg.crossing)?;
    for iter in 0..=cfg.max_iterations {
        if res.amax() < cfg.tol {
            return Ok(PeriodicOrbit {
                initial_state: Vector6::new(x0, 0.0, p[0], 0.0, p[1], 0.0),
                period: 2.0 * crossing.theta,
                mu,
                crossing_residual: [res[0], res[1]],
                iterations: iter,
            });
        }
        if iter == cfg.max_iterations {
            break;
        }
        // hold the crossing on y = 0: dX_f = (Phi - f * Phi_y / y') dX_0
        let f = er3bp_rhs(crossing.theta, &crossing.state, &Vector3::zeros(), &params)?;
        let phi = &crossing.stm;
        let corrected = phi - f * phi.row(1) / f[1];
        let jac = Matrix2::new(
            corrected[(3, 2)],
            corrected[(3, 4)],
            corrected[(5, 2)],
            corrected[(5, 4)],
        );
        let delta = jac.try_inverse().ok_or(Error::SingularJacobian)? * res;
        if !delta.iter().all(|d| d.is_finite()) {
            return Err(Error::SingularJacobian);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial = p - delta * t;
            if let Ok((r, c)) = crossing_residual(x0, &trial, &params, &cfg.crossing) {
                if r.norm() < res.norm() {
                    accepted = Some((trial, r, c));
                    break;
                }
            }
            t *= 0.5;
        }
        // no descent after all halvings: take the shortest step anyway and let the
        // iteration cap decide
        let (np, nr, nc) = match accepted {
            Some(a) => a,
            None => {
                let trial = p - delta * (2.0 * t);
                let (r, c) = crossing_residual(x0, &trial, &params, &cfg.crossing)?;
                (trial, r, c)
            }
        };
        p = np;
        res = nr;
        crossing = nc;
    }
    Err(Error::ShootingDiverged {
        iterations: cfg.max_iterations,
        residual: res.amax(),
    })
}

/// One member of a family sweep.
#[derive(Debug)]
pub struct FamilyMember {
    pub x0: f64,
    pub orbit: Result<PeriodicOrbit>,
}

/// Natural-parameter continuation in `x0`; each converged member seeds the
/// next guess. Failures are recorded and the sweep continues from the last
/// good member.
pub fn sweep_family(
    x0_values: &[f64],
    z0_guess: f64,
    ydot0_guess: f64,
    mu: f64,
    cfg: &ShootingConfig,
) -> Vec<FamilyMember> {
    let mut guess = (z0_guess, ydot0_guess);
    x0_values
        .iter()
        .map(|&x0| {
            let orbit = shoot_halo(x0, guess.0, guess.1, mu, cfg);
            if let Ok(o) = &orbit {
                guess = (o.z0(), o.ydot0());
            }
            FamilyMember { x0, orbit }
        })
        .collect()
}

/// Resamples the orbit onto an anomaly grid near `dtheta` (see
/// [`Resampling`]) by re-propagation from the initial state, then shifts
/// sample `k` of `n` by `(k/n)(X_0 - X_f)` so the reference closes exactly.
pub fn periodize(
    orbit: &PeriodicOrbit,
    dtheta: f64,
    max_step: f64,
    mode: Resampling,
) -> Result<ReferenceOrbit> {
    if !(dtheta > 0.0) {
        return Err(Error::InvalidInput(format!(
            "dtheta = {dtheta} must be positive"
        )));
    }
    let params = ThreeBodyParams::new(orbit.mu, 0.0)?;
    let ratio = orbit.period / dtheta;
    let n = match mode {
        Resampling::ShortenedFinalStep => (ratio - 1e-9).ceil().max(1.0) as usize,
        Resampling::Uniform | Resampling::Commensurate => ratio.round().max(1.0) as usize,
    };
    let dtheta = match mode {
        Resampling::Commensurate => orbit.period / n as f64,
        _ => dtheta,
    };
    let mut samples = Vec::with_capacity(n + 1);
    samples.push(orbit.initial_state);
    let mut x = orbit.initial_state;
    for k in 0..n {
        let span = match mode {
            Resampling::ShortenedFinalStep if k + 1 == n => orbit.period - k as f64 * dtheta,
            _ => dtheta,
        };
        x = propagate_fine(k as f64 * dtheta, &x, span, max_step, &params)?;
        samples.push(x);
    }
    Ok(shift_closed(samples, dtheta, orbit.mu))
}

/// Applies the linear closing shift to an open sampled arc.
pub fn shift_closed(mut samples: Vec<SpacecraftState>, dtheta: f64, mu: f64) -> ReferenceOrbit {
    let n = samples.len() - 1;
    let gap = samples[0] - samples[n];
    for (k, s) in samples.iter_mut().enumerate().skip(1) {
        *s += gap * (k as f64 / n as f64);
    }
    samples[n] = samples[0];
    ReferenceOrbit {
        dtheta,
        samples,
        period_steps: n,
        shifted: true,
        mu,
        shift_magnitude: gap.norm(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MU: f64 = 0.012;

    #[test]
    fn crossing_skips_departure_point() {
        // planar circular-ish motion around the barycentre starting on y = 0
        let p = ThreeBodyParams::default();
        let start = Vector6::new(0.9878, 0.0, 0.0275, 0.0, 0.8969, 0.0);
        let c = find_plane_crossing(0.0, &start, &p, &CrossingConfig::default()).unwrap();
        assert!(c.theta > 0.1);
        assert!(c.state[1].abs() < 1e-12);
    }

    #[test]
    fn crossing_not_found_in_short_span() {
        let p = ThreeBodyParams::default();
        let start = Vector6::new(0.9878, 0.0, 0.0275, 0.0, 0.8969, 0.0);
        let cfg = CrossingConfig {
            step: 1e-3,
            max_span: 0.05,
        };
        assert!(matches!(
            find_plane_crossing(0.0, &start, &p, &cfg),
            Err(Error::NoCrossing { .. })
        ));
    }

    #[test]
    fn shift_is_zero_for_exactly_periodic_samples() {
        let s0 = Vector6::new(1.0, 0.0, 0.1, 0.0, 0.2, 0.0);
        let s1 = Vector6::new(1.1, 0.1, 0.1, 0.0, 0.2, 0.0);
        let r = shift_closed(vec![s0, s1, s0], 0.01, MU);
        assert_eq!(r.samples, vec![s0, s1, s0]);
        assert_eq!(r.shift_magnitude, 0.0);
    }

    #[test]
    fn shift_closes_and_is_bounded() {
        let s: Vec<_> = (0..=10)
            .map(|k| Vector6::new(1.0 + 0.01 * k as f64, 0.002 * k as f64, 0.0, 0.0, 0.0, 0.0))
            .collect();
        let gap = (s[0] - s[10]).norm();
        let r = shift_closed(s.clone(), 0.01, MU);
        assert_eq!(r.samples[0], r.samples[10]);
        for (a, b) in r.samples.iter().zip(&s) {
            assert!((a - b).norm() <= gap * (1.0 + 1e-12));
        }
    }

    #[test]
    fn window_wraps() {
        let s: Vec<_> = (0..=4).map(|k| Vector6::repeat(k as f64)).collect();
        let r = shift_closed(s, 0.1, MU);
        assert_eq!(r.window(0, 0), vec![r.samples[0]]);
        assert_eq!(
            r.window(3, 2),
            vec![r.samples[3], r.samples[0], r.samples[1]]
        );
        assert_eq!(r.window(1, 6), r.window(1 + r.period_steps, 6));
    }
}
