//! Warmstartable convex QP solver for the stage-structured subproblems.
//!
//! Proximal point outer iterations, each solved approximately by a semismooth
//! Newton method applied to a penalized Fischer-Burmeister reformulation of
//! the regularized KKT conditions:
//!
//! ```text
//! r1 = H d + f + G' lambda + C' v + sigma (d - d_bar)
//! r2 = G d + g - sigma (lambda - lambda_bar)
//! r3 = phi(-(C d + h) + sigma (v - v_bar), v)
//! phi(a, b) = alpha (a + b - sqrt(a^2 + b^2)) + (1 - alpha) a_+ b_+
//! ```
//!
//! Inner steps use an Armijo backtracking search on `|F_sigma|^2`. The whole
//! solve stops as soon as the natural residual of the unregularized QP drops
//! below the tolerance, so a warmstart at the solution costs no Newton steps.

pub mod banded;
pub mod structured;

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::{PrimalDualPoint, QpData};
pub use structured::{structured_linear_solve, NewtonSystem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QpSolverConfig {
    pub tolerance: f64,
    pub max_outer_iterations: usize,
    /// Cap on Newton steps summed over all outer iterations.
    pub max_inner_iterations: usize,
    pub initial_sigma: f64,
    pub sigma_floor: f64,
    /// Ceiling for the proximal parameter after repeated stagnation.
    pub sigma_ceiling: f64,
    /// Fischer-Burmeister / penalty blend in `(0, 1]`.
    pub alpha: f64,
    /// Systems with fewer unknowns are factored densely.
    pub dense_threshold: usize,
    pub verbose: bool,
}

impl Default for QpSolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_outer_iterations: 100,
            max_inner_iterations: 200,
            initial_sigma: 1e-8,
            sigma_floor: 1e-12,
            sigma_ceiling: 1e6,
            alpha: 0.95,
            dense_threshold: 64,
            verbose: false,
        }
    }
}

impl QpSolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.tolerance) {
            return Err(Error::InvalidInput(format!(
                "QP tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_outer_iterations == 0 || self.max_inner_iterations == 0 {
            return Err(Error::InvalidInput(
                "QP iteration caps must be at least 1".into(),
            ));
        }
        if !positive(self.initial_sigma)
            || !positive(self.sigma_floor)
            || self.sigma_ceiling < self.initial_sigma
        {
            return Err(Error::InvalidInput(
                "proximal parameters must satisfy 0 < floor, 0 < sigma0 <= ceiling".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIterations,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpLogEntry {
    pub outer: usize,
    pub inner: usize,
    /// Natural residual of the unregularized QP.
    pub residual: f64,
    /// Residual of the current proximal subproblem.
    pub prox_residual: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub d: DVector<f64>,
    pub lambda: DVector<f64>,
    pub v: DVector<f64>,
    pub status: QpStatus,
    pub kkt_norm: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Filled only when `verbose` is set.
    pub log: Vec<QpLogEntry>,
}

impl QpSolution {
    pub fn iterations(&self) -> (usize, usize) {
        (self.outer_iterations, self.inner_iterations)
    }

    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["outer", "inner", "residual", "prox_residual", "sigma"])?;
        for e in &self.log {
            w.serialize((e.outer, e.inner, e.residual, e.prox_residual, e.sigma))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Iterate {
    d: DVector<f64>,
    lambda: DVector<f64>,
    v: DVector<f64>,
}

impl Iterate {
    fn axpy(&self, t: f64, dir: &Iterate) -> Iterate {
        Iterate {
            d: &self.d + &dir.d * t,
            lambda: &self.lambda + &dir.lambda * t,
            v: &self.v + &dir.v * t,
        }
    }

    fn is_finite(&self) -> bool {
        self.d
            .iter()
            .chain(self.lambda.iter())
            .chain(self.v.iter())
            .all(|x| x.is_finite())
    }
}

/// Regularized residual blocks and the inequality argument `y`.
struct Residual {
    r1: DVector<f64>,
    r2: DVector<f64>,
    r3: DVector<f64>,
    y: DVector<f64>,
}

impl Residual {
    fn norm_squared(&self) -> f64 {
        self.r1.norm_squared() + self.r2.norm_squared() + self.r3.norm_squared()
    }
}

fn phi(alpha: f64, a: f64, b: f64) -> f64 {
    alpha * (a + b - a.hypot(b)) + (1.0 - alpha) * a.max(0.0) * b.max(0.0)
}

/// Element of the generalized gradient of `phi` as `(d/da, d/db)`.
fn phi_grad(alpha: f64, a: f64, b: f64) -> (f64, f64) {
    let r = a.hypot(b);
    let (ar, br) = if r > 0.0 {
        (a / r, b / r)
    } else {
        (
            std::f64::consts::FRAC_1_SQRT_2,
            std::f64::consts::FRAC_1_SQRT_2,
        )
    };
    let both = a > 0.0 && b > 0.0;
    let pa = if both { (1.0 - alpha) * b } else { 0.0 };
    let pb = if both { (1.0 - alpha) * a } else { 0.0 };
    (alpha * (1.0 - ar) + pa, alpha * (1.0 - br) + pb)
}

fn residual(qp: &QpData, x: &Iterate, center: &Iterate, sigma: f64, alpha: f64) -> Residual {
    let r1 = qp.hess_mul(&x.d)
        + &qp.gradient
        + qp.eq_tmul(&x.lambda)
        + qp.ineq_tmul(&x.v)
        + (&x.d - &center.d) * sigma;
    let r2 = qp.eq_mul(&x.d) + &qp.eq_residual - (&x.lambda - &center.lambda) * sigma;
    let y = -(qp.ineq_mul(&x.d) + &qp.ineq_residual) + (&x.v - &center.v) * sigma;
    let r3 = y.zip_map(&x.v, |a, b| phi(alpha, a, b));
    Residual { r1, r2, r3, y }
}

/// Semismooth Newton direction at `x` for the residual `res`.
fn newton_direction(
    qp: &QpData,
    x: &Iterate,
    res: &Residual,
    sigma: f64,
    cfg: &QpSolverConfig,
) -> Option<Iterate> {
    let m = qp.n_ineq();
    let mut gamma = DVector::zeros(m);
    let mut denom = DVector::zeros(m);
    for k in 0..m {
        let (ga, gb) = phi_grad(cfg.alpha, res.y[k], x.v[k]);
        gamma[k] = ga;
        denom[k] = ga * sigma + gb;
    }
    let weight = gamma.component_div(&denom);
    let r3_scaled = res.r3.component_div(&denom);
    let rhs_primal = -&res.r1 + qp.ineq_tmul(&r3_scaled);
    let rhs_eq = -&res.r2;
    let sys = NewtonSystem {
        qp,
        sigma,
        ineq_weight: &weight,
    };
    let (dd, dl) = structured_linear_solve(&sys, &rhs_primal, &rhs_eq, cfg.dense_threshold).ok()?;
    let dv = (gamma.component_mul(&qp.ineq_mul(&dd)) - &res.r3).component_div(&denom);
    let dir = Iterate {
        d: dd,
        lambda: dl,
        v: dv,
    };
    dir.is_finite().then_some(dir)
}

enum InnerOutcome {
    Converged,
    Stagnated,
    Solved,
    Budget,
}

/// Solves `min 1/2 d'Hd + f'd  s.t.  G d + g = 0, C d + h <= 0`.
///
/// `warmstart` supplies `(d, lambda, v)` through the `w`, `lambda`, `v`
/// fields; `None` starts from zero. On `MaxIterations` the current iterate is
/// returned, which callers may use as an inexact solution.
pub fn solve_qp(
    qp: &QpData,
    warmstart: Option<&PrimalDualPoint>,
    cfg: &QpSolverConfig,
) -> Result<QpSolution> {
    cfg.validate()?;
    qp.validate()?;
    let mut x = match warmstart {
        Some(z) => {
            check("warmstart primal", qp.n_primal(), z.w.len())?;
            check("warmstart equality duals", qp.n_eq(), z.lambda.len())?;
            check("warmstart inequality duals", qp.n_ineq(), z.v.len())?;
            Iterate {
                d: z.w.clone(),
                lambda: z.lambda.clone(),
                v: z.v.clone(),
            }
        }
        None => Iterate {
            d: DVector::zeros(qp.n_primal()),
            lambda: DVector::zeros(qp.n_eq()),
            v: DVector::zeros(qp.n_ineq()),
        },
    };
    if !qp.is_finite() || !x.is_finite() {
        return Ok(finish(qp, x, QpStatus::NumericalFailure, 0, 0, Vec::new()));
    }

    let mut log = Vec::new();
    let mut sigma = cfg.initial_sigma;
    let mut inner_total = 0usize;
    let mut outer = 0usize;
    let mut kkt = qp.kkt_norm(&x.d, &x.lambda, &x.v);
    if kkt <= cfg.tolerance {
        return Ok(finish(qp, x, QpStatus::Solved, 0, 0, log));
    }

    while outer < cfg.max_outer_iterations {
        outer += 1;
        let center = x.clone();
        let inner_tol = (0.1 * cfg.tolerance).max(0.1 * kkt);
        let mut res = residual(qp, &x, &center, sigma, cfg.alpha);
        let outcome = loop {
            let merit = res.norm_squared();
            if cfg.verbose {
                log.push(QpLogEntry {
                    outer,
                    inner: inner_total,
                    residual: kkt,
                    prox_residual: merit.sqrt(),
                    sigma,
                });
            }
            if kkt <= cfg.tolerance {
                break InnerOutcome::Solved;
            }
            if merit.sqrt() <= inner_tol {
                break InnerOutcome::Converged;
            }
            if inner_total >= cfg.max_inner_iterations {
                break InnerOutcome::Budget;
            }
            let Some(dir) = newton_direction(qp, &x, &res, sigma, cfg) else {
                break InnerOutcome::Stagnated;
            };
            inner_total += 1;
            let mut t = 1.0;
            let accepted = loop {
                let trial = x.axpy(t, &dir);
                let trial_res = residual(qp, &trial, &center, sigma, cfg.alpha);
                let trial_merit = trial_res.norm_squared();
                if trial_merit.is_finite() && trial_merit <= (1.0 - 2e-4 * t) * merit {
                    break Some((trial, trial_res));
                }
                t *= 0.5;
                if t < 1e-10 {
                    break None;
                }
            };
            match accepted {
                Some((trial, trial_res)) => {
                    x = trial;
                    res = trial_res;
                    kkt = qp.kkt_norm(&x.d, &x.lambda, &x.v);
                }
                None => break InnerOutcome::Stagnated,
            }
        };
        match outcome {
            InnerOutcome::Solved => {
                return Ok(finish(qp, x, QpStatus::Solved, outer, inner_total, log));
            }
            InnerOutcome::Budget => break,
            InnerOutcome::Converged => sigma = (0.1 * sigma).max(cfg.sigma_floor),
            InnerOutcome::Stagnated => {
                if sigma >= cfg.sigma_ceiling {
                    break;
                }
                sigma = (10.0 * sigma).min(cfg.sigma_ceiling);
            }
        }
        if !x.is_finite() {
            return Ok(finish(
                qp,
                x,
                QpStatus::NumericalFailure,
                outer,
                inner_total,
                log,
            ));
        }
    }
    Ok(finish(
        qp,
        x,
        QpStatus::MaxIterations,
        outer,
        inner_total,
        log,
    ))
}

fn finish(
    qp: &QpData,
    x: Iterate,
    status: QpStatus,
    outer: usize,
    inner: usize,
    log: Vec<QpLogEntry>,
) -> QpSolution {
    let kkt_norm = if x.is_finite() && qp.is_finite() {
        qp.kkt_norm(&x.d, &x.lambda, &x.v)
    } else {
        f64::NAN
    };
    QpSolution {
        d: x.d,
        lambda: x.lambda,
        v: x.v,
        status,
        kkt_norm,
        outer_iterations: outer,
        inner_iterations: inner,
        log,
    }
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}

/// Loads a QP from its JSON debug dump.
pub fn read_qp_dump(path: &Path) -> Result<QpData> {
    let text = std::fs::read_to_string(path)?;
    let dump = serde_json::from_str(&text)?;
    QpData::from_dump(&dump)
}

pub fn write_qp_dump(qp: &QpData, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, &qp.to_dump())?;
    f.write_all(b"\n")?;
    Ok(())
}
