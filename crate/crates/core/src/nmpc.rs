//! Time-distributed SQP controller.
//!
//! Each sampling instant runs a fixed number `ell` of full-step SQP
//! iterations on the tracking problem and carries the final primal-dual
//! estimate over to the next instant unchanged (`z_{0|k+1} = z_{ell|k}`).

use std::time::{Duration, Instant};

use nalgebra::DVector;

use crate::dynamics::{ControlInput, SpacecraftState, ThreeBodyParams};
use crate::error::{Error, Result};
use crate::integrator::rk4_step;
use crate::ocp::{OcpConfig, OcpProblem, PrimalDualPoint, NC, NU, NX};
use crate::qpsolver::{solve_qp, QpSolution, QpSolverConfig, QpStatus};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ControllerConfig {
    pub ocp: OcpConfig,
    /// SQP iterations per sampling instant.
    pub ell: usize,
    pub qp: QpSolverConfig,
    /// Shift the horizon by one stage between instants instead of reusing
    /// the previous estimate as is.
    pub shift_warmstart: bool,
    /// Prediction model; circular by default regardless of the plant.
    pub model: ThreeBodyParams,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let model = ThreeBodyParams::default().circular();
        Self {
            ocp: OcpConfig {
                horizon: 35,
                q: nalgebra::Matrix6::from_diagonal(&nalgebra::Vector6::new(
                    1e4, 1e4, 1e4, 1e3, 1e3, 1e3,
                )),
                r: nalgebra::Matrix3::identity(),
                u_max: model.thrust_mn_to_nondim(2000.0),
                dtheta: 0.01,
            },
            ell: 3,
            qp: QpSolverConfig::default(),
            shift_warmstart: false,
            model,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        self.ocp.validate()?;
        self.qp.validate()?;
        self.model.validate()?;
        if self.ell == 0 {
            return Err(Error::InvalidInput("ell must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub z: PrimalDualPoint,
    /// Number of completed control steps.
    pub k: usize,
    pub ell: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlDiagnostics {
    pub u: ControlInput,
    /// NLP residual of the persisted estimate for this instant's problem.
    pub kkt_norm: f64,
    pub qp_status: Vec<QpStatus>,
    /// `(outer, inner)` per QP solve.
    pub qp_iterations: Vec<(usize, usize)>,
    /// Largest amount by which the QP iterate exceeded the input bound and
    /// was projected back; zero whenever every QP solved.
    pub bound_violation: f64,
    pub duration: Duration,
}

/// One full SQP step `w += d*, lambda = lambda*, v = v*`, with the QP
/// warmstarted at `d = 0` and the current duals.
pub fn sqp_iterate(
    problem: &OcpProblem,
    z: &PrimalDualPoint,
    qp_cfg: &QpSolverConfig,
) -> Result<(PrimalDualPoint, QpSolution)> {
    let qp = problem.linearize(z)?;
    let ws = PrimalDualPoint {
        w: DVector::zeros(z.w.len()),
        lambda: z.lambda.clone(),
        v: z.v.clone(),
    };
    let sol = solve_qp(&qp, Some(&ws), qp_cfg)?;
    if sol.status == QpStatus::NumericalFailure {
        return Err(Error::QpNumerical(format!(
            "QP subproblem at theta = {} returned non-finite iterate",
            problem.theta_k
        )));
    }
    let next = PrimalDualPoint {
        w: &z.w + &sol.d,
        lambda: sol.lambda.clone(),
        v: sol.v.clone(),
    };
    Ok((next, sol))
}

#[derive(Debug, Clone)]
pub struct Controller {
    pub config: ControllerConfig,
    pub state: ControllerState,
}

impl Controller {
    /// Cold start: primal guess from a zero-input rollout of the prediction
    /// model, duals zero.
    pub fn initialize(
        config: ControllerConfig,
        xi_0: &SpacecraftState,
        theta_0: f64,
        reference: &[SpacecraftState],
    ) -> Result<Self> {
        config.validate()?;
        let problem =
            OcpProblem::new(config.ocp, config.model, *xi_0, theta_0, reference.to_vec())?;
        let z = problem
            .rollout(&vec![ControlInput::zeros(); config.ocp.horizon])
            .map_err(|e| e.context("controller initialization rollout"))?;
        Ok(Self {
            state: ControllerState {
                z,
                k: 0,
                ell: config.ell,
            },
            config,
        })
    }

    /// Runs `ell` SQP iterations for the current instant and returns the
    /// first planned control of the final iterate.
    pub fn step(
        &mut self,
        xi_k: &SpacecraftState,
        theta_k: f64,
        reference: &[SpacecraftState],
    ) -> Result<(ControlInput, ControlDiagnostics)> {
        let start = Instant::now();
        let cfg = &self.config;
        let problem = OcpProblem::new(cfg.ocp, cfg.model, *xi_k, theta_k, reference.to_vec())?;
        let mut z = self.state.z.clone();
        let mut qp_status = Vec::with_capacity(self.state.ell);
        let mut qp_iterations = Vec::with_capacity(self.state.ell);
        for _ in 0..self.state.ell {
            let (next, sol) = sqp_iterate(&problem, &z, &cfg.qp)
                .map_err(|e| e.context(format!("control step {}", self.state.k)))?;
            qp_status.push(sol.status);
            qp_iterations.push(sol.iterations());
            z = next;
        }
        let kkt_norm = problem.kkt_residual(&z)?;
        let planned = z.control(&cfg.ocp, 0);
        let u = planned.map(|c| c.clamp(-cfg.ocp.u_max, cfg.ocp.u_max));
        let bound_violation = (planned - u).amax();
        let next_z = if cfg.shift_warmstart {
            shift_horizon(&cfg.ocp, &cfg.model, theta_k, &z)?
        } else {
            z
        };
        self.state.z = next_z;
        self.state.k += 1;
        let diag = ControlDiagnostics {
            u,
            kkt_norm,
            qp_status,
            qp_iterations,
            bound_violation,
            duration: start.elapsed(),
        };
        Ok((u, diag))
    }
}

/// Moves every stage one step earlier; the last state is extended with the
/// model under a repeated final control and the trailing duals are copied.
pub fn shift_horizon(
    cfg: &OcpConfig,
    model: &ThreeBodyParams,
    theta_k: f64,
    z: &PrimalDualPoint,
) -> Result<PrimalDualPoint> {
    let n = cfg.horizon;
    let mut out = z.clone();
    for i in 0..n {
        let next = z.w.fixed_rows::<NX>(cfg.state_offset(i + 1)).into_owned();
        out.w
            .fixed_rows_mut::<NX>(cfg.state_offset(i))
            .copy_from(&next);
        let lam = z.lambda.fixed_rows::<NX>(NX * (i + 1)).into_owned();
        out.lambda.fixed_rows_mut::<NX>(NX * i).copy_from(&lam);
    }
    for i in 0..n.saturating_sub(1) {
        let u = z.w.fixed_rows::<NU>(cfg.control_offset(i + 1)).into_owned();
        out.w
            .fixed_rows_mut::<NU>(cfg.control_offset(i))
            .copy_from(&u);
        let v = z.v.fixed_rows::<NC>(NC * (i + 1)).into_owned();
        out.v.fixed_rows_mut::<NC>(NC * i).copy_from(&v);
    }
    let last_u = z.control(cfg, n - 1);
    let theta_n = theta_k + (n + 1) as f64 * cfg.dtheta;
    let tail = rk4_step(
        theta_n - cfg.dtheta,
        &z.state(cfg, n),
        &last_u,
        cfg.dtheta,
        model,
    )?;
    out.w
        .fixed_rows_mut::<NX>(cfg.state_offset(n))
        .copy_from(&tail);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::propagate;
    use nalgebra::{DMatrix, Vector3, Vector6};

    fn x0() -> SpacecraftState {
        Vector6::new(0.9878, 0.0, 0.0275, 0.0, 0.8969, 0.0)
    }

    fn natural_reference(n: usize) -> Vec<SpacecraftState> {
        let model = ThreeBodyParams::default();
        propagate(0.0, &x0(), &vec![Vector3::zeros(); n], 0.01, &model).unwrap()
    }

    fn config(n: usize) -> ControllerConfig {
        let mut c = ControllerConfig::default();
        c.ocp.horizon = n;
        c
    }

    fn offset() -> SpacecraftState {
        Vector6::new(1e-3, -5e-4, 5e-4, 2e-3, 0.0, -2e-3)
    }

    #[test]
    fn default_matches_parameter_table() {
        let c = ControllerConfig::default();
        assert_eq!(c.ell, 3);
        assert_eq!(c.ocp.horizon, 35);
        assert_eq!(c.model.e, 0.0);
        assert!((c.ocp.u_max - 0.07324).abs() < 1e-4);
        assert!(c.validate().is_ok());
        assert!(ControllerConfig { ell: 0, ..c }.validate().is_err());
    }

    #[test]
    fn initialization_is_dynamically_feasible() {
        let reference = natural_reference(10);
        let xi = x0() + offset();
        let ctl = Controller::initialize(config(10), &xi, 0.0, &reference).unwrap();
        let p = OcpProblem::new(ctl.config.ocp, ctl.config.model, xi, 0.0, reference).unwrap();
        let (g, _) = p.eval_constraints(&ctl.state.z.w).unwrap();
        assert_eq!(g.amax(), 0.0);
        assert_eq!(ctl.state.z.lambda.amax(), 0.0);
        assert_eq!(ctl.state.z.v.amax(), 0.0);
    }

    #[test]
    fn on_reference_gives_zero_control() {
        let reference = natural_reference(20);
        let mut ctl = Controller::initialize(config(20), &x0(), 0.0, &reference).unwrap();
        let (u, diag) = ctl.step(&x0(), 0.0, &reference).unwrap();
        assert!(u.amax() <= 1e-9);
        assert!(diag.kkt_norm <= 1e-9);
        assert_eq!(diag.qp_status.len(), 3);
    }

    #[test]
    fn kkt_point_is_fixed() {
        let reference = natural_reference(8);
        let cfg = config(8);
        let xi = x0() + offset();
        let p = OcpProblem::new(cfg.ocp, cfg.model, xi, 0.0, reference.clone()).unwrap();
        let mut z = Controller::initialize(cfg, &xi, 0.0, &reference)
            .unwrap()
            .state
            .z;
        for _ in 0..40 {
            z = sqp_iterate(&p, &z, &cfg.qp).unwrap().0;
        }
        assert!(p.kkt_residual(&z).unwrap() < 1e-8);
        let (next, sol) = sqp_iterate(&p, &z, &cfg.qp).unwrap();
        assert!(sol.d.amax() < 1e-8);
        assert!((&next.w - &z.w).amax() < 1e-8);
    }

    #[test]
    fn residual_decreases_over_three_iterations() {
        let cfg = ControllerConfig::default();
        let n = cfg.ocp.horizon;
        let reference = natural_reference(n);
        let xi = x0() + offset() * 0.2;
        let p = OcpProblem::new(cfg.ocp, cfg.model, xi, 0.0, reference.clone()).unwrap();
        let mut z = Controller::initialize(cfg, &xi, 0.0, &reference)
            .unwrap()
            .state
            .z;
        let mut prev = p.kkt_residual(&z).unwrap();
        for _ in 0..3 {
            z = sqp_iterate(&p, &z, &cfg.qp).unwrap().0;
            let r = p.kkt_residual(&z).unwrap();
            assert!(r < prev, "{r} !< {prev}");
            prev = r;
        }
    }

    #[test]
    fn step_matches_manual_iteration() {
        let reference = natural_reference(10);
        let xi = x0() + offset();
        let mut cfg = config(10);
        cfg.ell = 2;
        let mut ctl = Controller::initialize(cfg, &xi, 0.0, &reference).unwrap();
        let mut z = ctl.state.z.clone();
        ctl.step(&xi, 0.0, &reference).unwrap();
        ctl.state.ell = 3;
        let xi2 = xi + offset() * 0.1;
        let (u, _) = ctl.step(&xi2, 0.01, &reference).unwrap();

        let p1 = OcpProblem::new(cfg.ocp, cfg.model, xi, 0.0, reference.clone()).unwrap();
        for _ in 0..2 {
            z = sqp_iterate(&p1, &z, &cfg.qp).unwrap().0;
        }
        let p2 = OcpProblem::new(cfg.ocp, cfg.model, xi2, 0.01, reference).unwrap();
        for _ in 0..3 {
            z = sqp_iterate(&p2, &z, &cfg.qp).unwrap().0;
        }
        assert_eq!(ctl.state.z, z);
        assert_eq!(
            u,
            z.control(&cfg.ocp, 0)
                .map(|c| c.clamp(-cfg.ocp.u_max, cfg.ocp.u_max))
        );
    }

    #[test]
    fn reported_residual_matches_persisted_estimate() {
        let reference = natural_reference(10);
        let xi = x0() + offset();
        let mut ctl = Controller::initialize(config(10), &xi, 0.0, &reference).unwrap();
        let (_, diag) = ctl.step(&xi, 0.0, &reference).unwrap();
        let p = OcpProblem::new(ctl.config.ocp, ctl.config.model, xi, 0.0, reference).unwrap();
        assert_eq!(diag.kkt_norm, p.kkt_residual(&ctl.state.z).unwrap());
    }

    #[test]
    fn large_offset_respects_bounds() {
        let cfg = ControllerConfig::default();
        let reference = natural_reference(cfg.ocp.horizon);
        let dr = cfg.model.km_to_lu(500.0);
        let xi = x0() + Vector6::new(dr, -dr, dr, 0.0, 0.0, 0.0);
        let mut ctl = Controller::initialize(cfg, &xi, 0.0, &reference).unwrap();
        let (u, diag) = ctl.step(&xi, 0.0, &reference).unwrap();
        assert!(u.iter().all(|c| c.is_finite()));
        assert!(u.amax() <= cfg.ocp.u_max + 1e-8);
        assert!(diag.bound_violation <= 1e-8);
    }

    #[test]
    fn shift_moves_stages() {
        let cfg = config(4);
        let reference = natural_reference(4);
        let model = cfg.model;
        let us: Vec<_> = (0..4)
            .map(|i| Vector3::new(0.01 * i as f64, 0.0, 0.0))
            .collect();
        let p = OcpProblem::new(cfg.ocp, model, x0(), 0.0, reference).unwrap();
        let z = p.rollout(&us).unwrap();
        let s = shift_horizon(&cfg.ocp, &model, 0.0, &z).unwrap();
        assert_eq!(s.state(&cfg.ocp, 0), z.state(&cfg.ocp, 1));
        assert_eq!(s.control(&cfg.ocp, 2), z.control(&cfg.ocp, 3));
        assert_eq!(s.control(&cfg.ocp, 3), z.control(&cfg.ocp, 3));
        // the shifted trajectory stays dynamically consistent from theta = dtheta
        let p2 = OcpProblem::new(
            cfg.ocp,
            model,
            z.state(&cfg.ocp, 1),
            0.01,
            natural_reference(4),
        )
        .unwrap();
        let (g, _) = p2.eval_constraints(&s.w).unwrap();
        assert!(g.amax() < 1e-14);
    }

    /// Dense SQP with finite-difference Jacobians, bound handling by a
    /// primal active-set loop over fixed controls, and an l1 merit line
    /// search.
    fn dense_sqp_oracle(p: &OcpProblem, w0: &DVector<f64>) -> DVector<f64> {
        let cfg = &p.config;
        let n = cfg.n_primal();
        let m = cfg.n_eq();
        let u_lo = NX * (cfg.horizon + 1);
        let hess = {
            let mut h = DMatrix::zeros(n, n);
            for i in 0..=cfg.horizon {
                h.view_mut((NX * i, NX * i), (NX, NX)).copy_from(&cfg.q);
            }
            for i in 0..cfg.horizon {
                h.view_mut((u_lo + NU * i, u_lo + NU * i), (NU, NU))
                    .copy_from(&cfg.r);
            }
            h
        };
        let merit = |w: &DVector<f64>| {
            let (g, _) = p.eval_constraints(w).unwrap();
            p.eval_cost(w).unwrap() + 1e6 * g.iter().map(|x| x.abs()).sum::<f64>()
        };
        let mut w = w0.clone();
        for _ in 0..200 {
            let (g, _) = p.eval_constraints(&w).unwrap();
            let grad = p.cost_gradient(&w).unwrap();
            let mut jac = DMatrix::zeros(m, n);
            for j in 0..n {
                let h = 1e-7;
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[j] += h;
                wm[j] -= h;
                let col = (p.eval_constraints(&wp).unwrap().0 - p.eval_constraints(&wm).unwrap().0)
                    / (2.0 * h);
                jac.set_column(j, &col);
            }
            // active set: control components pinned at a bound
            let mut fixed: Vec<(usize, f64)> = Vec::new();
            let d = loop {
                let k = fixed.len();
                let dim = n + m + k;
                let mut kkt = DMatrix::zeros(dim, dim);
                let mut rhs = DVector::zeros(dim);
                kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
                kkt.view_mut((0, n), (n, m)).copy_from(&jac.transpose());
                kkt.view_mut((n, 0), (m, n)).copy_from(&jac);
                rhs.rows_mut(0, n).copy_from(&(-&grad));
                rhs.rows_mut(n, m).copy_from(&(-&g));
                for (r, &(j, bound)) in fixed.iter().enumerate() {
                    kkt[(n + m + r, j)] = 1.0;
                    kkt[(j, n + m + r)] = 1.0;
                    rhs[n + m + r] = bound - w[j];
                }
                let sol = kkt.lu().solve(&rhs).unwrap();
                let d = sol.rows(0, n).into_owned();
                // release a bound whose multiplier pushes into the interior
                let release = fixed
                    .iter()
                    .enumerate()
                    .position(|(r, &(_, bound))| sol[n + m + r] * bound.signum() < -1e-12);
                if let Some(r) = release {
                    fixed.remove(r);
                    continue;
                }
                let worst = (u_lo..n)
                    .filter(|j| fixed.iter().all(|f| f.0 != *j))
                    .map(|j| (j, (w[j] + d[j]).abs() - cfg.u_max))
                    .filter(|&(_, viol)| viol > 1e-12)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                match worst {
                    Some((j, _)) => fixed.push((j, cfg.u_max.copysign(w[j] + d[j]))),
                    None => break d,
                }
            };
            if d.amax() < 1e-12 {
                break;
            }
            let m0 = merit(&w);
            let mut t = 1.0;
            while merit(&(&w + &d * t)) > m0 - 1e-4 * t * d.norm_squared() && t > 1e-6 {
                t *= 0.5;
            }
            w += &d * t;
        }
        w
    }

    #[test]
    fn converged_sqp_matches_dense_oracle() {
        for u_max in [1.0, 0.02] {
            let mut cfg = config(5);
            cfg.ocp.u_max = u_max;
            let reference = natural_reference(5);
            let xi = x0() + offset();
            let p = OcpProblem::new(cfg.ocp, cfg.model, xi, 0.0, reference.clone()).unwrap();
            let z0 = Controller::initialize(cfg, &xi, 0.0, &reference)
                .unwrap()
                .state
                .z;
            let oracle = dense_sqp_oracle(&p, &z0.w);
            let mut z = z0;
            for _ in 0..100 {
                z = sqp_iterate(&p, &z, &cfg.qp).unwrap().0;
            }
            let err = (&z.w - &oracle).amax();
            assert!(err < 1e-6, "u_max {u_max}: {err:e}");
            let saturated = (NX * 6..z.w.len()).any(|j| (z.w[j].abs() - u_max).abs() < 1e-9);
            assert_eq!(saturated, u_max < 0.1);
        }
    }
}
