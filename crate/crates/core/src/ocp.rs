//! The horizon-N tracking problem as a structured NLP in multiple-shooting
//! form, and its QP linearization.
//!
//! Decision vector layout: `w = (xi_0, ..., xi_N, u_0, ..., u_{N-1})`.
//! Equalities: `g_0 = xi_0 - xi_k`, `g_{i+1} = xi_{i+1} - f(theta_i, xi_i, u_i)`.
//! Inequalities per stage: `u_i - u_max <= 0` and `-u_i - u_max <= 0`.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6x3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, SpacecraftState, ThreeBodyParams};
use crate::error::{Error, Result};
use crate::integrator::{rk4_step, rk4_step_with_sensitivities};

pub const NX: usize = 6;
pub const NU: usize = 3;
/// One-sided inequality rows per stage.
pub const NC: usize = 2 * NU;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcpConfig {
    pub horizon: usize,
    /// State weight, also used for the terminal term.
    pub q: Matrix6<f64>,
    pub r: Matrix3<f64>,
    /// Bound on `|u_i|_inf` in nondimensional acceleration.
    pub u_max: f64,
    pub dtheta: f64,
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidInput("horizon must be positive".into()));
        }
        if !(self.u_max > 0.0) || !(self.dtheta > 0.0) {
            return Err(Error::InvalidInput(
                "u_max and dtheta must be positive".into(),
            ));
        }
        if self.q != self.q.transpose() || self.q.cholesky().is_none() {
            return Err(Error::InvalidInput(
                "Q must be symmetric positive definite".into(),
            ));
        }
        if self.r != self.r.transpose() || self.r.cholesky().is_none() {
            return Err(Error::InvalidInput(
                "R must be symmetric positive definite".into(),
            ));
        }
        Ok(())
    }

    pub fn n_primal(&self) -> usize {
        NX * (self.horizon + 1) + NU * self.horizon
    }

    pub fn n_eq(&self) -> usize {
        NX * (self.horizon + 1)
    }

    pub fn n_ineq(&self) -> usize {
        NC * self.horizon
    }

    pub fn state_offset(&self, i: usize) -> usize {
        NX * i
    }

    pub fn control_offset(&self, i: usize) -> usize {
        NX * (self.horizon + 1) + NU * i
    }
}

/// Primal-dual triple `(w, lambda, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalDualPoint {
    pub w: DVector<f64>,
    pub lambda: DVector<f64>,
    pub v: DVector<f64>,
}

impl PrimalDualPoint {
    pub fn zeros(cfg: &OcpConfig) -> Self {
        Self {
            w: DVector::zeros(cfg.n_primal()),
            lambda: DVector::zeros(cfg.n_eq()),
            v: DVector::zeros(cfg.n_ineq()),
        }
    }

    /// Packs `N + 1` states and `N` controls with zero multipliers.
    pub fn from_trajectory(
        cfg: &OcpConfig,
        states: &[SpacecraftState],
        controls: &[ControlInput],
    ) -> Result<Self> {
        check_len("states", cfg.horizon + 1, states.len())?;
        check_len("controls", cfg.horizon, controls.len())?;
        let mut z = Self::zeros(cfg);
        for (i, s) in states.iter().enumerate() {
            z.w.rows_mut(cfg.state_offset(i), NX).copy_from(s);
        }
        for (i, u) in controls.iter().enumerate() {
            z.w.rows_mut(cfg.control_offset(i), NU).copy_from(u);
        }
        Ok(z)
    }

    pub fn check_dims(&self, cfg: &OcpConfig) -> Result<()> {
        check_len("w", cfg.n_primal(), self.w.len())?;
        check_len("lambda", cfg.n_eq(), self.lambda.len())?;
        check_len("v", cfg.n_ineq(), self.v.len())
    }

    pub fn state(&self, cfg: &OcpConfig, i: usize) -> SpacecraftState {
        self.w.fixed_rows::<NX>(cfg.state_offset(i)).into_owned()
    }

    pub fn control(&self, cfg: &OcpConfig, i: usize) -> ControlInput {
        self.w.fixed_rows::<NU>(cfg.control_offset(i)).into_owned()
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Stage-structured QP
/// `min 1/2 d'Hd + f'd  s.t.  G d + g = 0,  C d + h <= 0`
/// where `H = blkdiag(Q, ..., Q, R, ..., R)`, `G` has the banded
/// multiple-shooting pattern and `C` acts on each control separately.
#[derive(Debug, Clone, PartialEq)]
pub struct QpData {
    pub horizon: usize,
    pub q: Matrix6<f64>,
    pub r: Matrix3<f64>,
    pub gradient: DVector<f64>,
    /// `d f / d xi` per stage.
    pub a: Vec<Matrix6<f64>>,
    /// `d f / d u` per stage.
    pub b: Vec<Matrix6x3<f64>>,
    pub eq_residual: DVector<f64>,
    /// Inequality Jacobian per stage with respect to `u_i`.
    pub c: Vec<Matrix6x3<f64>>,
    pub ineq_residual: DVector<f64>,
}

/// `[I; -I]`, the two-sided box as one-sided rows.
pub fn box_rows() -> Matrix6x3<f64> {
    let mut c = Matrix6x3::zeros();
    c.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&Matrix3::identity());
    c.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-Matrix3::identity()));
    c
}

/// Dense rendering of a [`QpData`] for oracles and small solves.
#[derive(Debug, Clone)]
pub struct DenseQp {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub eq_jac: DMatrix<f64>,
    pub eq_residual: DVector<f64>,
    pub ineq_jac: DMatrix<f64>,
    pub ineq_residual: DVector<f64>,
}

impl QpData {
    pub fn n_primal(&self) -> usize {
        NX * (self.horizon + 1) + NU * self.horizon
    }

    pub fn n_eq(&self) -> usize {
        NX * (self.horizon + 1)
    }

    pub fn n_ineq(&self) -> usize {
        NC * self.horizon
    }

    fn xo(&self, i: usize) -> usize {
        NX * i
    }

    fn uo(&self, i: usize) -> usize {
        NX * (self.horizon + 1) + NU * i
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.horizon;
        check_len("gradient", self.n_primal(), self.gradient.len())?;
        check_len("A blocks", n, self.a.len())?;
        check_len("B blocks", n, self.b.len())?;
        check_len("C blocks", n, self.c.len())?;
        check_len("equality residual", self.n_eq(), self.eq_residual.len())?;
        check_len(
            "inequality residual",
            self.n_ineq(),
            self.ineq_residual.len(),
        )
    }

    pub fn is_finite(&self) -> bool {
        let mats = self.q.iter().chain(self.r.iter());
        let vecs = self
            .gradient
            .iter()
            .chain(self.eq_residual.iter())
            .chain(self.ineq_residual.iter());
        let blocks = self
            .a
            .iter()
            .flat_map(|m| m.iter())
            .chain(self.b.iter().flat_map(|m| m.iter()))
            .chain(self.c.iter().flat_map(|m| m.iter()));
        mats.chain(vecs).chain(blocks).all(|v| v.is_finite())
    }

    pub fn hess_mul(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_primal());
        for i in 0..=self.horizon {
            let o = self.xo(i);
            out.fixed_rows_mut::<NX>(o)
                .copy_from(&(self.q * d.fixed_rows::<NX>(o)));
        }
        for i in 0..self.horizon {
            let o = self.uo(i);
            out.fixed_rows_mut::<NU>(o)
                .copy_from(&(self.r * d.fixed_rows::<NU>(o)));
        }
        out
    }

    /// `G d`.
    pub fn eq_mul(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_eq());
        out.fixed_rows_mut::<NX>(0)
            .copy_from(&d.fixed_rows::<NX>(0));
        for i in 0..self.horizon {
            let row = d.fixed_rows::<NX>(self.xo(i + 1))
                - self.a[i] * d.fixed_rows::<NX>(self.xo(i))
                - self.b[i] * d.fixed_rows::<NU>(self.uo(i));
            out.fixed_rows_mut::<NX>(NX * (i + 1)).copy_from(&row);
        }
        out
    }

    /// `G' lambda`.
    pub fn eq_tmul(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_primal());
        for i in 0..=self.horizon {
            let mut blk = lambda.fixed_rows::<NX>(NX * i).into_owned();
            if i < self.horizon {
                blk -= self.a[i].transpose() * lambda.fixed_rows::<NX>(NX * (i + 1));
                let ublk = -(self.b[i].transpose() * lambda.fixed_rows::<NX>(NX * (i + 1)));
                out.fixed_rows_mut::<NU>(self.uo(i)).copy_from(&ublk);
            }
            out.fixed_rows_mut::<NX>(self.xo(i)).copy_from(&blk);
        }
        out
    }

    /// `C d`.
    pub fn ineq_mul(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_ineq());
        for i in 0..self.horizon {
            out.fixed_rows_mut::<NC>(NC * i)
                .copy_from(&(self.c[i] * d.fixed_rows::<NU>(self.uo(i))));
        }
        out
    }

    /// `C' v`.
    pub fn ineq_tmul(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_primal());
        for i in 0..self.horizon {
            out.fixed_rows_mut::<NU>(self.uo(i))
                .copy_from(&(self.c[i].transpose() * v.fixed_rows::<NC>(NC * i)));
        }
        out
    }

    /// Natural KKT residual of the QP at `(d, lambda, v)`: stationarity,
    /// equality feasibility and `min(v, -(Cd + h))`.
    pub fn kkt_norm(&self, d: &DVector<f64>, lambda: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let stat = self.hess_mul(d) + &self.gradient + self.eq_tmul(lambda) + self.ineq_tmul(v);
        let feas = self.eq_mul(d) + &self.eq_residual;
        let slack = -(self.ineq_mul(d) + &self.ineq_residual);
        let comp = v.zip_map(&slack, f64::min);
        (stat.norm_squared() + feas.norm_squared() + comp.norm_squared()).sqrt()
    }

    pub fn to_dense(&self) -> DenseQp {
        let n = self.n_primal();
        let mut hessian = DMatrix::zeros(n, n);
        let mut eq_jac = DMatrix::zeros(self.n_eq(), n);
        let mut ineq_jac = DMatrix::zeros(self.n_ineq(), n);
        for i in 0..=self.horizon {
            let o = self.xo(i);
            hessian.fixed_view_mut::<NX, NX>(o, o).copy_from(&self.q);
            eq_jac
                .fixed_view_mut::<NX, NX>(NX * i, o)
                .copy_from(&Matrix6::identity());
        }
        for i in 0..self.horizon {
            let o = self.uo(i);
            hessian.fixed_view_mut::<NU, NU>(o, o).copy_from(&self.r);
            eq_jac
                .fixed_view_mut::<NX, NX>(NX * (i + 1), self.xo(i))
                .copy_from(&(-self.a[i]));
            eq_jac
                .fixed_view_mut::<NX, NU>(NX * (i + 1), o)
                .copy_from(&(-self.b[i]));
            ineq_jac
                .fixed_view_mut::<NC, NU>(NC * i, o)
                .copy_from(&self.c[i]);
        }
        DenseQp {
            hessian,
            gradient: self.gradient.clone(),
            eq_jac,
            eq_residual: self.eq_residual.clone(),
            ineq_jac,
            ineq_residual: self.ineq_residual.clone(),
        }
    }

    pub fn to_dump(&self) -> QpDump {
        fn rows<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::RawStorage<f64, R, C>>(
            m: &nalgebra::Matrix<f64, R, C, S>,
        ) -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                .collect()
        }
        QpDump {
            format: QP_DUMP_FORMAT.to_string(),
            horizon: self.horizon,
            nx: NX,
            nu: NU,
            n_primal: self.n_primal(),
            n_eq: self.n_eq(),
            n_ineq: self.n_ineq(),
            q: rows(&self.q),
            r: rows(&self.r),
            gradient: self.gradient.iter().copied().collect(),
            a: self.a.iter().map(rows).collect(),
            b: self.b.iter().map(rows).collect(),
            c: self.c.iter().map(rows).collect(),
            eq_residual: self.eq_residual.iter().copied().collect(),
            ineq_residual: self.ineq_residual.iter().copied().collect(),
        }
    }

    pub fn from_dump(dump: &QpDump) -> Result<Self> {
        if dump.nx != NX || dump.nu != NU {
            return Err(Error::InvalidInput(format!(
                "dump has nx = {}, nu = {}; expected {NX}, {NU}",
                dump.nx, dump.nu
            )));
        }
        fn mat<const R: usize, const C: usize>(
            rows: &[Vec<f64>],
        ) -> Result<nalgebra::SMatrix<f64, R, C>> {
            if rows.len() != R || rows.iter().any(|r| r.len() != C) {
                return Err(Error::InvalidInput(format!("expected a {R}x{C} block")));
            }
            Ok(nalgebra::SMatrix::from_fn(|i, j| rows[i][j]))
        }
        let qp = Self {
            horizon: dump.horizon,
            q: mat(&dump.q)?,
            r: mat(&dump.r)?,
            gradient: DVector::from_vec(dump.gradient.clone()),
            a: dump.a.iter().map(|m| mat(m)).collect::<Result<_>>()?,
            b: dump.b.iter().map(|m| mat(m)).collect::<Result<_>>()?,
            eq_residual: DVector::from_vec(dump.eq_residual.clone()),
            c: dump.c.iter().map(|m| mat(m)).collect::<Result<_>>()?,
            ineq_residual: DVector::from_vec(dump.ineq_residual.clone()),
        };
        qp.validate()?;
        Ok(qp)
    }
}

pub const QP_DUMP_FORMAT: &str = "halo-nmpc qp v1";

/// JSON debug dump of a [`QpData`]. Matrices are row-major nested arrays;
/// vectors follow the `(xi_0..xi_N, u_0..u_{N-1})` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpDump {
    pub format: String,
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    pub n_primal: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub gradient: Vec<f64>,
    pub a: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<Vec<f64>>>,
    pub c: Vec<Vec<Vec<f64>>>,
    pub eq_residual: Vec<f64>,
    pub ineq_residual: Vec<f64>,
}

/// One OCP instance: configuration, prediction model, measured state and the
/// reference window `xi_bar_0..xi_bar_N`.
#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub config: OcpConfig,
    pub model: ThreeBodyParams,
    pub xi_k: SpacecraftState,
    pub theta_k: f64,
    pub reference: Vec<SpacecraftState>,
}

impl OcpProblem {
    pub fn new(
        config: OcpConfig,
        model: ThreeBodyParams,
        xi_k: SpacecraftState,
        theta_k: f64,
        reference: Vec<SpacecraftState>,
    ) -> Result<Self> {
        config.validate()?;
        check_len("reference window", config.horizon + 1, reference.len())?;
        Ok(Self {
            config,
            model,
            xi_k,
            theta_k,
            reference,
        })
    }

    fn stage_theta(&self, i: usize) -> f64 {
        self.theta_k + i as f64 * self.config.dtheta
    }

    /// `1/2 sum_{i<N} (|xi_i - ref_i|_Q^2 + |u_i|_R^2) + 1/2 |xi_N - ref_N|_Q^2`.
    pub fn eval_cost(&self, w: &DVector<f64>) -> Result<f64> {
        let cfg = &self.config;
        check_len("w", cfg.n_primal(), w.len())?;
        let mut cost = 0.0;
        for i in 0..=cfg.horizon {
            let e = w.fixed_rows::<NX>(cfg.state_offset(i)) - self.reference[i];
            cost += e.dot(&(cfg.q * e));
        }
        for i in 0..cfg.horizon {
            let u = w.fixed_rows::<NU>(cfg.control_offset(i));
            cost += u.dot(&(cfg.r * u));
        }
        Ok(0.5 * cost)
    }

    pub fn cost_gradient(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let cfg = &self.config;
        check_len("w", cfg.n_primal(), w.len())?;
        let mut grad = DVector::zeros(cfg.n_primal());
        for i in 0..=cfg.horizon {
            let o = cfg.state_offset(i);
            let e = w.fixed_rows::<NX>(o) - self.reference[i];
            grad.fixed_rows_mut::<NX>(o).copy_from(&(cfg.q * e));
        }
        for i in 0..cfg.horizon {
            let o = cfg.control_offset(i);
            grad.fixed_rows_mut::<NU>(o)
                .copy_from(&(cfg.r * w.fixed_rows::<NU>(o)));
        }
        Ok(grad)
    }

    /// Equality residual `g` and inequality residual `h`.
    pub fn eval_constraints(&self, w: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let cfg = &self.config;
        check_len("w", cfg.n_primal(), w.len())?;
        let mut g = DVector::zeros(cfg.n_eq());
        let mut h = DVector::zeros(cfg.n_ineq());
        g.fixed_rows_mut::<NX>(0)
            .copy_from(&(w.fixed_rows::<NX>(0) - self.xi_k));
        for i in 0..cfg.horizon {
            let xi = w.fixed_rows::<NX>(cfg.state_offset(i)).into_owned();
            let u = w.fixed_rows::<NU>(cfg.control_offset(i)).into_owned();
            let next = rk4_step(self.stage_theta(i), &xi, &u, cfg.dtheta, &self.model)?;
            g.fixed_rows_mut::<NX>(NX * (i + 1))
                .copy_from(&(w.fixed_rows::<NX>(cfg.state_offset(i + 1)) - next));
            h.fixed_rows_mut::<NC>(NC * i)
                .copy_from(&box_residual(&u, cfg.u_max));
        }
        Ok((g, h))
    }

    /// QP subproblem at `z`: exact (constant) cost Hessian, cost gradient,
    /// and constraint Jacobians from the RK4 sensitivities.
    pub fn linearize(&self, z: &PrimalDualPoint) -> Result<QpData> {
        let cfg = &self.config;
        z.check_dims(cfg)?;
        let mut a = Vec::with_capacity(cfg.horizon);
        let mut b = Vec::with_capacity(cfg.horizon);
        let mut g = DVector::zeros(cfg.n_eq());
        let mut h = DVector::zeros(cfg.n_ineq());
        g.fixed_rows_mut::<NX>(0)
            .copy_from(&(z.w.fixed_rows::<NX>(0) - self.xi_k));
        for i in 0..cfg.horizon {
            let xi = z.state(cfg, i);
            let u = z.control(cfg, i);
            let step =
                rk4_step_with_sensitivities(self.stage_theta(i), &xi, &u, cfg.dtheta, &self.model)?;
            g.fixed_rows_mut::<NX>(NX * (i + 1))
                .copy_from(&(z.state(cfg, i + 1) - step.next_state));
            h.fixed_rows_mut::<NC>(NC * i)
                .copy_from(&box_residual(&u, cfg.u_max));
            a.push(step.state_sensitivity);
            b.push(step.control_sensitivity);
        }
        Ok(QpData {
            horizon: cfg.horizon,
            q: cfg.q,
            r: cfg.r,
            gradient: self.cost_gradient(&z.w)?,
            a,
            b,
            eq_residual: g,
            c: vec![box_rows(); cfg.horizon],
            ineq_residual: h,
        })
    }

    /// `|F|` for the NLP at `z`: stationarity of the Lagrangian, equality
    /// residual and `min(v, -h)`.
    pub fn kkt_residual(&self, z: &PrimalDualPoint) -> Result<f64> {
        let qp = self.linearize(z)?;
        let zero = DVector::zeros(qp.n_primal());
        Ok(qp.kkt_norm(&zero, &z.lambda, &z.v))
    }

    /// Dynamically feasible primal guess from rolling the model forward.
    pub fn rollout(&self, controls: &[ControlInput]) -> Result<PrimalDualPoint> {
        let cfg = &self.config;
        check_len("controls", cfg.horizon, controls.len())?;
        let states = crate::integrator::propagate(
            self.theta_k,
            &self.xi_k,
            controls,
            cfg.dtheta,
            &self.model,
        )?;
        PrimalDualPoint::from_trajectory(cfg, &states, controls)
    }
}

fn box_residual(u: &Vector3<f64>, u_max: f64) -> nalgebra::Vector6<f64> {
    nalgebra::Vector6::new(
        u.x - u_max,
        u.y - u_max,
        u.z - u_max,
        -u.x - u_max,
        -u.y - u_max,
        -u.z - u_max,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Vector3, Vector6};

    fn config(n: usize) -> OcpConfig {
        OcpConfig {
            horizon: n,
            q: Matrix6::from_diagonal(&Vector6::new(1e4, 1e4, 1e4, 1e3, 1e3, 1e3)),
            r: Matrix3::identity(),
            u_max: 0.07,
            dtheta: 0.01,
        }
    }

    fn problem(n: usize) -> OcpProblem {
        let x0 = Vector6::new(0.9878, 0.0, 0.0275, 0.0, 0.8969, 0.0);
        let model = ThreeBodyParams::default();
        let zeros = vec![Vector3::zeros(); n];
        let reference = crate::integrator::propagate(0.0, &x0, &zeros, 0.01, &model).unwrap();
        OcpProblem::new(config(n), model, x0, 0.0, reference).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(config(3).validate().is_ok());
        let mut bad = config(3);
        bad.q[(0, 1)] = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = config(3);
        bad.r = -Matrix3::identity();
        assert!(bad.validate().is_err());
        assert!(OcpConfig {
            horizon: 0,
            ..config(3)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn cost_zero_on_reference() {
        let p = problem(4);
        let z = p.rollout(&[Vector3::zeros(); 4]).unwrap();
        assert_eq!(p.eval_cost(&z.w).unwrap(), 0.0);
    }

    #[test]
    fn cost_sign_flip_invariance() {
        let p = problem(3);
        let cfg = &p.config;
        let mut plus = p.rollout(&[Vector3::new(0.01, 0.0, -0.02); 3]).unwrap();
        let mut minus = plus.clone();
        for i in 0..=3 {
            let e = Vector6::new(1e-3, -2e-3, 5e-4, 0.0, 1e-3, -1e-3) * (i as f64 + 1.0);
            let o = cfg.state_offset(i);
            let base = p.reference[i];
            plus.w.fixed_rows_mut::<6>(o).copy_from(&(base + e));
            minus.w.fixed_rows_mut::<6>(o).copy_from(&(base - e));
        }
        for i in 0..3 {
            let o = cfg.control_offset(i);
            let u = minus.w.fixed_rows::<3>(o).into_owned();
            minus.w.fixed_rows_mut::<3>(o).copy_from(&(-u));
        }
        let a = p.eval_cost(&plus.w).unwrap();
        let b = p.eval_cost(&minus.w).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn constraints_on_rollout() {
        let p = problem(5);
        let us = vec![Vector3::new(0.01, -0.03, 0.0); 5];
        let z = p.rollout(&us).unwrap();
        let (g, _) = p.eval_constraints(&z.w).unwrap();
        assert_eq!(g.amax(), 0.0);
        let z0 = p.rollout(&[Vector3::zeros(); 5]).unwrap();
        let (_, h) = p.eval_constraints(&z0.w).unwrap();
        assert!(h.iter().all(|&x| x == -p.config.u_max));
        let mut at_bound = vec![Vector3::zeros(); 5];
        at_bound[2].y = p.config.u_max;
        let zb = p.rollout(&at_bound).unwrap();
        let (_, h) = p.eval_constraints(&zb.w).unwrap();
        assert_eq!(h[NC * 2 + 1], 0.0);
        assert_eq!(h[NC * 2 + 4], -2.0 * p.config.u_max);
    }

    #[test]
    fn natural_motion_is_stationary() {
        let p = problem(6);
        let z = p.rollout(&[Vector3::zeros(); 6]).unwrap();
        assert_eq!(p.kkt_residual(&z).unwrap(), 0.0);
    }

    #[test]
    fn hessian_constant_and_jacobians_match_sensitivities() {
        let p = problem(3);
        let z1 = p.rollout(&[Vector3::zeros(); 3]).unwrap();
        let z2 = p.rollout(&[Vector3::new(0.02, 0.01, -0.01); 3]).unwrap();
        let q1 = p.linearize(&z1).unwrap();
        let q2 = p.linearize(&z2).unwrap();
        assert_eq!(q1.to_dense().hessian, q2.to_dense().hessian);
        let s = rk4_step_with_sensitivities(
            0.01,
            &z2.state(&p.config, 1),
            &z2.control(&p.config, 1),
            0.01,
            &p.model,
        )
        .unwrap();
        assert_eq!(q2.a[1], s.state_sensitivity);
        assert_eq!(q2.b[1], s.control_sensitivity);
    }

    #[test]
    fn structured_products_match_dense() {
        let p = problem(3);
        let z = p.rollout(&[Vector3::new(0.02, 0.01, -0.01); 3]).unwrap();
        let qp = p.linearize(&z).unwrap();
        let dense = qp.to_dense();
        let d = DVector::from_fn(qp.n_primal(), |i, _| ((i * 7919) % 13) as f64 * 0.1 - 0.6);
        let l = DVector::from_fn(qp.n_eq(), |i, _| ((i * 31) % 5) as f64 - 2.0);
        let v = DVector::from_fn(qp.n_ineq(), |i, _| (i % 3) as f64);
        assert!((qp.hess_mul(&d) - &dense.hessian * &d).norm() < 1e-9);
        assert!((qp.eq_mul(&d) - &dense.eq_jac * &d).norm() < 1e-12);
        assert!((qp.eq_tmul(&l) - dense.eq_jac.transpose() * &l).norm() < 1e-12);
        assert!((qp.ineq_mul(&d) - &dense.ineq_jac * &d).norm() < 1e-12);
        assert!((qp.ineq_tmul(&v) - dense.ineq_jac.transpose() * &v).norm() < 1e-12);
    }

    #[test]
    fn dump_roundtrip() {
        let p = problem(2);
        let z = p.rollout(&[Vector3::new(0.02, 0.01, -0.01); 2]).unwrap();
        let qp = p.linearize(&z).unwrap();
        let text = serde_json::to_string(&qp.to_dump()).unwrap();
        let back = QpData::from_dump(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, qp);
    }

    #[test]
    fn dimension_errors() {
        let p = problem(2);
        assert!(matches!(
            p.eval_cost(&DVector::zeros(3)),
            Err(Error::Dimension { .. })
        ));
        assert!(OcpProblem::new(config(2), p.model, p.xi_k, 0.0, vec![p.xi_k; 2]).is_err());
    }
}
