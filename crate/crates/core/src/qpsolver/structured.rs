//! Stage-ordered assembly and solve of the reduced semismooth Newton system
//!
//! ```text
//! [ H + sigma I + C' W C   G'       ] [dd]   [rhs_primal]
//! [ G                      -sigma I ] [dl] = [rhs_eq    ]
//! ```
//!
//! Variables are interleaved per stage as `(xi_0, lambda_0, u_0)`, then
//! `(lambda_i, xi_i, u_i)` for `i >= 1`, ending with `(lambda_N, xi_N)`. In that
//! order the matrix is banded with half-bandwidth 20 and every pivot of the
//! no-pivoting LDL' is a well-scaled Schur complement, giving O(N) work.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6};

use super::banded::{BandedSym, FactorError};
use crate::ocp::{QpData, NC, NU, NX};

const STAGE: usize = 2 * NX + NU;
pub const BANDWIDTH: usize = 20;

/// Blocks of the reduced Newton system.
#[derive(Debug, Clone, Copy)]
pub struct NewtonSystem<'a> {
    pub qp: &'a QpData,
    pub sigma: f64,
    /// Diagonal weight per inequality row, entering as `C' W C`.
    pub ineq_weight: &'a DVector<f64>,
}

struct Ordering {
    horizon: usize,
}

impl Ordering {
    fn dim(&self) -> usize {
        STAGE * self.horizon + 2 * NX
    }
    fn xi(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            STAGE * i + NX
        }
    }
    fn lambda(&self, i: usize) -> usize {
        if i == 0 {
            NX
        } else {
            STAGE * i
        }
    }
    fn u(&self, i: usize) -> usize {
        STAGE * i + 2 * NX
    }
}

trait Sink {
    /// Adds `v` at `(i, j)` and its mirror; each unordered pair is visited once.
    fn add_sym(&mut self, i: usize, j: usize, v: f64);
}

impl Sink for BandedSym {
    fn add_sym(&mut self, i: usize, j: usize, v: f64) {
        if v != 0.0 {
            self.add(i, j, v);
        }
    }
}

impl Sink for DMatrix<f64> {
    fn add_sym(&mut self, i: usize, j: usize, v: f64) {
        self[(i, j)] += v;
        if i != j {
            self[(j, i)] += v;
        }
    }
}

fn diag_block<const D: usize, S: Sink>(sink: &mut S, at: usize, m: &nalgebra::SMatrix<f64, D, D>) {
    for a in 0..D {
        for b in 0..=a {
            sink.add_sym(at + a, at + b, m[(a, b)]);
        }
    }
}

fn off_block<const R: usize, const C: usize, S: Sink>(
    sink: &mut S,
    row: usize,
    col: usize,
    m: &nalgebra::SMatrix<f64, R, C>,
) {
    for a in 0..R {
        for b in 0..C {
            sink.add_sym(row + a, col + b, m[(a, b)]);
        }
    }
}

fn assemble<S: Sink>(sys: &NewtonSystem, ord: &Ordering, sink: &mut S) {
    let qp = sys.qp;
    let n = qp.horizon;
    let xi_block = qp.q + Matrix6::identity() * sys.sigma;
    for i in 0..=n {
        diag_block(sink, ord.xi(i), &xi_block);
        for a in 0..NX {
            sink.add_sym(ord.lambda(i) + a, ord.lambda(i) + a, -sys.sigma);
        }
    }
    off_block(sink, ord.lambda(0), ord.xi(0), &Matrix6::identity());
    for i in 0..n {
        let c = &qp.c[i];
        let w = sys.ineq_weight.fixed_rows::<NC>(NC * i);
        let mut u_block = qp.r + Matrix3::identity() * sys.sigma;
        u_block += c.transpose() * nalgebra::Matrix6::from_diagonal(&w.into_owned()) * c;
        diag_block(sink, ord.u(i), &u_block);
        off_block(sink, ord.lambda(i + 1), ord.xi(i), &(-qp.a[i]));
        off_block(sink, ord.lambda(i + 1), ord.u(i), &(-qp.b[i]));
        off_block(sink, ord.lambda(i + 1), ord.xi(i + 1), &Matrix6::identity());
    }
}

fn permute_in(ord: &Ordering, qp: &QpData, rp: &DVector<f64>, re: &DVector<f64>) -> Vec<f64> {
    let mut b = vec![0.0; ord.dim()];
    let n = qp.horizon;
    for i in 0..=n {
        for a in 0..NX {
            b[ord.xi(i) + a] = rp[NX * i + a];
            b[ord.lambda(i) + a] = re[NX * i + a];
        }
    }
    for i in 0..n {
        for a in 0..NU {
            b[ord.u(i) + a] = rp[NX * (n + 1) + NU * i + a];
        }
    }
    b
}

fn permute_out(ord: &Ordering, qp: &QpData, x: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let n = qp.horizon;
    let mut dd = DVector::zeros(qp.n_primal());
    let mut dl = DVector::zeros(qp.n_eq());
    for i in 0..=n {
        for a in 0..NX {
            dd[NX * i + a] = x[ord.xi(i) + a];
            dl[NX * i + a] = x[ord.lambda(i) + a];
        }
    }
    for i in 0..n {
        for a in 0..NU {
            dd[NX * (n + 1) + NU * i + a] = x[ord.u(i) + a];
        }
    }
    (dd, dl)
}

/// Solves the reduced Newton system. Systems with fewer than
/// `dense_threshold` unknowns are factored densely.
pub fn structured_linear_solve(
    sys: &NewtonSystem,
    rhs_primal: &DVector<f64>,
    rhs_eq: &DVector<f64>,
    dense_threshold: usize,
) -> Result<(DVector<f64>, DVector<f64>), FactorError> {
    let ord = Ordering {
        horizon: sys.qp.horizon,
    };
    let dim = ord.dim();
    let mut b = permute_in(&ord, sys.qp, rhs_primal, rhs_eq);
    if dim < dense_threshold {
        let mut m = DMatrix::zeros(dim, dim);
        assemble(sys, &ord, &mut m);
        let x = m.lu().solve(&DVector::from_vec(b)).ok_or(FactorError {
            pivot: 0,
            value: 0.0,
        })?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(FactorError {
                pivot: 0,
                value: f64::NAN,
            });
        }
        return Ok(permute_out(&ord, sys.qp, x.as_slice()));
    }
    let mut band = BandedSym::zeros(dim, BANDWIDTH);
    assemble(sys, &ord, &mut band);
    band.factor()?;
    band.solve(&mut b);
    Ok(permute_out(&ord, sys.qp, &b))
}

/// Dense rendering of the same system in natural `(d, lambda)` order, for
/// tests and oracles.
pub fn dense_system(sys: &NewtonSystem) -> DMatrix<f64> {
    let qp = sys.qp;
    let dense = qp.to_dense();
    let n = qp.n_primal();
    let m = qp.n_eq();
    let w = DMatrix::from_diagonal(sys.ineq_weight);
    let k = &dense.hessian
        + DMatrix::identity(n, n) * sys.sigma
        + dense.ineq_jac.transpose() * w * &dense.ineq_jac;
    let mut out = DMatrix::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(&k);
    out.view_mut((0, n), (n, m))
        .copy_from(&dense.eq_jac.transpose());
    out.view_mut((n, 0), (m, n)).copy_from(&dense.eq_jac);
    out.view_mut((n, n), (m, m))
        .copy_from(&(-DMatrix::identity(m, m) * sys.sigma));
    out
}
