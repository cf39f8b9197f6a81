#![allow(dead_code)]

use halo_nmpc::integrator::propagate;
use halo_nmpc::ocp::OcpProblem;
use halo_nmpc::orbits::{periodize, shoot_halo, Resampling, ShootingConfig};
use halo_nmpc::{ControllerConfig, PeriodicOrbit, QpData, ReferenceOrbit, Vector3, Vector6};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn halo() -> PeriodicOrbit {
    shoot_halo(0.9878, 0.029, 0.8763, 0.012, &ShootingConfig::default()).unwrap()
}

pub fn reference(mode: Resampling) -> ReferenceOrbit {
    periodize(&halo(), 0.01, 1e-3, mode).unwrap()
}

/// Tracking QP at horizon `n`: natural-motion reference, state offset of
/// `offset_lu` per component, linearized at a zero-control rollout.
pub fn tracking_qp(n: usize, offset_lu: f64, seed: u64) -> QpData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ControllerConfig::default();
    cfg.ocp.horizon = n;
    let base = Vector6::new(0.9878, 0.0, 0.0275, 0.0, 0.8969, 0.0);
    let window = propagate(
        0.0,
        &base,
        &vec![Vector3::zeros(); n],
        cfg.ocp.dtheta,
        &cfg.model,
    )
    .unwrap();
    let xi = base + Vector6::from_fn(|_, _| rng.random_range(-offset_lu..offset_lu));
    let problem = OcpProblem::new(cfg.ocp, cfg.model, xi, 0.0, window).unwrap();
    let z = problem.rollout(&vec![Vector3::zeros(); n]).unwrap();
    problem.linearize(&z).unwrap()
}

/// Same QP with its linear terms nudged by relative `scale`.
pub fn perturbed(qp: &QpData, scale: f64, rng: &mut ChaCha8Rng) -> QpData {
    let mut out = qp.clone();
    let mut nudge = |v: &mut DVector<f64>| {
        for x in v.iter_mut() {
            *x += scale * rng.random_range(-1.0..1.0) * x.abs().max(1e-6);
        }
    };
    nudge(&mut out.gradient);
    nudge(&mut out.eq_residual);
    out
}
