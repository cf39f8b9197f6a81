mod common;

use halo_nmpc::dynamics::{cr3bp_rhs, er3bp_rhs, time_from_anomaly};
use halo_nmpc::orbits::Resampling;
use halo_nmpc::qpsolver::structured::dense_system;
use halo_nmpc::qpsolver::{solve_qp, structured_linear_solve, NewtonSystem};
use halo_nmpc::sim::derive_seed;
use halo_nmpc::{HypercubeSpec, QpSolverConfig, QpStatus, ThreeBodyParams, Vector3, Vector6};
use nalgebra::DVector;
use proptest::prelude::*;

fn state() -> impl Strategy<Value = Vector6<f64>> {
    (
        0.9f64..1.1,
        -0.1f64..0.1,
        0.03f64..0.1,
        -0.5f64..0.5,
        -0.5f64..1.0,
        -0.5f64..0.5,
    )
        .prop_map(|(x, y, z, a, b, c)| Vector6::new(x, y, z, a, b, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn circular_limit_of_elliptic_rhs(s in state(), theta in -20.0f64..20.0, u in prop::array::uniform3(-0.1f64..0.1)) {
        let u = Vector3::from(u);
        let p = ThreeBodyParams::default().circular();
        let a = er3bp_rhs(theta, &s, &u, &p).unwrap();
        let b = cr3bp_rhs(&s, &u, p.mu).unwrap();
        prop_assert!((a - b).amax() <= 1e-15 * b.amax().max(1.0));
    }

    #[test]
    fn anomaly_time_is_additive(e in 0.0f64..0.9, a in 0.0f64..3.0, b in 0.0f64..3.0, c in 0.0f64..3.0) {
        let t1 = a;
        let t2 = a + b;
        let t3 = a + b + c;
        let whole = time_from_anomaly(t1, t3, e).unwrap();
        let parts = time_from_anomaly(t1, t2, e).unwrap() + time_from_anomaly(t2, t3, e).unwrap();
        prop_assert!((whole - parts).abs() <= 1e-9 * whole.max(1.0));
        prop_assert!(whole >= 0.0);
    }

    #[test]
    fn hypercube_offsets_stay_in_box(seed in any::<u64>(), dr in 0.0f64..1000.0, dv in 0.0f64..0.1, n in 0usize..20) {
        let spec = HypercubeSpec { center: None, dr_max_km: dr, dv_max_km_s: dv, samples: n };
        let offs = spec.sample_offsets(seed);
        prop_assert_eq!(offs.len(), n);
        for (r, v) in &offs {
            prop_assert!(r.iter().all(|x| x.abs() <= dr));
            prop_assert!(v.iter().all(|x| x.abs() <= dv));
        }
        prop_assert_eq!(offs, spec.sample_offsets(seed));
    }

    #[test]
    fn derived_seeds_differ_by_salt(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assume!(a != b);
        prop_assert_ne!(derive_seed(seed, a), derive_seed(seed, b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solved_qp_meets_its_kkt_contract(n in 1usize..12, offset in 1e-6f64..2e-3, seed in any::<u64>()) {
        let cfg = QpSolverConfig::default();
        let qp = common::tracking_qp(n, offset, seed);
        let sol = solve_qp(&qp, None, &cfg).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Solved);
        prop_assert!(qp.kkt_norm(&sol.d, &sol.lambda, &sol.v) <= cfg.tolerance);
        prop_assert!(sol.v.min() >= -cfg.tolerance);
    }

    #[test]
    fn banded_solve_matches_dense(n in 1usize..15, sigma in 1e-10f64..1e-2, seed in any::<u64>(), w in 0.0f64..10.0) {
        let qp = common::tracking_qp(n, 1e-3, seed);
        let weight = DVector::from_fn(qp.n_ineq(), |i, _| w * (1.0 + (i % 5) as f64));
        let sys = NewtonSystem { qp: &qp, sigma, ineq_weight: &weight };
        let rp = DVector::from_fn(qp.n_primal(), |i, _| ((i * 7 + 3) % 11) as f64 - 5.0);
        let re = DVector::from_fn(qp.n_eq(), |i, _| ((i * 5 + 1) % 13) as f64 - 6.0);
        let (dd, dl) = structured_linear_solve(&sys, &rp, &re, 0).unwrap();
        let mut x = DVector::zeros(qp.n_primal() + qp.n_eq());
        x.rows_mut(0, qp.n_primal()).copy_from(&dd);
        x.rows_mut(qp.n_primal(), qp.n_eq()).copy_from(&dl);
        let mut rhs = DVector::zeros(x.len());
        rhs.rows_mut(0, qp.n_primal()).copy_from(&rp);
        rhs.rows_mut(qp.n_primal(), qp.n_eq()).copy_from(&re);
        let m = dense_system(&sys);
        let resid = (&m * &x - &rhs).amax();
        prop_assert!(resid <= 1e-8 * (m.amax() * x.amax()).max(1.0), "residual {}", resid);
    }
}

#[test]
fn reference_window_wraps() {
    let r = common::reference(Resampling::Commensurate);
    for k in [
        0,
        5,
        r.period_steps - 1,
        r.period_steps,
        3 * r.period_steps + 7,
    ] {
        let w = r.window(k, 35);
        assert_eq!(w.len(), 36);
        for (i, s) in w.iter().enumerate() {
            assert_eq!(s, &r.samples[(k + i) % r.period_steps]);
        }
    }
}
