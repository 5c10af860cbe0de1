//! Cross-checks of the library against independent closed forms.

mod common;

use std::collections::BTreeMap;

use approx::assert_relative_eq;
use common::*;
use koopman_bilqr::bilqr::{build_o_ab, costate_backward, detect_unactuated, inverse_bilqr, IocOptions, UNACTUATED_TOL};
use koopman_bilqr::edmdc::fit_bilinear;
use koopman_bilqr::lifting::{Dictionary, LiftedBatch};
use koopman_bilqr::optctrl::{
    costates, generate_batch, Dynamics, GenerateSpec, objective_and_gradient, solve, LiftedBilinearDynamics, OcProblem, QuadraticCost, SolveOptions,
};
use koopman_bilqr::systems::{analytic_lift_check, make_system};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn costates_match_explicit_sum() {
    // λ_k = Σ_{j=k}^{T−1} O_ABᵀ_{k} ⋯ O_ABᵀ_{j−1} Q z_j
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = random_bilinear(&mut rng, 3, 2, 0.3);
    let q = rand_spd(&mut rng, 3, 0.2, 1.0);
    let u = rand_mat(&mut rng, 2, 9, 1.0);
    let z = simulate_lifted(&model, &rand_vec(&mut rng, 3, 1.0), &u);
    let lam = costate_backward(&model, &q, &z, &u).unwrap();
    let t = u.ncols();
    for k in 1..=t {
        let mut expect = nalgebra::DVector::zeros(3);
        for j in k..t {
            let mut prod = DMatrix::identity(3, 3);
            for i in k..j {
                prod *= build_o_ab(&model, &u.column(i).into_owned()).transpose();
            }
            expect += prod * &q * z.column(j);
        }
        assert_relative_eq!(lam.get(k), expect, epsilon = 1e-12);
    }
}

#[test]
fn solver_costates_agree_with_ioc_costates() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = random_bilinear(&mut rng, 4, 1, 0.2);
    let q = rand_spd(&mut rng, 4, 0.1, 1.0);
    let cost = QuadraticCost::new(Dictionary::identity(4), q.clone(), DMatrix::identity(1, 1)).unwrap();
    let dynamics = LiftedBilinearDynamics { model: &model };
    let x0 = rand_vec(&mut rng, 4, 1.0);
    let prob = OcProblem::new(&dynamics, &cost, x0.clone(), 12, 0.01).unwrap();
    let u = rand_mat(&mut rng, 1, 12, 1.0);
    let from_solver = costates(&prob, &u).unwrap();
    let z = simulate_lifted(&model, &x0, &u);
    let from_ioc = costate_backward(&model, &q, &z, &u).unwrap();
    assert_relative_eq!(from_solver, from_ioc.as_matrix().clone(), epsilon = 1e-12);
}

#[test]
fn forward_solver_matches_riccati() {
    let sys = make_system("linear-lqr", &BTreeMap::new(), 0.01).unwrap();
    let dt = 0.01;
    let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, dt]);
    let cost = sys.default_cost();
    let q = DMatrix::identity(2, 2);
    let r = DMatrix::identity(1, 1);
    let gains = riccati_gains(&a, &b, &q, &r, 40);
    let x0 = nalgebra::DVector::from_vec(vec![0.7, -0.4]);
    let (x_ref, u_ref) = lqr_trajectory(&a, &b, &gains, &x0);
    let prob = OcProblem::new(&sys, &cost, x0, 40, dt).unwrap();
    let sol = solve(&prob, None, &SolveOptions { grad_tol: 1e-12, ..Default::default() }).unwrap();
    assert!(sol.converged);
    assert!(rel_err(&sol.controls, &u_ref) < 1e-8, "{}", rel_err(&sol.controls, &u_ref));
    assert!(rel_err(&sol.states, &x_ref) < 1e-10);
}

#[test]
fn stationary_trajectories_have_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = random_bilinear(&mut rng, 3, 2, 0.08);
    let q = rand_spd(&mut rng, 3, 0.1, 0.5);
    let r = DMatrix::identity(2, 2);
    let z0 = rand_vec(&mut rng, 3, 1.0);
    let (_, u, defect) = pmp_trajectory(&model, &q, &r, &z0, 15);
    assert!(defect < 1e-12);
    let cost = QuadraticCost::new(Dictionary::identity(3), q, r).unwrap();
    let dynamics = LiftedBilinearDynamics { model: &model };
    let prob = OcProblem::new(&dynamics, &cost, z0, 15, 0.01).unwrap();
    let (_, g) = objective_and_gradient(&prob, &u).unwrap();
    assert!(g.norm() < 1e-12 * (1.0 + u.norm()), "{}", g.norm());
}

#[test]
fn analytic_liftings_match_their_dynamics() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for name in ["example2", "unicycle", "linear-lqr"] {
        let sys = make_system(name, &BTreeMap::new(), 0.01).unwrap();
        let samples: Vec<_> = (0..50)
            .map(|_| (rand_vec(&mut rng, sys.n(), 1.0), rand_vec(&mut rng, sys.m(), 1.0)))
            .collect();
        // the dropped second-order terms are O(dt²) per step
        let err = analytic_lift_check(&sys, &samples).unwrap();
        assert!(err < 5e-4, "{name}: {err}");
    }
}

#[test]
fn exact_cost_recovered_from_rich_stationary_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let model = random_bilinear(&mut rng, 3, 2, 0.08);
    let q = rand_spd(&mut rng, 3, 0.2, 0.5);
    let r = DMatrix::identity(2, 2);
    let trajs: Vec<_> = (0..4)
        .map(|_| {
            let (z, u, _) = pmp_trajectory(&model, &q, &r, &rand_vec(&mut rng, 3, 1.0), 12);
            (z, u)
        })
        .collect();
    let est = inverse_bilqr(&model, &LiftedBatch::from_lifted(&trajs).unwrap(), &IocOptions::default()).unwrap();
    assert!(est.diagnostics.lemma5_satisfied && est.diagnostics.lemma6_satisfied);
    assert!(rel_err(&est.q, &q) < 1e-8, "{}", rel_err(&est.q, &q));
    // R = αI recovers αQ
    let scaled = inverse_bilqr(
        &model,
        &LiftedBatch::from_lifted(&trajs).unwrap(),
        &IocOptions { r: Some(r * 2.0), ..Default::default() },
    )
    .unwrap();
    assert!(rel_err(&scaled.q, &(q * 2.0)) < 1e-8);
}

#[test]
fn example1_bilinear_fit_flags_first_mode() {
    let sys = make_system("example1", &BTreeMap::new(), 0.01).unwrap();
    let spec = GenerateSpec { n_traj: 8, horizon: 40, dt: 0.01, x0: sys.default_x0_box(), seed: 5 };
    let batch = generate_batch(&sys, &sys.default_cost(), &spec, &SolveOptions::default()).unwrap();
    let model = fit_bilinear(&batch, sys.lifting()).unwrap();
    assert!(detect_unactuated(&model, UNACTUATED_TOL).contains(&0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stacked_condition_holds_for_random_models(seed in 0u64..10_000, big_n in 1usize..5, m in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_bilinear(&mut rng, big_n, m, 0.05);
        let q = rand_spd(&mut rng, big_n, 0.1, 0.5);
        let r = DMatrix::identity(m, m);
        let (z, u, defect) = pmp_trajectory(&model, &q, &r, &rand_vec(&mut rng, big_n, 1.0), 10);
        prop_assume!(defect < 1e-12);
        let lifted = LiftedBatch::from_lifted(&[(z, u)]).unwrap();
        let ad = koopman_bilqr::bilqr::build_script_a(&model, &lifted).unwrap()
            * koopman_bilqr::linalg::duplication_matrix(big_n);
        let ustack = koopman_bilqr::bilqr::control_stack(&lifted, &r);
        let res = (-&ustack - ad * koopman_bilqr::linalg::vech(&q)).norm();
        prop_assert!(res <= 1e-9 * (1.0 + ustack.norm()));
    }
}
