//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use koopman_bilqr::bilqr::{build_o_b, costate_backward};
use koopman_bilqr::edmdc::BilinearModel;
use koopman_bilqr::lifting::Dictionary;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, s: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-s..s))
}

/// Random symmetric positive definite matrix with eigenvalues roughly in `[lo, lo + s]`.
pub fn rand_spd(rng: &mut ChaCha8Rng, n: usize, lo: f64, s: f64) -> DMatrix<f64> {
    let g = rand_mat(rng, n, n, 1.0);
    let q = &g * g.transpose() * (s / n as f64);
    q + DMatrix::identity(n, n) * lo
}

pub fn rand_sym(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = rand_mat(rng, n, n, 1.0);
    (&g + g.transpose()) * 0.5
}

/// Stable random bilinear model on an identity dictionary.
pub fn random_bilinear(rng: &mut ChaCha8Rng, big_n: usize, m: usize, b_scale: f64) -> BilinearModel {
    let a = DMatrix::identity(big_n, big_n) * 0.9 + rand_mat(rng, big_n, big_n, 0.1 / big_n as f64);
    let b = (0..m).map(|_| rand_mat(rng, big_n, big_n, b_scale)).collect();
    BilinearModel::from_parts(
        a,
        b,
        DMatrix::identity(big_n, big_n),
        Dictionary::identity(big_n),
        0.01,
    )
    .unwrap()
}

pub fn simulate_lifted(model: &BilinearModel, z0: &DVector<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    let t = u.ncols();
    let mut z = DMatrix::zeros(z0.len(), t + 1);
    z.column_mut(0).copy_from(z0);
    for k in 0..t {
        let next = model.step_lifted(&z.column(k).into_owned(), &u.column(k).into_owned());
        z.column_mut(k + 1).copy_from(&next);
    }
    z
}

/// Stationary trajectory of the lifted problem with cost `½Σ zᵀQz + uᵀRu`,
/// found by the damped iteration `u_k ← ½ u_k − ½ R⁻¹ O_B(z_k)ᵀ λ_{k+1}`.
/// Returns `(z, u, fixed-point defect)`.
pub fn pmp_trajectory(
    model: &BilinearModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    z0: &DVector<f64>,
    horizon: usize,
) -> (DMatrix<f64>, DMatrix<f64>, f64) {
    let m = model.m();
    let r_inv = r.clone().try_inverse().unwrap();
    let mut u = DMatrix::zeros(m, horizon);
    let mut defect = f64::INFINITY;
    for _ in 0..2000 {
        let z = simulate_lifted(model, z0, &u);
        let lam = costate_backward(model, q, &z, &u).unwrap();
        let mut next = DMatrix::zeros(m, horizon);
        for k in 0..horizon - 1 {
            let o_b = build_o_b(model, &z.column(k).into_owned());
            next.column_mut(k).copy_from(&(-&r_inv * o_b.transpose() * lam.get(k + 1)));
        }
        defect = (&next - &u).norm();
        u = (&u + &next) * 0.5;
        if defect <= 1e-14 * (1.0 + u.norm()) {
            break;
        }
    }
    (simulate_lifted(model, z0, &u), u, defect)
}

/// Finite-horizon LQR gains for `½Σ_{k<T} xᵀQx + uᵀRu` (no terminal cost):
/// `u_k = −K_k x_k`.
pub fn riccati_gains(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    horizon: usize,
) -> Vec<DMatrix<f64>> {
    let n = a.nrows();
    let mut p = DMatrix::zeros(n, n);
    let mut gains = vec![DMatrix::zeros(b.ncols(), n); horizon];
    for k in (0..horizon).rev() {
        let s = r + b.transpose() * &p * b;
        let kk = s.try_inverse().unwrap() * b.transpose() * &p * a;
        p = q + a.transpose() * &p * (a - b * &kk);
        p = (&p + p.transpose()) * 0.5;
        gains[k] = kk;
    }
    gains
}

/// Closed-loop LQR trajectory `(x, u)`.
pub fn lqr_trajectory(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    gains: &[DMatrix<f64>],
    x0: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let t = gains.len();
    let mut x = DMatrix::zeros(a.nrows(), t + 1);
    let mut u = DMatrix::zeros(b.ncols(), t);
    x.column_mut(0).copy_from(x0);
    for k in 0..t {
        let uk = -&gains[k] * x.column(k);
        let next = a * x.column(k) + b * &uk;
        u.column_mut(k).copy_from(&uk);
        x.column_mut(k + 1).copy_from(&next);
    }
    (x, u)
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
