//! Inverse Bi-LQR: recovers the lifted state-cost matrix `Q` of
//! `J = ½ Σ_k (z_kᵀ Q z_k + u_kᵀ R u_k)` from trajectories that are optimal for
//! a bilinear lifted model.
//!
//! With `O_AB_k = A + Σ_i u_{i,k} B_i` and `O_B_k = [B_1 z_k … B_m z_k]`, the
//! stationarity conditions
//!
//! ```text
//! λ_T = 0,   λ_k = Q z_k + O_AB_kᵀ λ_{k+1},   R u_k = −O_B_kᵀ λ_{k+1}
//! ```
//!
//! are linear in `Q`. Eliminating the costates gives, per trajectory and for
//! `j = 0 … T−2`,
//!
//! ```text
//! −R u_j = Σ_{k=j+1}^{T−1} (z_kᵀ ⊗ O_B_jᵀ O_AB_{j+1}ᵀ ⋯ O_AB_{k−1}ᵀ) vec(Q)
//! ```
//!
//! which is stacked over trajectories into `𝒜(z,u)` and solved for `vech(Q)`
//! through the duplication matrix. The final control of every trajectory is
//! not used (`λ_T = 0` makes it identically zero).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::edmdc::BilinearModel;
use crate::error::{Error, Result};
use crate::lifting::LiftedBatch;
use crate::linalg::{duplication_matrix, full_svd, pinv, project_psd, unvech, vech_len};

/// Numerical-rank threshold for the identifiability diagnostics.
pub const DIAG_REL_TOL: f64 = 1e-8;
/// Relative row-norm threshold below which a lifted coordinate counts as unactuated.
pub const UNACTUATED_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct IocOptions {
    /// Rank cutoff relative to `σ_max` for the diagnostics.
    pub rel_tol: f64,
    /// Pseudo-inverse cutoff for the solve; the effective cutoff is never below
    /// `rel_tol`. Raising it drops weakly identified directions of `vech(Q)`.
    pub solve_rel_tol: f64,
    /// Threshold for [`detect_unactuated`].
    pub tol_unact: f64,
    /// Clip negative eigenvalues of the recovered `Q`.
    pub psd_project: bool,
    /// Known control weight; identity when `None`.
    pub r: Option<DMatrix<f64>>,
}

impl Default for IocOptions {
    fn default() -> Self {
        IocOptions {
            rel_tol: DIAG_REL_TOL,
            solve_rel_tol: DIAG_REL_TOL,
            tol_unact: UNACTUATED_TOL,
            psd_project: false,
            r: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IocDiagnostics {
    /// Equation count `M (T−2) m` used by the row-count identifiability condition.
    pub rows: usize,
    /// Rows actually present in `𝒜𝒟` (`M (T−1) m`).
    pub equations: usize,
    /// `N (N+1) / 2`.
    pub cols: usize,
    pub numerical_rank: usize,
    /// Singular directions kept by the solve.
    pub solve_rank: usize,
    pub condition_number: f64,
    /// `rows ≥ cols` and `𝒜𝒟` has full column rank.
    pub lemma5_satisfied: bool,
    /// `T ≥ N+2`, `M ≥ N` and the terminal lifted states `z_{T−1}` span `R^N`.
    pub lemma6_satisfied: bool,
    pub unactuated_modes: Vec<usize>,
    /// Orthonormal basis (columns) of the unidentifiable `vech(Q)` directions.
    pub nullspace_basis: DMatrix<f64>,
}

impl IocDiagnostics {
    pub fn nullspace_dim(&self) -> usize {
        self.nullspace_basis.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `‖−R u − 𝒜𝒟 vech(Q)‖₂`.
    pub ls_residual: f64,
    pub diagnostics: IocDiagnostics,
    pub warnings: Vec<String>,
}

/// Costates `λ_1 … λ_T` of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateSequence {
    /// `N x T`; column `k − 1` holds `λ_k`.
    values: DMatrix<f64>,
}

impl CostateSequence {
    /// `λ_k` for `k = 1 … T`.
    pub fn get(&self, k: usize) -> DVector<f64> {
        assert!(k >= 1 && k <= self.values.ncols(), "costate index {k} out of range");
        self.values.column(k - 1).into_owned()
    }

    pub fn horizon(&self) -> usize {
        self.values.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// `O_AB_k = A + Σ_i u_{i,k} B_i`.
pub fn build_o_ab(model: &BilinearModel, u: &DVector<f64>) -> DMatrix<f64> {
    model.transition(u)
}

/// `O_B_k = [B_1 z_k … B_m z_k]`, `N x m`.
pub fn build_o_b(model: &BilinearModel, z: &DVector<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(model.lifted_dim(), model.m());
    for (i, bi) in model.b.iter().enumerate() {
        out.column_mut(i).copy_from(&(bi * z));
    }
    out
}

fn check_trajectory(model: &BilinearModel, z: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<usize> {
    let t = u.ncols();
    if z.nrows() != model.lifted_dim() || u.nrows() != model.m() || z.ncols() != t + 1 {
        return Err(Error::DimensionMismatch(format!(
            "lifted trajectory {:?} / controls {:?} incompatible with model (N = {}, m = {})",
            z.shape(),
            u.shape(),
            model.lifted_dim(),
            model.m()
        )));
    }
    if t < 2 {
        return Err(Error::InvalidInput(format!(
            "inverse optimal control needs at least 2 control steps, got {t}"
        )));
    }
    Ok(t)
}

/// Backward costate recursion with `λ_T = 0`.
/// `z` holds `z_0 … z_T` as columns, `u` holds `u_0 … u_{T−1}`.
pub fn costate_backward(
    model: &BilinearModel,
    q: &DMatrix<f64>,
    z: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<CostateSequence> {
    let t = check_trajectory(model, z, u)?;
    let big_n = model.lifted_dim();
    let mut values = DMatrix::zeros(big_n, t);
    for k in (1..t).rev() {
        let o_ab = build_o_ab(model, &u.column(k).into_owned());
        let next = values.column(k).into_owned();
        let lam = q * z.column(k) + o_ab.transpose() * next;
        values.column_mut(k - 1).copy_from(&lam);
    }
    Ok(CostateSequence { values })
}

fn add_kron_row_block(
    block: &mut DMatrix<f64>,
    row0: usize,
    z: nalgebra::DVectorView<'_, f64>,
    w: &DMatrix<f64>,
) {
    // block[row0 + r, c*N + s] += z[c] * w[r, s]
    let big_n = w.ncols();
    for (c, &zc) in z.iter().enumerate() {
        if zc == 0.0 {
            continue;
        }
        for s in 0..big_n {
            for r in 0..w.nrows() {
                block[(row0 + r, c * big_n + s)] += zc * w[(r, s)];
            }
        }
    }
}

/// Per-trajectory block `𝒜_i(z,u)`, `(T−1)m x N²`, acting on `vec(Q)`.
pub fn build_script_a_i(
    model: &BilinearModel,
    z: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let t = check_trajectory(model, z, u)?;
    let big_n = model.lifted_dim();
    let m = model.m();
    let o_ab_t: Vec<DMatrix<f64>> = (0..t)
        .map(|k| build_o_ab(model, &u.column(k).into_owned()).transpose())
        .collect();
    let mut out = DMatrix::zeros((t - 1) * m, big_n * big_n);
    for j in 0..t - 1 {
        let mut w = build_o_b(model, &z.column(j).into_owned()).transpose();
        for k in j + 1..t {
            add_kron_row_block(&mut out, j * m, z.column(k), &w);
            if k + 1 < t {
                w = &w * &o_ab_t[k];
            }
        }
    }
    Ok(out)
}

fn check_batch(model: &BilinearModel, lifted: &LiftedBatch) -> Result<()> {
    if lifted.lifted_dim() != model.lifted_dim() || lifted.m() != model.m() {
        return Err(Error::DimensionMismatch(format!(
            "data (N = {}, m = {}) does not match model (N = {}, m = {})",
            lifted.lifted_dim(),
            lifted.m(),
            model.lifted_dim(),
            model.m()
        )));
    }
    if lifted.layout.len() != lifted.n_traj * lifted.horizon {
        return Err(Error::DimensionMismatch("ragged lifted batch".into()));
    }
    Ok(())
}

fn vstack(blocks: Vec<DMatrix<f64>>, cols: usize) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.rows_mut(r, b.nrows()).copy_from(&b);
        r += b.nrows();
    }
    out
}

/// `𝒜(z,u) = [𝒜_1; …; 𝒜_M]`.
pub fn build_script_a(model: &BilinearModel, lifted: &LiftedBatch) -> Result<DMatrix<f64>> {
    check_batch(model, lifted)?;
    let blocks = (0..lifted.n_traj)
        .into_par_iter()
        .map(|i| {
            build_script_a_i(
                model,
                &lifted.trajectory_states(i),
                &lifted.trajectory_controls(i),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let big_n = model.lifted_dim();
    Ok(vstack(blocks, big_n * big_n))
}

/// Inverse-LQR matrix for linear lifted dynamics `z⁺ = A z + B u`:
/// row block `j` is `Σ_{k>j} z_kᵀ ⊗ Bᵀ (Aᵀ)^{k−j−1}`.
pub fn build_script_a_linear(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    lifted: &LiftedBatch,
) -> Result<DMatrix<f64>> {
    let big_n = a.nrows();
    let m = b.ncols();
    if a.shape() != (big_n, big_n) || b.nrows() != big_n || lifted.lifted_dim() != big_n || lifted.m() != m {
        return Err(Error::DimensionMismatch("linear model and data shapes disagree".into()));
    }
    let t = lifted.horizon;
    if t < 2 {
        return Err(Error::InvalidInput("need at least 2 control steps".into()));
    }
    let a_t = a.transpose();
    let blocks: Vec<DMatrix<f64>> = (0..lifted.n_traj)
        .into_par_iter()
        .map(|i| {
            let z = lifted.trajectory_states(i);
            let mut out = DMatrix::zeros((t - 1) * m, big_n * big_n);
            for j in 0..t - 1 {
                let mut w = b.transpose();
                for k in j + 1..t {
                    add_kron_row_block(&mut out, j * m, z.column(k), &w);
                    w = &w * &a_t;
                }
            }
            out
        })
        .collect();
    Ok(vstack(blocks, big_n * big_n))
}

/// `vec(R u_{0:T−2})` stacked over trajectories, aligned with `𝒜`.
pub fn control_stack(lifted: &LiftedBatch, r: &DMatrix<f64>) -> DVector<f64> {
    let m = lifted.m();
    let t = lifted.horizon;
    let mut out = DVector::zeros(lifted.n_traj * t.saturating_sub(1) * m);
    let mut idx = 0;
    for i in 0..lifted.n_traj {
        for k in 0..t.saturating_sub(1) {
            let ru = r * lifted.u.column(i * t + k);
            out.rows_mut(idx, m).copy_from(&ru);
            idx += m;
        }
    }
    out
}

fn weak_rows(a: &DMatrix<f64>, bs: &[&DMatrix<f64>], tol_unact: f64, skip: &[usize]) -> Vec<usize> {
    let scale = (a.norm_squared() + bs.iter().map(|b| b.norm_squared()).sum::<f64>()).sqrt();
    (0..a.nrows())
        .filter(|j| !skip.contains(j))
        .filter(|&j| {
            let worst = bs.iter().map(|b| b.row(j).norm()).fold(0.0, f64::max);
            worst <= tol_unact * scale
        })
        .collect()
}

/// Lifted coordinates that no input channel reaches: row `j` of every `B_i`
/// has norm at most `tol_unact · ‖[A B_1 … B_m]‖_F`. Constant terms are never
/// reported.
pub fn detect_unactuated(model: &BilinearModel, tol_unact: f64) -> Vec<usize> {
    let bs: Vec<&DMatrix<f64>> = model.b.iter().collect();
    weak_rows(&model.a, &bs, tol_unact, &model.dict.constant_indices())
}

/// Rows of a linear input matrix `B` with norm at most `tol_unact · ‖[A B]‖_F`.
pub fn detect_unactuated_linear(a: &DMatrix<f64>, b: &DMatrix<f64>, tol_unact: f64) -> Vec<usize> {
    weak_rows(a, &[b], tol_unact, &[])
}

/// Shape information the identifiability checks need beyond `𝒜` itself.
#[derive(Debug, Clone)]
pub struct IocLayout {
    pub n_traj: usize,
    pub horizon: usize,
    pub m: usize,
    /// `N x M` matrix of the terminal lifted states `z_{T−1}` used by the equations.
    pub terminal_states: DMatrix<f64>,
}

impl IocLayout {
    pub fn from_batch(lifted: &LiftedBatch) -> Self {
        let t = lifted.horizon;
        let mut terminal = DMatrix::zeros(lifted.lifted_dim(), lifted.n_traj);
        if t >= 1 {
            for i in 0..lifted.n_traj {
                // z_{T-1} is the last column of Z for the trajectory
                terminal.column_mut(i).copy_from(&lifted.z.column(i * t + t - 1));
            }
        }
        IocLayout {
            n_traj: lifted.n_traj,
            horizon: t,
            m: lifted.m(),
            terminal_states: terminal,
        }
    }
}

/// Minimum-norm least-squares solution of `−R u = 𝒜 𝒟 vech(Q)`.
///
/// `u_stack` is [`control_stack`] (already multiplied by `R`). Unactuated modes
/// are left empty; [`inverse_bilqr`] fills them from the model.
pub fn solve_q(
    script_a: &DMatrix<f64>,
    u_stack: &DVector<f64>,
    layout: &IocLayout,
    opts: &IocOptions,
) -> Result<CostEstimate> {
    if script_a.nrows() == 0 || u_stack.is_empty() {
        return Err(Error::InvalidInput("no equations: empty data".into()));
    }
    if script_a.nrows() != u_stack.len() {
        return Err(Error::DimensionMismatch(format!(
            "𝒜 has {} rows but the control stack has {} entries",
            script_a.nrows(),
            u_stack.len()
        )));
    }
    let n2 = script_a.ncols();
    let big_n = (n2 as f64).sqrt().round() as usize;
    if big_n * big_n != n2 {
        return Err(Error::DimensionMismatch(format!("𝒜 has {n2} columns, not a square count")));
    }
    let r = match &opts.r {
        Some(r) => r.clone(),
        None => DMatrix::identity(layout.m, layout.m),
    };
    let ad = script_a * duplication_matrix(big_n);
    let cols = vech_len(big_n);
    let svd = full_svd(&ad);
    let rank = svd.rank(opts.rel_tol);
    if rank == 0 {
        return Err(Error::DegenerateData("𝒜𝒟 has numerical rank 0".into()));
    }
    let solve_tol = opts.solve_rel_tol.max(opts.rel_tol);
    let solve_rank = svd.rank(solve_tol);
    let rhs = -u_stack;
    let mut vech_q = pinv(&ad, solve_tol) * &rhs;
    let mut warnings = Vec::new();
    let mut q = unvech(&vech_q, big_n);
    if opts.psd_project {
        let (projected, clipped) = project_psd(&q);
        if clipped {
            let msg = "recovered Q had negative eigenvalues; clipped to zero".to_string();
            log::warn!("{msg}");
            warnings.push(msg);
            q = projected;
            vech_q = crate::linalg::vech(&q);
        }
    }
    let ls_residual = (&rhs - &ad * &vech_q).norm();

    let rows = layout.n_traj * layout.horizon.saturating_sub(2) * layout.m;
    let lemma5 = rows >= cols && rank == cols;
    let t = layout.horizon;
    let terminal_rank = if layout.terminal_states.ncols() > 0 {
        full_svd(&layout.terminal_states.transpose()).rank(opts.rel_tol)
    } else {
        0
    };
    let lemma6 = t >= big_n + 2 && layout.n_traj >= big_n && terminal_rank >= big_n;
    let nullspace_basis = svd.nullspace(opts.rel_tol);
    if solve_rank < rank {
        let msg = format!(
            "solve cutoff {solve_tol:e} dropped {} weakly identified directions",
            rank - solve_rank
        );
        log::info!("{msg}");
        warnings.push(msg);
    }
    if !lemma5 {
        let msg = format!(
            "cost not uniquely identifiable: rank {rank} of {cols} unknowns ({} null directions)",
            nullspace_basis.ncols()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let diagnostics = IocDiagnostics {
        rows,
        equations: script_a.nrows(),
        cols,
        numerical_rank: rank,
        solve_rank,
        condition_number: svd.condition_number(opts.rel_tol),
        lemma5_satisfied: lemma5,
        lemma6_satisfied: lemma6,
        unactuated_modes: Vec::new(),
        nullspace_basis,
    };
    Ok(CostEstimate {
        q,
        r,
        ls_residual,
        diagnostics,
        warnings,
    })
}

fn checked_r(opts: &IocOptions, m: usize) -> Result<DMatrix<f64>> {
    match &opts.r {
        None => Ok(DMatrix::identity(m, m)),
        Some(r) => {
            if r.shape() != (m, m) {
                return Err(Error::DimensionMismatch(format!(
                    "R is {:?}, expected {m}x{m}",
                    r.shape()
                )));
            }
            if (r - r.transpose()).amax() > 1e-12 * r.amax().max(1.0) || r.clone().cholesky().is_none() {
                return Err(Error::InvalidInput("R must be symmetric positive definite".into()));
            }
            Ok(r.clone())
        }
    }
}

/// Recovers `Q` for a fitted bilinear model from lifted optimal trajectories.
pub fn inverse_bilqr(
    model: &BilinearModel,
    lifted: &LiftedBatch,
    opts: &IocOptions,
) -> Result<CostEstimate> {
    check_batch(model, lifted)?;
    let r = checked_r(opts, model.m())?;
    let unactuated = detect_unactuated(model, opts.tol_unact);
    let script_a = build_script_a(model, lifted)?;
    let u_stack = control_stack(lifted, &r);
    let mut est = solve_q(&script_a, &u_stack, &IocLayout::from_batch(lifted), opts)?;
    if !unactuated.is_empty() {
        let msg = format!(
            "lifted coordinates {unactuated:?} are unactuated; their cost terms cannot be identified"
        );
        log::warn!("{msg}");
        est.warnings.insert(0, msg);
    }
    est.diagnostics.unactuated_modes = unactuated;
    Ok(est)
}

/// Inverse LQR baseline for linear lifted dynamics.
pub fn inverse_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    lifted: &LiftedBatch,
    opts: &IocOptions,
) -> Result<CostEstimate> {
    let r = checked_r(opts, b.ncols())?;
    let script_a = build_script_a_linear(a, b, lifted)?;
    let u_stack = control_stack(lifted, &r);
    let mut est = solve_q(&script_a, &u_stack, &IocLayout::from_batch(lifted), opts)?;
    let unactuated = detect_unactuated_linear(a, b, opts.tol_unact);
    if !unactuated.is_empty() {
        let msg = format!(
            "lifted coordinates {unactuated:?} are unactuated; their cost terms cannot be identified"
        );
        log::warn!("{msg}");
        est.warnings.insert(0, msg);
    }
    est.diagnostics.unactuated_modes = unactuated;
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::Dictionary;
    use crate::linalg::{vec, vech};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model_from(a: DMatrix<f64>, b: Vec<DMatrix<f64>>) -> BilinearModel {
        let n = a.nrows();
        BilinearModel::from_parts(a, b, DMatrix::identity(n, n), Dictionary::identity(n), 0.01).unwrap()
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
    }

    #[test]
    fn o_ab_sums_channels() {
        let model = model_from(
            DMatrix::identity(2, 2),
            vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])],
        );
        let zero = build_o_ab(&model, &DVector::zeros(1));
        assert_eq!(zero, model.a);
        let o = build_o_ab(&model, &DVector::from_element(1, 2.0));
        assert_eq!(o, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]));
    }

    #[test]
    fn o_b_columns() {
        let model = model_from(DMatrix::identity(3, 3), vec![DMatrix::identity(3, 3)]);
        assert_eq!(build_o_b(&model, &DVector::zeros(3)), DMatrix::zeros(3, 1));
        let z = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(build_o_b(&model, &z).column(0).into_owned(), z);
    }

    #[test]
    fn costates_vanish_for_zero_cost_and_base_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = model_from(rand_mat(&mut rng, 3, 3, 1.0), vec![rand_mat(&mut rng, 3, 3, 0.3)]);
        let z = rand_mat(&mut rng, 3, 6, 1.0);
        let u = rand_mat(&mut rng, 1, 5, 1.0);
        let zero = costate_backward(&model, &DMatrix::zeros(3, 3), &z, &u).unwrap();
        assert!(zero.as_matrix().iter().all(|&v| v == 0.0));
        let q = rand_mat(&mut rng, 3, 3, 1.0);
        let q = &q + q.transpose();
        let lam = costate_backward(&model, &q, &z, &u).unwrap();
        assert_eq!(lam.get(5), DVector::zeros(3));
        assert_relative_eq!(lam.get(4), &q * z.column(4), epsilon = 1e-15);
    }

    #[test]
    fn t3_block_row_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = model_from(rand_mat(&mut rng, 2, 2, 1.0), vec![rand_mat(&mut rng, 2, 2, 1.0)]);
        let z = rand_mat(&mut rng, 2, 4, 1.0);
        let u = rand_mat(&mut rng, 1, 3, 1.0);
        let script = build_script_a_i(&model, &z, &u).unwrap();
        assert_eq!(script.shape(), (2, 4));
        let ob0t = build_o_b(&model, &z.column(0).into_owned()).transpose();
        let ob1t = build_o_b(&model, &z.column(1).into_owned()).transpose();
        let oab1t = build_o_ab(&model, &u.column(1).into_owned()).transpose();
        let z1t = z.column(1).transpose();
        let z2t = z.column(2).transpose();
        let row0 = z1t.kronecker(&ob0t) + z2t.kronecker(&(&ob0t * &oab1t));
        let row1 = z2t.kronecker(&ob1t);
        assert_relative_eq!(script.rows(0, 1).into_owned(), row0, epsilon = 1e-14);
        assert_relative_eq!(script.rows(1, 1).into_owned(), row1, epsilon = 1e-14);
    }

    #[test]
    fn script_a_reproduces_costate_route() {
        // −O_B_jᵀ λ_{j+1} computed from the costates equals −𝒜_i vec(Q) row by row.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = model_from(
            rand_mat(&mut rng, 3, 3, 0.8),
            vec![rand_mat(&mut rng, 3, 3, 0.5), rand_mat(&mut rng, 3, 3, 0.5)],
        );
        let z = rand_mat(&mut rng, 3, 8, 1.0);
        let u = rand_mat(&mut rng, 2, 7, 1.0);
        let q = rand_mat(&mut rng, 3, 3, 1.0);
        let q = &q + q.transpose();
        let lam = costate_backward(&model, &q, &z, &u).unwrap();
        let script = build_script_a_i(&model, &z, &u).unwrap();
        let lhs = &script * vec(&q);
        for j in 0..6 {
            let expected = build_o_b(&model, &z.column(j).into_owned()).transpose() * lam.get(j + 1);
            assert_relative_eq!(lhs.rows(2 * j, 2).into_owned(), expected, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn stacking_duplicates_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = model_from(rand_mat(&mut rng, 2, 2, 1.0), vec![rand_mat(&mut rng, 2, 2, 1.0)]);
        let z = rand_mat(&mut rng, 2, 6, 1.0);
        let u = rand_mat(&mut rng, 1, 5, 1.0);
        let one = LiftedBatch::from_lifted(&[(z.clone(), u.clone())]).unwrap();
        let two = LiftedBatch::from_lifted(&[(z.clone(), u.clone()), (z.clone(), u.clone())]).unwrap();
        let a1 = build_script_a(&model, &one).unwrap();
        assert_eq!(a1, build_script_a_i(&model, &z, &u).unwrap());
        let a2 = build_script_a(&model, &two).unwrap();
        assert_eq!(a2.rows(0, 4).into_owned(), a1);
        assert_eq!(a2.rows(4, 4).into_owned(), a1);
        assert_eq!(full_svd(&a1).rank(1e-10), full_svd(&a2).rank(1e-10));
    }

    #[test]
    fn linear_t3_expansion_and_zero_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_mat(&mut rng, 2, 2, 1.0);
        let b = rand_mat(&mut rng, 2, 1, 1.0);
        let z = rand_mat(&mut rng, 2, 4, 1.0);
        let u = rand_mat(&mut rng, 1, 3, 1.0);
        let lb = LiftedBatch::from_lifted(&[(z.clone(), u)]).unwrap();
        let script = build_script_a_linear(&a, &b, &lb).unwrap();
        let bt = b.transpose();
        let top = z.column(1).transpose().kronecker(&bt) + z.column(2).transpose().kronecker(&(&bt * a.transpose()));
        let bottom = z.column(2).transpose().kronecker(&bt);
        assert_relative_eq!(script.rows(0, 1).into_owned(), top, epsilon = 1e-14);
        assert_relative_eq!(script.rows(1, 1).into_owned(), bottom, epsilon = 1e-14);

        let zeros = LiftedBatch::from_lifted(&[(DMatrix::zeros(2, 4), DMatrix::zeros(1, 3))]).unwrap();
        assert!(build_script_a_linear(&a, &b, &zeros).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unactuated_detection() {
        let model = model_from(DMatrix::identity(2, 2), vec![DMatrix::zeros(2, 2)]);
        assert_eq!(detect_unactuated(&model, UNACTUATED_TOL), vec![0, 1]);
        let model = model_from(
            DMatrix::identity(3, 3),
            vec![DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
                 DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0])],
        );
        assert_eq!(detect_unactuated(&model, UNACTUATED_TOL), vec![0]);
    }

    #[test]
    fn empty_and_degenerate_solves_fail() {
        let layout = IocLayout { n_traj: 1, horizon: 3, m: 1, terminal_states: DMatrix::zeros(2, 1) };
        let err = solve_q(&DMatrix::zeros(0, 4), &DVector::zeros(0), &layout, &IocOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        let err = solve_q(&DMatrix::zeros(2, 4), &DVector::zeros(2), &layout, &IocOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateData(_)));
    }

    #[test]
    fn solution_is_minimum_norm_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_mat(&mut rng, 3, 9, 1.0);
        let rhs = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let layout = IocLayout { n_traj: 1, horizon: 5, m: 1, terminal_states: rand_mat(&mut rng, 3, 1, 1.0) };
        let est = solve_q(&a, &rhs, &layout, &IocOptions::default()).unwrap();
        assert_eq!(est.q, est.q.transpose());
        let basis = &est.diagnostics.nullspace_basis;
        assert_eq!(basis.ncols(), 3);
        assert!(!est.diagnostics.lemma5_satisfied);
        let vq = vech(&est.q);
        assert!((basis.transpose() * &vq).amax() <= 1e-8);
        let ad = &a * duplication_matrix(3);
        for c in 0..basis.ncols() {
            let shifted = &vq + basis.column(c) * 0.7;
            let res = (-&rhs - &ad * shifted).norm();
            assert!((res - est.ls_residual).abs() <= 1e-10);
        }
    }
}
