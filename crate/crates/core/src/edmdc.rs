//! Extended DMD with control: closed-form least-squares fits of linear and
//! bilinear lifted models, plus the decoder back to the original state.
//!
//! The bilinear fit solves
//! `min ‖θ(Y) − [A B_1 … B_m] Φ‖_F` with `Φ = [θ(X); θ(X)⊙U_1; …; θ(X)⊙U_m]`,
//! where row block `i+1` of `Φ` is `θ(X)` with column `k` scaled by `u_{i,k}`.
//! The minimum-norm solution `θ(Y) Φ^†` is taken.
//!
//! `residual` is `‖θ(Y) − [A B] Φ‖_F / sqrt(M T)`.

use nalgebra::{DMatrix, DVector};

use crate::data::TrajectoryBatch;
use crate::error::{Error, Result};
use crate::lifting::{lift_batch, Dictionary, LiftedBatch};
use crate::linalg::{all_finite, pinv, PINV_REL_TOL};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Relative singular-value cutoff of the pseudo-inverse.
    pub rel_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            rel_tol: PINV_REL_TOL,
        }
    }
}

/// Discrete-time lifted model `z⁺ = A z + Σ_i u_i B_i z`, `x = C z`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearModel {
    pub a: DMatrix<f64>,
    pub b: Vec<DMatrix<f64>>,
    pub c: DMatrix<f64>,
    pub dict: Dictionary,
    pub dt: f64,
    pub residual: f64,
    pub warnings: Vec<String>,
}

/// Discrete-time lifted model `z⁺ = A z + B u`, `x = C z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub dict: Dictionary,
    pub dt: f64,
    pub residual: f64,
    pub warnings: Vec<String>,
}

impl BilinearModel {
    /// Assembles a model from known matrices (residual zero, no warnings).
    pub fn from_parts(
        a: DMatrix<f64>,
        b: Vec<DMatrix<f64>>,
        c: DMatrix<f64>,
        dict: Dictionary,
        dt: f64,
    ) -> Result<Self> {
        let model = BilinearModel {
            a,
            b,
            c,
            dict,
            dt,
            residual: 0.0,
            warnings: Vec::new(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let big_n = self.dict.len();
        if self.a.shape() != (big_n, big_n) {
            return Err(Error::DimensionMismatch(format!(
                "A is {:?}, expected {big_n}x{big_n}",
                self.a.shape()
            )));
        }
        if self.b.is_empty() {
            return Err(Error::DimensionMismatch("model has no input channels".into()));
        }
        if let Some(bad) = self.b.iter().position(|b| b.shape() != (big_n, big_n)) {
            return Err(Error::DimensionMismatch(format!(
                "B_{} is {:?}, expected {big_n}x{big_n}",
                bad + 1,
                self.b[bad].shape()
            )));
        }
        if self.c.shape() != (self.dict.n(), big_n) {
            return Err(Error::DimensionMismatch(format!(
                "C is {:?}, expected {}x{big_n}",
                self.c.shape(),
                self.dict.n()
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidInput(format!("dt must be positive, got {}", self.dt)));
        }
        if !(all_finite(&self.a) && all_finite(&self.c) && self.b.iter().all(all_finite)) {
            return Err(Error::InvalidInput("model matrices contain non-finite entries".into()));
        }
        if !(self.residual >= 0.0) {
            return Err(Error::InvalidInput("residual must be nonnegative".into()));
        }
        Ok(())
    }

    /// Lifted dimension `N`.
    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.dict.n()
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }

    /// `A + Σ_i u_i B_i`.
    pub fn transition(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let mut o = self.a.clone();
        for (bi, &ui) in self.b.iter().zip(u.iter()) {
            o += bi * ui;
        }
        o
    }

    /// One lifted step `z⁺ = (A + Σ_i u_i B_i) z`.
    pub fn step_lifted(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.transition(u) * z
    }

    /// `[A | B_1 | … | B_m]`, `N x N(1+m)`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let big_n = self.lifted_dim();
        let mut out = DMatrix::zeros(big_n, big_n * (1 + self.m()));
        out.columns_mut(0, big_n).copy_from(&self.a);
        for (i, bi) in self.b.iter().enumerate() {
            out.columns_mut(big_n * (i + 1), big_n).copy_from(bi);
        }
        out
    }

    /// Root-mean-square one-step prediction error over a lifted batch.
    pub fn replay_residual(&self, lifted: &LiftedBatch) -> f64 {
        let err = &lifted.y - self.stacked() * bilinear_regressor(lifted);
        err.norm() / (lifted.samples() as f64).sqrt()
    }

    /// First-order continuous-time matrices `((A − I)/dt, B_i/dt)`.
    pub fn continuous(&self) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let big_n = self.lifted_dim();
        let a = (&self.a - DMatrix::identity(big_n, big_n)) / self.dt;
        let b = self.b.iter().map(|bi| bi / self.dt).collect();
        (a, b)
    }
}

impl LinearModel {
    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn stacked(&self) -> DMatrix<f64> {
        let big_n = self.lifted_dim();
        let mut out = DMatrix::zeros(big_n, big_n + self.m());
        out.columns_mut(0, big_n).copy_from(&self.a);
        out.columns_mut(big_n, self.m()).copy_from(&self.b);
        out
    }

    pub fn replay_residual(&self, lifted: &LiftedBatch) -> f64 {
        let err = &lifted.y - self.stacked() * linear_regressor(lifted);
        err.norm() / (lifted.samples() as f64).sqrt()
    }
}

/// `[θ(X); θ(X)⊙𝟙U_1; …; θ(X)⊙𝟙U_m]`.
pub fn bilinear_regressor(lifted: &LiftedBatch) -> DMatrix<f64> {
    let big_n = lifted.lifted_dim();
    let m = lifted.m();
    let cols = lifted.samples();
    let mut phi = DMatrix::zeros(big_n * (1 + m), cols);
    phi.rows_mut(0, big_n).copy_from(&lifted.z);
    for i in 0..m {
        let mut block = lifted.z.clone();
        for (k, mut col) in block.column_iter_mut().enumerate() {
            col *= lifted.u[(i, k)];
        }
        phi.rows_mut(big_n * (i + 1), big_n).copy_from(&block);
    }
    phi
}

/// `[θ(X); Υ]`.
pub fn linear_regressor(lifted: &LiftedBatch) -> DMatrix<f64> {
    let big_n = lifted.lifted_dim();
    let m = lifted.m();
    let mut phi = DMatrix::zeros(big_n + m, lifted.samples());
    phi.rows_mut(0, big_n).copy_from(&lifted.z);
    phi.rows_mut(big_n, m).copy_from(&lifted.u);
    phi
}

/// `‖θ(Y) − Θ Φ‖_F²` for a candidate `Θ = [A B]`.
pub fn frobenius_objective(lifted: &LiftedBatch, theta: &DMatrix<f64>, bilinear: bool) -> f64 {
    let phi = if bilinear {
        bilinear_regressor(lifted)
    } else {
        linear_regressor(lifted)
    };
    (&lifted.y - theta * phi).norm_squared()
}

fn regression(
    target: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    rel_tol: f64,
) -> Result<DMatrix<f64>> {
    if phi.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateData("regressor matrix has rank 0".into()));
    }
    if !all_finite(phi) || !all_finite(target) {
        return Err(Error::InvalidInput("non-finite lifted data".into()));
    }
    Ok(target * pinv(phi, rel_tol))
}

fn structural_warnings(lifted: &LiftedBatch, dict: Option<&Dictionary>, params: usize) -> Vec<String> {
    let mut warnings = Vec::new();
    if lifted.samples() < params {
        let msg = format!(
            "underdetermined regression: {} samples for {} regressors per row",
            lifted.samples(),
            params
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    if let Some(d) = dict {
        if !d.has_constant() {
            let msg = "dictionary has no constant term; additive control cannot be represented by a separable bilinear model".to_string();
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    warnings
}

/// Bilinear fit on already-lifted snapshots. Returns `(A, [B_i], residual, warnings)`.
pub fn fit_bilinear_lifted(
    lifted: &LiftedBatch,
    opts: &FitOptions,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>, f64, Vec<String>)> {
    let big_n = lifted.lifted_dim();
    let m = lifted.m();
    let phi = bilinear_regressor(lifted);
    let theta = regression(&lifted.y, &phi, opts.rel_tol)?;
    let residual = (&lifted.y - &theta * &phi).norm() / (lifted.samples() as f64).sqrt();
    let a = theta.columns(0, big_n).into_owned();
    let b = (0..m)
        .map(|i| theta.columns(big_n * (i + 1), big_n).into_owned())
        .collect();
    let warnings = structural_warnings(lifted, None, big_n * (1 + m));
    Ok((a, b, residual, warnings))
}

/// Fits `z⁺ = A z + Σ u_i B_i z` and the decoder `C` from trajectory data.
pub fn fit_bilinear(data: &TrajectoryBatch, dict: &Dictionary) -> Result<BilinearModel> {
    fit_bilinear_with(data, dict, &FitOptions::default())
}

pub fn fit_bilinear_with(
    data: &TrajectoryBatch,
    dict: &Dictionary,
    opts: &FitOptions,
) -> Result<BilinearModel> {
    let lifted = lift_batch(dict, data)?;
    let (a, b, residual, _) = fit_bilinear_lifted(&lifted, opts)?;
    let warnings = structural_warnings(&lifted, Some(dict), lifted.lifted_dim() * (1 + lifted.m()));
    let c = fit_decoder_with(data, dict, opts)?;
    let model = BilinearModel {
        a,
        b,
        c,
        dict: dict.clone(),
        dt: data.dt,
        residual,
        warnings,
    };
    model.validate()?;
    Ok(model)
}

/// Fits `z⁺ = A z + B u` and the decoder `C` from trajectory data.
pub fn fit_linear(data: &TrajectoryBatch, dict: &Dictionary) -> Result<LinearModel> {
    fit_linear_with(data, dict, &FitOptions::default())
}

pub fn fit_linear_with(
    data: &TrajectoryBatch,
    dict: &Dictionary,
    opts: &FitOptions,
) -> Result<LinearModel> {
    let lifted = lift_batch(dict, data)?;
    let (a, b, residual) = fit_linear_lifted(&lifted, opts)?;
    let mut warnings = structural_warnings(&lifted, None, lifted.lifted_dim() + lifted.m());
    warnings.dedup();
    let c = fit_decoder_with(data, dict, opts)?;
    Ok(LinearModel {
        a,
        b,
        c,
        dict: dict.clone(),
        dt: data.dt,
        residual,
        warnings,
    })
}

pub fn fit_linear_lifted(
    lifted: &LiftedBatch,
    opts: &FitOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let big_n = lifted.lifted_dim();
    let phi = linear_regressor(lifted);
    let theta = regression(&lifted.y, &phi, opts.rel_tol)?;
    let residual = (&lifted.y - &theta * &phi).norm() / (lifted.samples() as f64).sqrt();
    Ok((
        theta.columns(0, big_n).into_owned(),
        theta.columns(big_n, lifted.m()).into_owned(),
        residual,
    ))
}

/// `C = X θ(X)^†`, the least-squares decoder from lifted to original states.
pub fn fit_decoder(data: &TrajectoryBatch, dict: &Dictionary) -> Result<DMatrix<f64>> {
    fit_decoder_with(data, dict, &FitOptions::default())
}

pub fn fit_decoder_with(
    data: &TrajectoryBatch,
    dict: &Dictionary,
    opts: &FitOptions,
) -> Result<DMatrix<f64>> {
    let x = data.stacked_states();
    let lifted = lift_batch(dict, data)?;
    regression(&x, &lifted.z, opts.rel_tol)
}
