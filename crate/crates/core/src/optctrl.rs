//! Finite-horizon optimal control over discrete dynamics.
//!
//! Minimizes `J = ½ Σ_{k=0}^{T−1} l(x_k, u_k)` (no terminal cost) over the
//! controls. The gradient comes from the discrete adjoint pass
//!
//! ```text
//! λ_T = 0,   λ_k = ½ ∂l/∂x_k + F_kᵀ λ_{k+1},   ∇_{u_k} J = ½ ∂l/∂u_k + G_kᵀ λ_{k+1}
//! ```
//!
//! with `F_k = ∂x_{k+1}/∂x_k`, `G_k = ∂x_{k+1}/∂u_k`. Steps are either plain
//! gradient descent or a Gauss–Newton direction from a Riccati pass over the
//! linearized problem, both safeguarded by Armijo backtracking.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilqr::CostEstimate;
use crate::data::{Trajectory, TrajectoryBatch};
use crate::edmdc::BilinearModel;
use crate::error::{Error, Result};
use crate::lifting::Dictionary;
use crate::linalg::eig_floor;

/// Discrete dynamics `x⁺ = f(x, u)` with Jacobians.
pub trait Dynamics: Sync {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// `(∂x⁺/∂x, ∂x⁺/∂u)`.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);
}

/// Stage cost `l(x, u)`; all derivatives are of `l` itself.
pub trait StageCost: Sync {
    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn grad_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn grad_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// Positive semidefinite approximation of `∂²l/∂x²`.
    fn hess_xx(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn hess_uu(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
}

/// `l(x,u) = θ(x)ᵀ Q θ(x) + uᵀ R u`.
///
/// A weighted basis cost `Σ ω_j ψ_j(x)² + Σ ρ_i u_i²` is the special case with a
/// dictionary `ψ` and diagonal weights, see [`QuadraticCost::weighted`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub dict: Dictionary,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl QuadraticCost {
    pub fn new(dict: Dictionary, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let big_n = dict.len();
        if q.shape() != (big_n, big_n) {
            return Err(Error::DimensionMismatch(format!(
                "Q is {:?}, dictionary has {big_n} terms",
                q.shape()
            )));
        }
        if !r.is_square() || r.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!("R is {:?}, expected square", r.shape())));
        }
        if !q.iter().chain(r.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("cost matrices contain non-finite values".into()));
        }
        let q = (&q + q.transpose()) * 0.5;
        let r = (&r + r.transpose()) * 0.5;
        if r.clone().cholesky().is_none() {
            return Err(Error::InvalidInput("R must be positive definite".into()));
        }
        Ok(QuadraticCost { dict, q, r })
    }

    /// Diagonal cost over the squares of `basis`: state weights first, then one
    /// weight per control channel.
    pub fn weighted(basis: Dictionary, weights: &[f64], m: usize) -> Result<Self> {
        let big_n = basis.len();
        if weights.len() != big_n + m {
            return Err(Error::InvalidParams(format!(
                "expected {} weights ({big_n} state, {m} control), got {}",
                big_n + m,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParams("weights must be finite and non-negative".into()));
        }
        if weights[big_n..].iter().any(|w| *w <= 0.0) {
            return Err(Error::InvalidParams("control weights must be positive".into()));
        }
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(&weights[..big_n]));
        let r = DMatrix::from_diagonal(&DVector::from_column_slice(&weights[big_n..]));
        QuadraticCost::new(basis, q, r)
    }
}

impl StageCost for QuadraticCost {
    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let th = self.dict.lift_unchecked(x);
        th.dot(&(&self.q * &th)) + u.dot(&(&self.r * u))
    }

    fn grad_x(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        let th = self.dict.lift_unchecked(x);
        let jac = self.dict.jacobian_unchecked(x);
        jac.transpose() * (&self.q * th) * 2.0
    }

    fn grad_u(&self, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.r * u * 2.0
    }

    fn hess_xx(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let th = self.dict.lift_unchecked(x);
        let jac = self.dict.jacobian_unchecked(x);
        let qth = &self.q * th;
        let full = jac.transpose() * &self.q * &jac + self.dict.weighted_hessian(x, &qth);
        eig_floor(&full, 0.0) * 2.0
    }

    fn hess_uu(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        &self.r * 2.0
    }
}

/// Lifted bilinear dynamics `z⁺ = A z + Σ_i u_i B_i z` acting directly on `z`.
pub struct LiftedBilinearDynamics<'a> {
    pub model: &'a BilinearModel,
}

impl Dynamics for LiftedBilinearDynamics<'_> {
    fn n(&self) -> usize {
        self.model.lifted_dim()
    }

    fn m(&self) -> usize {
        self.model.m()
    }

    fn step(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.model.step_lifted(z, u)
    }

    fn jacobians(&self, z: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            self.model.transition(u),
            crate::bilqr::build_o_b(self.model, z),
        )
    }
}

/// Decoded dynamics `x⁺ = C A θ(x) + Σ_i u_i C B_i θ(x)`.
pub struct DecodedBilinearDynamics {
    ca: DMatrix<f64>,
    cb: Vec<DMatrix<f64>>,
    dict: Dictionary,
}

impl DecodedBilinearDynamics {
    pub fn new(model: &BilinearModel) -> Self {
        DecodedBilinearDynamics {
            ca: &model.c * &model.a,
            cb: model.b.iter().map(|b| &model.c * b).collect(),
            dict: model.dict.clone(),
        }
    }
}

impl Dynamics for DecodedBilinearDynamics {
    fn n(&self) -> usize {
        self.ca.nrows()
    }

    fn m(&self) -> usize {
        self.cb.len()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let th = self.dict.lift_unchecked(x);
        let mut out = &self.ca * &th;
        for (i, cb) in self.cb.iter().enumerate() {
            out += cb * &th * u[i];
        }
        out
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let th = self.dict.lift_unchecked(x);
        let jac = self.dict.jacobian_unchecked(x);
        let mut m_u = self.ca.clone();
        let mut g = DMatrix::zeros(self.n(), self.m());
        for (i, cb) in self.cb.iter().enumerate() {
            m_u += cb * u[i];
            g.column_mut(i).copy_from(&(cb * &th));
        }
        (m_u * jac, g)
    }
}

/// `x_{k+1} = f(x_k, u_k)` for every column of `controls` (`m x T`).
pub fn rollout(
    dynamics: &dyn Dynamics,
    x0: &DVector<f64>,
    controls: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if x0.len() != dynamics.n() || controls.nrows() != dynamics.m() {
        return Err(Error::DimensionMismatch(format!(
            "x0 has {} entries and controls {} rows; dynamics expect n = {}, m = {}",
            x0.len(),
            controls.nrows(),
            dynamics.n(),
            dynamics.m()
        )));
    }
    if !x0.iter().chain(controls.iter()).all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite initial state or controls".into()));
    }
    let t = controls.ncols();
    let mut states = DMatrix::zeros(x0.len(), t + 1);
    states.column_mut(0).copy_from(x0);
    let mut x = x0.clone();
    for k in 0..t {
        x = dynamics.step(&x, &controls.column(k).into_owned());
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: k + 1 });
        }
        states.column_mut(k + 1).copy_from(&x);
    }
    Ok(states)
}

pub struct OcProblem<'a> {
    pub dynamics: &'a dyn Dynamics,
    pub cost: &'a dyn StageCost,
    pub x0: DVector<f64>,
    pub horizon: usize,
    pub dt: f64,
}

impl<'a> OcProblem<'a> {
    pub fn new(
        dynamics: &'a dyn Dynamics,
        cost: &'a dyn StageCost,
        x0: DVector<f64>,
        horizon: usize,
        dt: f64,
    ) -> Result<Self> {
        if horizon < 3 {
            return Err(Error::InvalidInput(format!("horizon must be at least 3, got {horizon}")));
        }
        if x0.len() != dynamics.n() {
            return Err(Error::DimensionMismatch(format!(
                "x0 has {} entries, dynamics expect {}",
                x0.len(),
                dynamics.n()
            )));
        }
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("x0 is not finite".into()));
        }
        check_dt(dt)?;
        Ok(OcProblem { dynamics, cost, x0, horizon, dt })
    }

    fn m(&self) -> usize {
        self.dynamics.m()
    }
}

/// Rejects non-positive steps and warns when `dt² ≪ dt` is doubtful.
pub fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt < 1.0) {
        return Err(Error::InvalidInput(format!("sampling time must lie in (0, 1), got {dt}")));
    }
    if dt >= 0.1 {
        log::warn!("sampling time {dt} is large; second-order discretization terms may matter");
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    GradientDescent,
    GaussNewton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_rule: StepRule,
    /// Halvings tried before the line search gives up.
    pub max_backtracks: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iter: 2000,
            grad_tol: 1e-8,
            step_rule: StepRule::GaussNewton,
            max_backtracks: 60,
        }
    }
}

const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
// Objective differences below this fraction of |J| are rounding noise.
const NOISE_REL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct OcSolution {
    /// `n x (T + 1)`.
    pub states: DMatrix<f64>,
    /// `m x T`.
    pub controls: DMatrix<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial guess.
    pub history: Vec<f64>,
}

impl OcSolution {
    pub fn to_trajectory(&self) -> Result<Trajectory> {
        Trajectory::new(self.states.clone(), self.controls.clone())
    }
}

fn objective_of(prob: &OcProblem, states: &DMatrix<f64>, controls: &DMatrix<f64>) -> f64 {
    (0..prob.horizon)
        .map(|k| {
            prob.cost
                .value(&states.column(k).into_owned(), &controls.column(k).into_owned())
        })
        .sum::<f64>()
        * 0.5
}

fn check_controls(prob: &OcProblem, controls: &DMatrix<f64>) -> Result<()> {
    if controls.shape() != (prob.m(), prob.horizon) {
        return Err(Error::DimensionMismatch(format!(
            "controls are {:?}, expected {:?}",
            controls.shape(),
            (prob.m(), prob.horizon)
        )));
    }
    Ok(())
}

/// `J` only.
pub fn objective(prob: &OcProblem, controls: &DMatrix<f64>) -> Result<f64> {
    check_controls(prob, controls)?;
    let states = rollout(prob.dynamics, &prob.x0, controls)?;
    Ok(objective_of(prob, &states, controls))
}

struct Linearization {
    f: Vec<DMatrix<f64>>,
    g: Vec<DMatrix<f64>>,
    lx: Vec<DVector<f64>>,
    lu: Vec<DVector<f64>>,
}

fn linearize(prob: &OcProblem, states: &DMatrix<f64>, controls: &DMatrix<f64>) -> Linearization {
    let t = prob.horizon;
    let mut lin = Linearization {
        f: Vec::with_capacity(t),
        g: Vec::with_capacity(t),
        lx: Vec::with_capacity(t),
        lu: Vec::with_capacity(t),
    };
    for k in 0..t {
        let x = states.column(k).into_owned();
        let u = controls.column(k).into_owned();
        let (f, g) = prob.dynamics.jacobians(&x, &u);
        lin.f.push(f);
        lin.g.push(g);
        lin.lx.push(prob.cost.grad_x(&x, &u) * 0.5);
        lin.lu.push(prob.cost.grad_u(&x, &u) * 0.5);
    }
    lin
}

fn adjoint_gradient(lin: &Linearization, n: usize, m: usize) -> DMatrix<f64> {
    let t = lin.f.len();
    let mut grad = DMatrix::zeros(m, t);
    let mut lam = DVector::zeros(n);
    for k in (0..t).rev() {
        grad.column_mut(k).copy_from(&(&lin.lu[k] + lin.g[k].transpose() * &lam));
        lam = &lin.lx[k] + lin.f[k].transpose() * &lam;
    }
    grad
}

/// `(J, ∇J)` with `∇J` shaped `m x T`.
pub fn objective_and_gradient(
    prob: &OcProblem,
    controls: &DMatrix<f64>,
) -> Result<(f64, DMatrix<f64>)> {
    check_controls(prob, controls)?;
    let states = rollout(prob.dynamics, &prob.x0, controls)?;
    let j = objective_of(prob, &states, controls);
    let lin = linearize(prob, &states, controls);
    Ok((j, adjoint_gradient(&lin, prob.dynamics.n(), prob.m())))
}

/// Costates `λ_1 … λ_T` (`n x T`, column `k − 1` is `λ_k`) at the given controls.
pub fn costates(prob: &OcProblem, controls: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_controls(prob, controls)?;
    let states = rollout(prob.dynamics, &prob.x0, controls)?;
    let lin = linearize(prob, &states, controls);
    let n = prob.dynamics.n();
    let t = prob.horizon;
    let mut out = DMatrix::zeros(n, t);
    let mut lam = DVector::zeros(n);
    for k in (1..t).rev() {
        lam = &lin.lx[k] + lin.f[k].transpose() * &lam;
        out.column_mut(k - 1).copy_from(&lam);
    }
    Ok(out)
}

/// Newton direction of the linear-quadratic model of `J` around the current
/// iterate (Riccati backward pass, open-loop forward pass).
fn gauss_newton_direction(
    prob: &OcProblem,
    states: &DMatrix<f64>,
    controls: &DMatrix<f64>,
    lin: &Linearization,
) -> Option<DMatrix<f64>> {
    let n = prob.dynamics.n();
    let m = prob.m();
    let t = prob.horizon;
    let mut p_mat = DMatrix::<f64>::zeros(n, n);
    let mut p_vec = DVector::<f64>::zeros(n);
    let mut gains = Vec::with_capacity(t);
    for k in (0..t).rev() {
        let x = states.column(k).into_owned();
        let u = controls.column(k).into_owned();
        let w = prob.cost.hess_xx(&x, &u) * 0.5;
        let ruu = prob.cost.hess_uu(&x, &u) * 0.5;
        let (f, g) = (&lin.f[k], &lin.g[k]);
        let pg = &p_mat * g;
        let q_uu = &ruu + g.transpose() * &pg;
        let q_ux = pg.transpose() * f;
        let q_xx = &w + f.transpose() * &p_mat * f;
        let q_u = &lin.lu[k] + g.transpose() * &p_vec;
        let q_x = &lin.lx[k] + f.transpose() * &p_vec;
        let q_uu = (&q_uu + q_uu.transpose()) * 0.5;
        let chol = q_uu.clone().cholesky()?;
        let ff = -chol.solve(&q_u);
        let kk = -chol.solve(&q_ux);
        let kt = kk.transpose();
        p_mat = &q_xx + &kt * &q_uu * &kk + &kt * &q_ux + q_ux.transpose() * &kk;
        p_mat = (&p_mat + p_mat.transpose()) * 0.5;
        p_vec = &q_x + &kt * &q_uu * &ff + &kt * &q_u + q_ux.transpose() * &ff;
        gains.push((ff, kk));
    }
    gains.reverse();
    let mut dir = DMatrix::zeros(m, t);
    let mut dx = DVector::zeros(n);
    for k in 0..t {
        let (ff, kk) = &gains[k];
        let du = ff + kk * &dx;
        dx = &lin.f[k] * &dx + &lin.g[k] * &du;
        dir.column_mut(k).copy_from(&du);
    }
    dir.iter().all(|v| v.is_finite()).then_some(dir)
}

/// Descent with Armijo backtracking from `init` (zeros when `None`).
pub fn solve(
    prob: &OcProblem,
    init: Option<&DMatrix<f64>>,
    opts: &SolveOptions,
) -> Result<OcSolution> {
    if !(opts.grad_tol > 0.0) {
        return Err(Error::InvalidInput("grad_tol must be positive".into()));
    }
    let n = prob.dynamics.n();
    let m = prob.m();
    let mut u = match init {
        Some(u0) => {
            check_controls(prob, u0)?;
            u0.clone()
        }
        None => DMatrix::zeros(m, prob.horizon),
    };
    let mut states = rollout(prob.dynamics, &prob.x0, &u)?;
    let mut j = objective_of(prob, &states, &u);
    let mut lin = linearize(prob, &states, &u);
    let mut grad = adjoint_gradient(&lin, n, m);
    let mut history = vec![j];
    let mut iterations = 0;
    while grad.norm() > opts.grad_tol && iterations < opts.max_iter {
        let mut candidates = Vec::with_capacity(2);
        if opts.step_rule == StepRule::GaussNewton {
            if let Some(d) = gauss_newton_direction(prob, &states, &u, &lin) {
                candidates.push(d);
            }
        }
        candidates.push(-&grad);
        let noise = NOISE_REL * j.abs();
        let grad_norm = grad.norm();
        let mut accepted = None;
        for dir in candidates {
            let slope = grad.dot(&dir);
            if !(slope < 0.0) {
                continue;
            }
            let mut alpha = 1.0;
            for _ in 0..opts.max_backtracks {
                let trial = &u + &dir * alpha;
                if let Ok(trial_states) = rollout(prob.dynamics, &prob.x0, &trial) {
                    let jt = objective_of(prob, &trial_states, &trial);
                    if jt <= j + ARMIJO_C * alpha * slope {
                        accepted = Some((trial, trial_states, jt));
                        break;
                    }
                    // Near the optimum the Armijo decrease drops below rounding
                    // noise in J; accept a step that still shrinks the gradient.
                    if jt <= j + noise {
                        let tl = linearize(prob, &trial_states, &trial);
                        if adjoint_gradient(&tl, n, m).norm() < grad_norm {
                            accepted = Some((trial, trial_states, jt));
                            break;
                        }
                    }
                }
                alpha *= SHRINK;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((un, sn, jn)) = accepted else {
            return Err(Error::Stalled {
                iteration: iterations,
                retries: opts.max_backtracks,
            });
        };
        u = un;
        states = sn;
        j = jn;
        lin = linearize(prob, &states, &u);
        grad = adjoint_gradient(&lin, n, m);
        history.push(j);
        iterations += 1;
    }
    let grad_norm = grad.norm();
    Ok(OcSolution {
        states,
        controls: u,
        objective: j,
        grad_norm,
        iterations,
        converged: grad_norm <= opts.grad_tol,
        history,
    })
}

/// Cost of a recovered estimate in the model's lifted coordinates.
pub fn estimate_cost(model: &BilinearModel, cost: &CostEstimate) -> Result<QuadraticCost> {
    if cost.q.nrows() != model.lifted_dim() || cost.r.nrows() != model.m() {
        return Err(Error::DimensionMismatch(format!(
            "cost (N = {}, m = {}) does not match model (N = {}, m = {})",
            cost.q.nrows(),
            cost.r.nrows(),
            model.lifted_dim(),
            model.m()
        )));
    }
    QuadraticCost::new(model.dict.clone(), cost.q.clone(), cost.r.clone())
}

/// Optimal trajectory of the decoded model under the estimated cost.
/// Non-convergence is reported through `converged`, not as an error.
pub fn predict(
    model: &BilinearModel,
    cost: &CostEstimate,
    x0: &DVector<f64>,
    horizon: usize,
    opts: &SolveOptions,
) -> Result<OcSolution> {
    let qc = estimate_cost(model, cost)?;
    let dynamics = DecodedBilinearDynamics::new(model);
    let prob = OcProblem::new(&dynamics, &qc, x0.clone(), horizon, model.dt)?;
    solve(&prob, None, opts)
}

/// Axis-aligned box for initial states.
#[derive(Debug, Clone, PartialEq)]
pub struct X0Box {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl X0Box {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidParams("x0 box bounds must have equal, positive length".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
            return Err(Error::InvalidParams("x0 box needs finite bounds with lo <= hi".into()));
        }
        Ok(X0Box { lo, hi })
    }

    /// `[−h, h]ⁿ`.
    pub fn symmetric(n: usize, half_width: f64) -> Result<Self> {
        X0Box::new(DVector::from_element(n, -half_width), DVector::from_element(n, half_width))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(self.lo.len(), |i, _| {
            if self.lo[i] < self.hi[i] {
                rng.random_range(self.lo[i]..self.hi[i])
            } else {
                self.lo[i]
            }
        })
    }
}

pub const GENERATION_RETRIES: usize = 5;

#[derive(Debug, Clone)]
pub struct GenerateSpec {
    pub n_traj: usize,
    pub horizon: usize,
    pub dt: f64,
    pub x0: X0Box,
    pub seed: u64,
}

/// Trajectory-index stream of the generator seeded by `seed`.
pub fn trajectory_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `M` optimal trajectories from sampled initial states. A draw whose solve
/// fails or does not converge is replaced by a fresh draw from the same
/// stream, at most [`GENERATION_RETRIES`] times.
pub fn generate_batch(
    dynamics: &dyn Dynamics,
    cost: &dyn StageCost,
    spec: &GenerateSpec,
    opts: &SolveOptions,
) -> Result<TrajectoryBatch> {
    if spec.n_traj == 0 {
        return Err(Error::Usage("number of trajectories must be positive".into()));
    }
    if spec.x0.lo.len() != dynamics.n() {
        return Err(Error::DimensionMismatch(format!(
            "x0 box has {} coordinates, system has {}",
            spec.x0.lo.len(),
            dynamics.n()
        )));
    }
    check_dt(spec.dt)?;
    let trajectories = (0..spec.n_traj)
        .into_par_iter()
        .map(|index| {
            let mut rng = trajectory_rng(spec.seed, index);
            for attempt in 0..GENERATION_RETRIES {
                let x0 = spec.x0.sample(&mut rng);
                let prob = OcProblem::new(dynamics, cost, x0, spec.horizon, spec.dt)?;
                match solve(&prob, None, opts) {
                    Ok(sol) if sol.converged => return sol.to_trajectory(),
                    Ok(sol) => log::debug!(
                        "trajectory {index} attempt {attempt}: not converged (|grad| = {:e})",
                        sol.grad_norm
                    ),
                    Err(e) => log::debug!("trajectory {index} attempt {attempt}: {e}"),
                }
            }
            Err(Error::Generation {
                index,
                attempts: GENERATION_RETRIES,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryBatch::new(spec.dt, trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// `x⁺ = a x + b u`, scalar or matrix.
    struct Linear {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
    }

    impl Dynamics for Linear {
        fn n(&self) -> usize {
            self.a.nrows()
        }
        fn m(&self) -> usize {
            self.b.ncols()
        }
        fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            &self.a * x + &self.b * u
        }
        fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
            (self.a.clone(), self.b.clone())
        }
    }

    fn scalar(a: f64, b: f64) -> Linear {
        Linear {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
        }
    }

    fn quad(n: usize, q: f64) -> QuadraticCost {
        QuadraticCost::new(
            Dictionary::identity(n),
            DMatrix::identity(n, n) * q,
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    #[test]
    fn integrator_rollout() {
        let dyn_ = scalar(0.0, 1.0);
        let chain = Linear { a: DMatrix::identity(1, 1), b: DMatrix::identity(1, 1) };
        let s = rollout(&chain, &DVector::zeros(1), &DMatrix::from_element(1, 2, 1.0)).unwrap();
        assert_eq!(s.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 2.0]);
        let s = rollout(&dyn_, &DVector::zeros(1), &DMatrix::from_element(1, 2, 1.0)).unwrap();
        assert_eq!(s.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn blow_up_names_step() {
        let dyn_ = scalar(1e200, 0.0);
        let err = rollout(&dyn_, &DVector::from_element(1, 1e200), &DMatrix::zeros(1, 4)).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1 }));
    }

    #[test]
    fn control_only_cost() {
        let dyn_ = scalar(0.9, 1.0);
        let cost = quad(1, 0.0);
        let prob = OcProblem::new(&dyn_, &cost, DVector::from_element(1, 0.7), 4, 0.01).unwrap();
        let u = DMatrix::from_row_slice(1, 4, &[0.5, -1.0, 2.0, 0.25]);
        let (j, g) = objective_and_gradient(&prob, &u).unwrap();
        assert_relative_eq!(j, 0.5 * u.norm_squared(), epsilon = 1e-15);
        assert_relative_eq!(g, u, epsilon = 1e-15);
    }

    #[test]
    fn zero_state_cost_gives_zero_controls() {
        let dyn_ = scalar(1.1, 1.0);
        let cost = quad(1, 0.0);
        let prob = OcProblem::new(&dyn_, &cost, DVector::from_element(1, 3.0), 6, 0.01).unwrap();
        let sol = solve(&prob, Some(&DMatrix::from_element(1, 6, 0.3)), &SolveOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.controls.amax() <= 1e-8);
        assert!(sol.objective.abs() <= 1e-15);
    }

    #[test]
    fn short_horizon_rejected() {
        let dyn_ = scalar(1.0, 1.0);
        let cost = quad(1, 1.0);
        assert!(OcProblem::new(&dyn_, &cost, DVector::zeros(1), 2, 0.01).is_err());
        assert!(OcProblem::new(&dyn_, &cost, DVector::zeros(1), 3, 0.0).is_err());
    }

    #[test]
    fn gradient_descent_is_monotone() {
        let dyn_ = scalar(1.0, 1.0);
        let cost = quad(1, 1.0);
        let prob = OcProblem::new(&dyn_, &cost, DVector::from_element(1, 1.0), 10, 0.01).unwrap();
        let opts = SolveOptions { step_rule: StepRule::GradientDescent, ..Default::default() };
        let sol = solve(&prob, None, &opts).unwrap();
        assert!(sol.converged, "{} {} {:?}", sol.grad_norm, sol.iterations, &sol.history[sol.history.len()-3..]);
        assert!(sol.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + NOISE_REL)));
        let gn = solve(&prob, None, &SolveOptions::default()).unwrap();
        assert_relative_eq!(gn.controls, sol.controls, epsilon = 1e-7);
        assert!(gn.iterations <= 3);
    }

    #[test]
    fn costates_satisfy_stationarity_at_optimum() {
        let dyn_ = Linear {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
        };
        let cost = quad(2, 1.0);
        let prob = OcProblem::new(&dyn_, &cost, DVector::from_vec(vec![1.0, -1.0]), 12, 0.1).unwrap();
        let sol = solve(&prob, None, &SolveOptions::default()).unwrap();
        let lam = costates(&prob, &sol.controls).unwrap();
        for k in 0..12 {
            let lam_next = if k + 1 < 12 { lam.column(k).into_owned() } else { DVector::zeros(2) };
            let stat = sol.controls.column(k) + dyn_.b.transpose() * lam_next;
            assert!(stat.norm() <= 1e-8);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let dyn_ = scalar(1.0, 1.0);
        let cost = quad(1, 1.0);
        let spec = GenerateSpec {
            n_traj: 3,
            horizon: 5,
            dt: 0.01,
            x0: X0Box::symmetric(1, 1.0).unwrap(),
            seed: 11,
        };
        let a = generate_batch(&dyn_, &cost, &spec, &SolveOptions::default()).unwrap();
        let b = generate_batch(&dyn_, &cost, &spec, &SolveOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(a.horizon(), 5);
        let zero = GenerateSpec { n_traj: 0, ..spec };
        assert!(matches!(
            generate_batch(&dyn_, &cost, &zero, &SolveOptions::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn weighted_cost_validation() {
        let basis = Dictionary::identity(2);
        assert!(QuadraticCost::weighted(basis.clone(), &[1.0, 1.0], 1).is_err());
        assert!(QuadraticCost::weighted(basis.clone(), &[1.0, 1.0, 0.0], 1).is_err());
        let c = QuadraticCost::weighted(basis, &[1.0, 2.0, 3.0], 1).unwrap();
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let u = DVector::from_element(1, 1.0);
        assert_relative_eq!(c.value(&x, &u), 6.0);
    }
}
