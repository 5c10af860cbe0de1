//! Observable dictionaries `z = θ(x)`.
//!
//! Every term depends on the state only, so a lifted trajectory never carries
//! control information. Terms keep the order they were given in; nothing is
//! sorted or deduplicated, so matrix layouts follow the configuration exactly.
//!
//! Gaussian RBF terms use `exp(-|x - c|^2 / (2 w^2))` with `w` the configured width.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryBatch;
use crate::error::{Error, Result};

/// A single observable `θ_i(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Term {
    /// `x_i`
    State { coordinate: usize },
    /// `Π_j x_j^{e_j}`; missing trailing exponents are zero.
    Monomial { exponents: Vec<u32> },
    /// `Σ_k c_k Π_j x_j^{e_kj}`, used by the analytic benchmark liftings.
    Polynomial {
        exponents: Vec<Vec<u32>>,
        coefficients: Vec<f64>,
    },
    Sin { coordinate: usize },
    Cos { coordinate: usize },
    /// Gaussian radial basis function.
    Rbf { center: Vec<f64>, width: f64 },
    Constant,
}

fn monomial(x: &DVector<f64>, e: &[u32]) -> f64 {
    e.iter()
        .enumerate()
        .map(|(j, &p)| x[j].powi(p as i32))
        .product()
}

fn monomial_grad(x: &DVector<f64>, e: &[u32], out: &mut DVector<f64>, scale: f64) {
    for (j, &pj) in e.iter().enumerate() {
        if pj == 0 {
            continue;
        }
        let mut v = scale * pj as f64 * x[j].powi(pj as i32 - 1);
        for (l, &pl) in e.iter().enumerate() {
            if l != j {
                v *= x[l].powi(pl as i32);
            }
        }
        out[j] += v;
    }
}

fn monomial_hess(x: &DVector<f64>, e: &[u32], out: &mut DMatrix<f64>, scale: f64) {
    for (a, &pa) in e.iter().enumerate() {
        if pa == 0 {
            continue;
        }
        for (b, &pb) in e.iter().enumerate() {
            if pb == 0 || (a == b && pa < 2) {
                continue;
            }
            let mut v = scale;
            for (l, &pl) in e.iter().enumerate() {
                let mut p = pl as i32;
                let mut c = 1.0;
                if l == a {
                    c *= p as f64;
                    p -= 1;
                }
                if l == b {
                    c *= p as f64;
                    p -= 1;
                }
                v *= c * x[l].powi(p);
            }
            out[(a, b)] += v;
        }
    }
}

impl Term {
    /// Largest coordinate index the term reads, if any.
    fn max_coordinate(&self) -> Option<usize> {
        match self {
            Term::State { coordinate } | Term::Sin { coordinate } | Term::Cos { coordinate } => {
                Some(*coordinate)
            }
            Term::Monomial { exponents } => exponents.iter().rposition(|&e| e > 0),
            Term::Polynomial { exponents, .. } => exponents
                .iter()
                .filter_map(|e| e.iter().rposition(|&p| p > 0))
                .max(),
            Term::Rbf { center, .. } => center.len().checked_sub(1),
            Term::Constant => None,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if let Some(c) = self.max_coordinate() {
            if c >= n {
                return Err(Error::InvalidInput(format!(
                    "term {self:?} references coordinate {c} but the state has dimension {n}"
                )));
            }
        }
        match self {
            Term::Monomial { exponents } if exponents.len() > n => Err(Error::InvalidInput(
                format!("monomial has {} exponents for a {n}-dimensional state", exponents.len()),
            )),
            Term::Polynomial {
                exponents,
                coefficients,
            } => {
                if exponents.len() != coefficients.len() || exponents.is_empty() {
                    return Err(Error::InvalidInput(
                        "polynomial needs one coefficient per exponent vector".into(),
                    ));
                }
                if exponents.iter().any(|e| e.len() > n) {
                    return Err(Error::InvalidInput("polynomial exponent vector too long".into()));
                }
                Ok(())
            }
            Term::Rbf { center, width } => {
                if center.len() != n {
                    return Err(Error::InvalidInput(format!(
                        "rbf center has length {}, expected {n}",
                        center.len()
                    )));
                }
                if !(*width > 0.0 && width.is_finite()) {
                    return Err(Error::InvalidInput(format!("rbf width must be positive, got {width}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            Term::State { coordinate } => x[*coordinate],
            Term::Monomial { exponents } => monomial(x, exponents),
            Term::Polynomial {
                exponents,
                coefficients,
            } => exponents
                .iter()
                .zip(coefficients)
                .map(|(e, c)| c * monomial(x, e))
                .sum(),
            Term::Sin { coordinate } => x[*coordinate].sin(),
            Term::Cos { coordinate } => x[*coordinate].cos(),
            Term::Rbf { center, width } => {
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c).powi(2)).sum();
                (-r2 / (2.0 * width * width)).exp()
            }
            Term::Constant => 1.0,
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        let mut g = DVector::zeros(n);
        match self {
            Term::State { coordinate } => g[*coordinate] = 1.0,
            Term::Monomial { exponents } => monomial_grad(x, exponents, &mut g, 1.0),
            Term::Polynomial {
                exponents,
                coefficients,
            } => {
                for (e, c) in exponents.iter().zip(coefficients) {
                    monomial_grad(x, e, &mut g, *c);
                }
            }
            Term::Sin { coordinate } => g[*coordinate] = x[*coordinate].cos(),
            Term::Cos { coordinate } => g[*coordinate] = -x[*coordinate].sin(),
            Term::Rbf { center, width } => {
                let phi = self.eval(x);
                let w2 = width * width;
                for j in 0..n {
                    g[j] = -phi * (x[j] - center[j]) / w2;
                }
            }
            Term::Constant => {}
        }
        g
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut h = DMatrix::zeros(n, n);
        match self {
            Term::State { .. } | Term::Constant => {}
            Term::Monomial { exponents } => monomial_hess(x, exponents, &mut h, 1.0),
            Term::Polynomial {
                exponents,
                coefficients,
            } => {
                for (e, c) in exponents.iter().zip(coefficients) {
                    monomial_hess(x, e, &mut h, *c);
                }
            }
            Term::Sin { coordinate } => h[(*coordinate, *coordinate)] = -x[*coordinate].sin(),
            Term::Cos { coordinate } => h[(*coordinate, *coordinate)] = -x[*coordinate].cos(),
            Term::Rbf { center, width } => {
                let phi = self.eval(x);
                let w2 = width * width;
                for a in 0..n {
                    for b in 0..n {
                        let da = (x[a] - center[a]) / w2;
                        let db = (x[b] - center[b]) / w2;
                        h[(a, b)] = phi * (da * db - if a == b { 1.0 / w2 } else { 0.0 });
                    }
                }
            }
        }
        h
    }
}

/// Ordered list of `N` observables over an `n`-dimensional state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    n: usize,
    terms: Vec<Term>,
}

impl Dictionary {
    pub fn new(n: usize, terms: Vec<Term>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("state dimension must be positive".into()));
        }
        if terms.is_empty() {
            return Err(Error::InvalidInput("dictionary must contain at least one term".into()));
        }
        for t in &terms {
            t.validate(n)?;
        }
        Ok(Dictionary { n, terms })
    }

    /// `θ(x) = x`.
    pub fn identity(n: usize) -> Self {
        Dictionary::new(n, (0..n).map(|coordinate| Term::State { coordinate }).collect())
            .expect("identity dictionary is well formed")
    }

    /// All monomials of total degree `1..=degree`, graded then lexicographic,
    /// optionally followed by the constant term.
    pub fn monomials(n: usize, degree: u32, with_constant: bool) -> Result<Self> {
        fn rec(n: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if prefix.len() == n - 1 {
                prefix.push(left);
                out.push(prefix.clone());
                prefix.pop();
                return;
            }
            for p in (0..=left).rev() {
                prefix.push(p);
                rec(n, left - p, prefix, out);
                prefix.pop();
            }
        }
        let mut terms = Vec::new();
        for d in 1..=degree {
            let mut exps = Vec::new();
            rec(n, d, &mut Vec::new(), &mut exps);
            for e in exps {
                let single = e.iter().filter(|&&p| p > 0).count() == 1 && d == 1;
                if single {
                    let coordinate = e.iter().position(|&p| p == 1).expect("degree-one");
                    terms.push(Term::State { coordinate });
                } else {
                    terms.push(Term::Monomial { exponents: e });
                }
            }
        }
        if with_constant {
            terms.push(Term::Constant);
        }
        Dictionary::new(n, terms)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Lifted dimension `N`.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn has_constant(&self) -> bool {
        self.terms.iter().any(|t| matches!(t, Term::Constant))
    }

    /// Indices of constant terms.
    pub fn constant_indices(&self) -> Vec<usize> {
        self.terms
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t, Term::Constant))
            .map(|(i, _)| i)
            .collect()
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "state has length {}, dictionary expects {}",
                x.len(),
                self.n
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("state contains non-finite values".into()));
        }
        Ok(())
    }

    /// `[θ_1(x), …, θ_N(x)]` in term order.
    pub fn lift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(self.lift_unchecked(x))
    }

    pub(crate) fn lift_unchecked(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.terms.len(), self.terms.iter().map(|t| t.eval(x)))
    }

    /// `N x n` matrix of partial derivatives `∂θ_i/∂x_j`.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        Ok(self.jacobian_unchecked(x))
    }

    pub(crate) fn jacobian_unchecked(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.terms.len(), self.n);
        for (i, t) in self.terms.iter().enumerate() {
            j.row_mut(i).copy_from(&t.gradient(x).transpose());
        }
        j
    }

    /// `Σ_i w_i ∇²θ_i(x)`.
    pub(crate) fn weighted_hessian(&self, x: &DVector<f64>, w: &DVector<f64>) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.n, self.n);
        for (t, &wi) in self.terms.iter().zip(w.iter()) {
            if wi != 0.0 {
                h += t.hessian(x) * wi;
            }
        }
        h
    }
}

/// Position of a lifted sample inside the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleIndex {
    pub trajectory: usize,
    pub step: usize,
}

/// Stacked lifted snapshots. Columns are grouped by trajectory: trajectory `i`
/// occupies columns `i*T .. (i+1)*T`, ordered by step.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedBatch {
    /// `θ(x_k)`, `N x (M T)`.
    pub z: DMatrix<f64>,
    /// `θ(x_{k+1})`, `N x (M T)`.
    pub y: DMatrix<f64>,
    /// `u_k`, `m x (M T)`.
    pub u: DMatrix<f64>,
    pub layout: Vec<SampleIndex>,
    pub n_traj: usize,
    pub horizon: usize,
}

impl LiftedBatch {
    /// Builds a batch from already-lifted per-trajectory sequences
    /// (`N x (T+1)` lifted states, `m x T` controls).
    pub fn from_lifted(trajectories: &[(DMatrix<f64>, DMatrix<f64>)]) -> Result<Self> {
        let (z0, u0) = trajectories
            .first()
            .ok_or_else(|| Error::InvalidInput("no trajectories".into()))?;
        let (big_n, m, t) = (z0.nrows(), u0.nrows(), u0.ncols());
        let total = trajectories.len() * t;
        let mut z = DMatrix::zeros(big_n, total);
        let mut y = DMatrix::zeros(big_n, total);
        let mut u = DMatrix::zeros(m, total);
        let mut layout = Vec::with_capacity(total);
        for (i, (zs, us)) in trajectories.iter().enumerate() {
            if zs.nrows() != big_n || us.nrows() != m || us.ncols() != t || zs.ncols() != t + 1 {
                return Err(Error::DimensionMismatch(format!(
                    "lifted trajectory {i} has inconsistent shape"
                )));
            }
            z.columns_mut(i * t, t).copy_from(&zs.columns(0, t));
            y.columns_mut(i * t, t).copy_from(&zs.columns(1, t));
            u.columns_mut(i * t, t).copy_from(us);
            layout.extend((0..t).map(|step| SampleIndex { trajectory: i, step }));
        }
        Ok(LiftedBatch {
            z,
            y,
            u,
            layout,
            n_traj: trajectories.len(),
            horizon: t,
        })
    }

    pub fn lifted_dim(&self) -> usize {
        self.z.nrows()
    }

    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    pub fn samples(&self) -> usize {
        self.z.ncols()
    }

    /// Lifted states `z_0 .. z_T` of trajectory `i` as an `N x (T+1)` matrix.
    pub fn trajectory_states(&self, i: usize) -> DMatrix<f64> {
        let t = self.horizon;
        let mut out = DMatrix::zeros(self.lifted_dim(), t + 1);
        out.columns_mut(0, t).copy_from(&self.z.columns(i * t, t));
        out.column_mut(t).copy_from(&self.y.column(i * t + t - 1));
        out
    }

    /// Controls `u_0 .. u_{T-1}` of trajectory `i`.
    pub fn trajectory_controls(&self, i: usize) -> DMatrix<f64> {
        self.u.columns(i * self.horizon, self.horizon).into_owned()
    }
}

/// Lifts every trajectory of the batch.
pub fn lift_batch(dict: &Dictionary, data: &TrajectoryBatch) -> Result<LiftedBatch> {
    if data.n() != dict.n() {
        return Err(Error::DimensionMismatch(format!(
            "data state dimension {} does not match dictionary dimension {}",
            data.n(),
            dict.n()
        )));
    }
    let lifted = data
        .trajectories
        .iter()
        .map(|tr| {
            let mut zs = DMatrix::zeros(dict.len(), tr.states.ncols());
            for k in 0..tr.states.ncols() {
                zs.column_mut(k).copy_from(&dict.lift(&tr.state(k))?);
            }
            Ok((zs, tr.controls.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    LiftedBatch::from_lifted(&lifted)
}
