//! Analytic benchmark systems: exact discrete dynamics with Jacobians, their
//! liftings, the exact lifted bilinear matrices where they exist, and the
//! default weighted-basis costs.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::edmdc::BilinearModel;
use crate::error::{Error, Result};
use crate::lifting::{Dictionary, Term};
use crate::optctrl::{check_dt, Dynamics, QuadraticCost, X0Box};

pub const SYSTEM_NAMES: [&str; 4] = ["example1", "example2", "unicycle", "linear-lqr"];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    /// `x1⁺ = a x1`, `x2⁺ = b x2 + (b − a²) x1² + u`.
    Example1 { a: f64, b: f64 },
    /// Euler discretization of `ẋ1 = c x1 + u1`, `ẋ2 = d x2 + (d − 2c) x1² + x1² u1 + u2`.
    Example2 { c: f64, d: f64 },
    /// Euler unicycle `(u1 cos x3, u1 sin x3, u2)`.
    Unicycle,
    /// Double integrator.
    LinearLqr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticSystem {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub dt: f64,
    kind: Kind,
    lifting: Dictionary,
    cost_basis: Dictionary,
    /// Rows express each cost basis function in the lifting coordinates.
    cost_map: DMatrix<f64>,
    default_weights: Vec<f64>,
}

fn poly(exponents: Vec<Vec<u32>>, coefficients: Vec<f64>) -> Term {
    Term::Polynomial { exponents, coefficients }
}

fn state(i: usize) -> Term {
    Term::State { coordinate: i }
}

fn take_params(
    name: &str,
    given: &BTreeMap<String, f64>,
    defaults: &[(&str, f64)],
) -> Result<BTreeMap<String, f64>> {
    for key in given.keys() {
        if !defaults.iter().any(|(k, _)| k == key) {
            return Err(Error::InvalidParams(format!("system `{name}` has no parameter `{key}`")));
        }
    }
    let mut out = BTreeMap::new();
    for (k, v) in defaults {
        let val = given.get(*k).copied().unwrap_or(*v);
        if !(0.0..=1.0).contains(&val) {
            return Err(Error::InvalidParams(format!("parameter `{k}` = {val} must lie in [0, 1]")));
        }
        out.insert(k.to_string(), val);
    }
    Ok(out)
}

/// Builds a registered system. Missing parameters take their defaults
/// (`a = 0.9, b = 0.8` for example1, `c = 0.3, d = 0.2` for example2).
pub fn make_system(name: &str, params: &BTreeMap<String, f64>, dt: f64) -> Result<AnalyticSystem> {
    check_dt(dt).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let (kind, params, lifting, cost_basis, cost_map, weights) = match name {
        "example1" => {
            let p = take_params(name, params, &[("a", 0.9), ("b", 0.8)])?;
            let lifting = Dictionary::new(
                2,
                vec![
                    state(0),
                    poly(vec![vec![0, 1], vec![2, 0]], vec![1.0, 1.0]),
                    Term::Monomial { exponents: vec![2, 0] },
                ],
            )?;
            let basis = Dictionary::identity(2);
            let map = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, -1.0]);
            (Kind::Example1 { a: p["a"], b: p["b"] }, p, lifting, basis, map, vec![1.0, 1.0, 1.0])
        }
        "example2" => {
            let p = take_params(name, params, &[("c", 0.3), ("d", 0.2)])?;
            let lifting = Dictionary::new(
                2,
                vec![
                    state(0),
                    poly(vec![vec![0, 1], vec![2, 0]], vec![1.0, 1.0]),
                    Term::Monomial { exponents: vec![2, 0] },
                    Term::Constant,
                ],
            )?;
            // x1², x2², x1⁴, 1 as squares of x1, x2, x1², 1
            let basis = Dictionary::new(
                2,
                vec![state(0), state(1), Term::Monomial { exponents: vec![2, 0] }, Term::Constant],
            )?;
            #[rustfmt::skip]
            let map = DMatrix::from_row_slice(4, 4, &[
                1.0, 0.0, 0.0, 0.0,
                0.0, 1.0, -1.0, 0.0,
                0.0, 0.0, 1.0, 0.0,
                0.0, 0.0, 0.0, 1.0,
            ]);
            let w = vec![1.0, 2.0, 3.0, 1.0, 1.0, 1.0];
            (Kind::Example2 { c: p["c"], d: p["d"] }, p, lifting, basis, map, w)
        }
        "unicycle" => {
            let p = take_params(name, params, &[])?;
            let lifting = Dictionary::new(
                3,
                vec![
                    state(0),
                    state(1),
                    state(2),
                    Term::Cos { coordinate: 2 },
                    Term::Sin { coordinate: 2 },
                    Term::Constant,
                ],
            )?;
            let w = vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0];
            (Kind::Unicycle, p, lifting.clone(), lifting, DMatrix::identity(6, 6), w)
        }
        "linear-lqr" => {
            let p = take_params(name, params, &[])?;
            let lifting = Dictionary::new(2, vec![state(0), state(1), Term::Constant])?;
            let basis = Dictionary::identity(2);
            let map = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
            (Kind::LinearLqr, p, lifting, basis, map, vec![1.0, 1.0, 1.0])
        }
        other => return Err(Error::UnknownSystem(other.to_string())),
    };
    Ok(AnalyticSystem {
        name: name.to_string(),
        params,
        dt,
        kind,
        lifting,
        cost_basis,
        cost_map,
        default_weights: weights,
    })
}

impl AnalyticSystem {
    pub fn lifting(&self) -> &Dictionary {
        &self.lifting
    }

    pub fn cost_basis(&self) -> &Dictionary {
        &self.cost_basis
    }

    pub fn default_weights(&self) -> &[f64] {
        &self.default_weights
    }

    pub fn default_x0_box(&self) -> X0Box {
        X0Box::symmetric(self.n(), 1.0).expect("unit box is valid")
    }

    /// Weighted-basis cost: state weights for the squared basis functions,
    /// then one weight per control.
    pub fn cost(&self, weights: &[f64]) -> Result<QuadraticCost> {
        QuadraticCost::weighted(self.cost_basis.clone(), weights, self.m())
    }

    pub fn default_cost(&self) -> QuadraticCost {
        self.cost(&self.default_weights).expect("default weights are valid")
    }

    /// The same state cost written as `θ(x)ᵀ Q θ(x)` in the lifting coordinates.
    pub fn lifted_q(&self, weights: &[f64]) -> Result<DMatrix<f64>> {
        let cost = self.cost(weights)?;
        Ok(self.cost_map.transpose() * cost.q * &self.cost_map)
    }

    /// `x = C θ(x)` for the analytic lifting.
    pub fn decoder(&self) -> DMatrix<f64> {
        match self.kind {
            Kind::Example1 { .. } => DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, -1.0]),
            Kind::Example2 { .. } => {
                DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.0])
            }
            Kind::Unicycle => {
                let mut c = DMatrix::zeros(3, 6);
                c.view_mut((0, 0), (3, 3)).fill_with_identity();
                c
            }
            Kind::LinearLqr => DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        }
    }

    /// Exact lifted matrices `(A, [B_i])` in discrete time. Example 2 carries an
    /// extra `dt² u1²` term in its second and third lifted rows and the
    /// unicycle an `O(dt² u2²)` term in its heading rows; both are dropped here.
    /// `None` for example1, whose lifting has no constant term to carry the input.
    pub fn analytic_bilinear(&self) -> Option<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let dt = self.dt;
        match self.kind {
            Kind::Example1 { .. } => None,
            Kind::Example2 { c, d } => {
                let mut a = DMatrix::zeros(4, 4);
                a[(0, 0)] = 1.0 + c * dt;
                a[(1, 1)] = 1.0 + d * dt;
                a[(1, 2)] = c * c * dt * dt;
                a[(2, 2)] = (1.0 + c * dt).powi(2);
                a[(3, 3)] = 1.0;
                let mut b1 = DMatrix::zeros(4, 4);
                b1[(0, 3)] = dt;
                b1[(1, 0)] = 2.0 * dt + 2.0 * c * dt * dt;
                b1[(1, 2)] = dt;
                b1[(2, 0)] = 2.0 * dt + 2.0 * c * dt * dt;
                let mut b2 = DMatrix::zeros(4, 4);
                b2[(1, 3)] = dt;
                Some((a, vec![b1, b2]))
            }
            Kind::Unicycle => {
                let mut b1 = DMatrix::zeros(6, 6);
                b1[(0, 3)] = dt;
                b1[(1, 4)] = dt;
                let mut b2 = DMatrix::zeros(6, 6);
                b2[(2, 5)] = dt;
                b2[(3, 4)] = -dt;
                b2[(4, 3)] = dt;
                Some((DMatrix::identity(6, 6), vec![b1, b2]))
            }
            Kind::LinearLqr => {
                let a = DMatrix::from_row_slice(3, 3, &[1.0, dt, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
                let mut b1 = DMatrix::zeros(3, 3);
                b1[(1, 2)] = dt;
                Some((a, vec![b1]))
            }
        }
    }

    /// Exact linear lifted matrices `(A, B)` for example1.
    pub fn analytic_linear(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        match self.kind {
            Kind::Example1 { a, b } => Some((
                DMatrix::from_diagonal(&DVector::from_vec(vec![a, b, a * a])),
                DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]),
            )),
            _ => None,
        }
    }

    /// The analytic bilinear matrices packaged as a model with the analytic decoder.
    pub fn analytic_model(&self) -> Option<BilinearModel> {
        let (a, b) = self.analytic_bilinear()?;
        BilinearModel::from_parts(a, b, self.decoder(), self.lifting.clone(), self.dt).ok()
    }
}

impl Dynamics for AnalyticSystem {
    fn n(&self) -> usize {
        match self.kind {
            Kind::Unicycle => 3,
            _ => 2,
        }
    }

    fn m(&self) -> usize {
        match self.kind {
            Kind::Example1 { .. } | Kind::LinearLqr => 1,
            _ => 2,
        }
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let dt = self.dt;
        match self.kind {
            Kind::Example1 { a, b } => DVector::from_vec(vec![
                a * x[0],
                b * x[1] + (b - a * a) * x[0] * x[0] + u[0],
            ]),
            Kind::Example2 { c, d } => {
                let x1s = x[0] * x[0];
                DVector::from_vec(vec![
                    (1.0 + c * dt) * x[0] + dt * u[0],
                    (1.0 + d * dt) * x[1] + (d - 2.0 * c) * dt * x1s + dt * x1s * u[0] + dt * u[1],
                ])
            }
            Kind::Unicycle => DVector::from_vec(vec![
                x[0] + dt * u[0] * x[2].cos(),
                x[1] + dt * u[0] * x[2].sin(),
                x[2] + dt * u[1],
            ]),
            Kind::LinearLqr => DVector::from_vec(vec![x[0] + dt * x[1], x[1] + dt * u[0]]),
        }
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let dt = self.dt;
        match self.kind {
            Kind::Example1 { a, b } => (
                DMatrix::from_row_slice(2, 2, &[a, 0.0, 2.0 * (b - a * a) * x[0], b]),
                DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            ),
            Kind::Example2 { c, d } => (
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        1.0 + c * dt,
                        0.0,
                        2.0 * (d - 2.0 * c) * dt * x[0] + 2.0 * dt * x[0] * u[0],
                        1.0 + d * dt,
                    ],
                ),
                DMatrix::from_row_slice(2, 2, &[dt, 0.0, dt * x[0] * x[0], dt]),
            ),
            Kind::Unicycle => {
                let (s, c) = x[2].sin_cos();
                (
                    DMatrix::from_row_slice(
                        3,
                        3,
                        &[1.0, 0.0, -dt * u[0] * s, 0.0, 1.0, dt * u[0] * c, 0.0, 0.0, 1.0],
                    ),
                    DMatrix::from_row_slice(3, 2, &[dt * c, 0.0, dt * s, 0.0, 0.0, dt]),
                )
            }
            Kind::LinearLqr => (
                DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
                DMatrix::from_column_slice(2, 1, &[0.0, dt]),
            ),
        }
    }
}

/// Largest `‖θ(f(x,u)) − (A + Σ u_i B_i) θ(x)‖_∞` over the samples.
pub fn analytic_lift_check(
    sys: &AnalyticSystem,
    samples: &[(DVector<f64>, DVector<f64>)],
) -> Result<f64> {
    let model = sys.analytic_model().ok_or_else(|| {
        Error::InvalidInput(format!("system `{}` has no analytic bilinear lifting", sys.name))
    })?;
    let dict = sys.lifting();
    let mut worst = 0.0_f64;
    for (x, u) in samples {
        let z_next = dict.lift(&sys.step(x, u))?;
        let pred = model.step_lifted(&dict.lift(x)?, u);
        worst = worst.max((z_next - pred).amax());
    }
    Ok(worst)
}

/// Parses `key=value,key=value`.
pub fn parse_params(spec: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::InvalidParams(format!("expected key=value, got `{item}`")))?;
        let val: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidParams(format!("`{v}` is not a number")))?;
        out.insert(k.trim().to_string(), val);
    }
    Ok(out)
}
