//! TOML run configuration with `[dictionary]`, `[fit]`, `[solver]` and `[ioc]`
//! sections. Every key is optional.
//!
//! ```toml
//! [dictionary]
//! kind = "monomials"   # system | identity | monomials | terms
//! n = 2
//! degree = 2
//! constant = true
//!
//! [fit]
//! rel_tol = 1e-10
//!
//! [solver]
//! grad_tol = 1e-8
//! max_iter = 2000
//! step_rule = "gauss-newton"
//!
//! [ioc]
//! rel_tol = 1e-8
//! solve_rel_tol = 1e-8
//! psd_project = false
//! r = [[1.0, 0.0], [0.0, 1.0]]
//! ```

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bilqr::{IocOptions, DIAG_REL_TOL, UNACTUATED_TOL};
use crate::edmdc::FitOptions;
use crate::error::{Error, Result};
use crate::io::matrix_from_rows;
use crate::lifting::{Dictionary, Term};
use crate::linalg::PINV_REL_TOL;
use crate::optctrl::SolveOptions;
use crate::systems::make_system;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DictionarySpec {
    /// Analytic lifting of a registered system.
    System { name: String },
    Identity { n: usize },
    Monomials {
        n: usize,
        degree: u32,
        #[serde(default = "yes")]
        constant: bool,
    },
    Terms { n: usize, terms: Vec<Term> },
}

fn yes() -> bool {
    true
}

impl DictionarySpec {
    pub fn build(&self) -> Result<Dictionary> {
        match self {
            DictionarySpec::System { name } => {
                Ok(make_system(name, &Default::default(), 0.01)?.lifting().clone())
            }
            DictionarySpec::Identity { n } => {
                if *n == 0 {
                    return Err(Error::InvalidInput("dictionary dimension must be positive".into()));
                }
                Ok(Dictionary::identity(*n))
            }
            DictionarySpec::Monomials { n, degree, constant } => Dictionary::monomials(*n, *degree, *constant),
            DictionarySpec::Terms { n, terms } => Dictionary::new(*n, terms.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    /// Pseudo-inverse cutoff of the regression.
    pub rel_tol: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection { rel_tol: PINV_REL_TOL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IocSection {
    pub rel_tol: f64,
    pub solve_rel_tol: f64,
    pub tol_unact: f64,
    pub psd_project: bool,
    pub r: Option<Vec<Vec<f64>>>,
}

impl Default for IocSection {
    fn default() -> Self {
        IocSection {
            rel_tol: DIAG_REL_TOL,
            solve_rel_tol: DIAG_REL_TOL,
            tol_unact: UNACTUATED_TOL,
            psd_project: false,
            r: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dictionary: Option<DictionarySpec>,
    pub fit: FitSection,
    pub solver: SolveOptions,
    pub ioc: IocSection,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidParams(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        positive("fit.rel_tol", self.fit.rel_tol)?;
        positive("solver.grad_tol", self.solver.grad_tol)?;
        positive("ioc.rel_tol", self.ioc.rel_tol)?;
        positive("ioc.solve_rel_tol", self.ioc.solve_rel_tol)?;
        positive("ioc.tol_unact", self.ioc.tol_unact)?;
        if self.solver.max_iter == 0 || self.solver.max_backtracks == 0 {
            return Err(Error::InvalidParams("solver iteration limits must be positive".into()));
        }
        self.r_matrix()?;
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions { rel_tol: self.fit.rel_tol }
    }

    pub fn r_matrix(&self) -> Result<Option<DMatrix<f64>>> {
        self.ioc
            .r
            .as_ref()
            .map(|rows| matrix_from_rows(rows, "ioc.r"))
            .transpose()
    }

    pub fn ioc_options(&self) -> Result<IocOptions> {
        Ok(IocOptions {
            rel_tol: self.ioc.rel_tol,
            solve_rel_tol: self.ioc.solve_rel_tol,
            tol_unact: self.ioc.tol_unact,
            psd_project: self.ioc.psd_project,
            r: self.r_matrix()?,
        })
    }
}
