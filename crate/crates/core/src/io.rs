//! File formats: trajectory CSV directories, model JSON and cost JSON.
//! Every write goes through a temporary file in the target directory followed
//! by a rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bilqr::{CostEstimate, IocDiagnostics};
use crate::data::{Trajectory, TrajectoryBatch};
use crate::edmdc::{BilinearModel, LinearModel};
use crate::error::{Error, Result};
use crate::lifting::{Dictionary, Term};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::InvalidInput(format!("{what}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

// ---------------------------------------------------------------------------
// trajectories

/// Sidecar describing a trajectory directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub n_traj: usize,
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl BatchMeta {
    pub fn for_batch(batch: &TrajectoryBatch) -> Self {
        BatchMeta {
            n: batch.n(),
            m: batch.m(),
            dt: batch.dt,
            n_traj: batch.len(),
            horizon: batch.horizon(),
            system: None,
            params: None,
            seed: None,
        }
    }
}

fn fmt_f64(v: f64) -> String {
    // shortest representation that parses back to the same value
    let s = format!("{v:?}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

/// Header `k,x_1..x_n,u_1..u_m`; `T + 1` rows; empty controls on the last row.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let (n, m, t) = (traj.n(), traj.m(), traj.horizon());
    let mut out = String::from("k");
    for i in 1..=n {
        out.push_str(&format!(",x_{i}"));
    }
    for i in 1..=m {
        out.push_str(&format!(",u_{i}"));
    }
    out.push('\n');
    for k in 0..=t {
        out.push_str(&k.to_string());
        for i in 0..n {
            out.push(',');
            out.push_str(&fmt_f64(traj.states[(i, k)]));
        }
        for i in 0..m {
            out.push(',');
            if k < t {
                out.push_str(&fmt_f64(traj.controls[(i, k)]));
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    write_atomic(path, trajectory_csv(traj).as_bytes())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let header = rdr.headers().map_err(|e| Error::parse(path, e))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.first() != Some(&"k") {
        return Err(Error::parse(path, "first column must be `k`"));
    }
    let n = cols.iter().filter(|c| c.starts_with("x_")).count();
    let m = cols.iter().filter(|c| c.starts_with("u_")).count();
    let expected: Vec<String> = std::iter::once("k".to_string())
        .chain((1..=n).map(|i| format!("x_{i}")))
        .chain((1..=m).map(|i| format!("u_{i}")))
        .collect();
    if cols != expected.iter().map(String::as_str).collect::<Vec<_>>() || n == 0 || m == 0 {
        return Err(Error::parse(path, format!("unexpected header {cols:?}")));
    }
    let mut states: Vec<f64> = Vec::new();
    let mut controls: Vec<Option<Vec<f64>>> = Vec::new();
    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        let k: usize = rec[0]
            .parse()
            .map_err(|_| Error::parse(path, format!("row {row_idx}: bad step index")))?;
        if k != row_idx {
            return Err(Error::parse(path, format!("row {row_idx}: step index {k} out of order")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::parse(path, format!("row {row_idx}: `{s}` is not a number")))
        };
        for i in 0..n {
            states.push(num(&rec[1 + i])?);
        }
        let cells: Vec<&str> = (0..m).map(|i| &rec[1 + n + i]).collect();
        if cells.iter().all(|c| c.is_empty()) {
            controls.push(None);
        } else {
            controls.push(Some(cells.iter().map(|c| num(c)).collect::<Result<_>>()?));
        }
    }
    let rows = controls.len();
    if rows < 2 {
        return Err(Error::parse(path, "a trajectory needs at least two rows"));
    }
    if controls[rows - 1].is_some() || controls[..rows - 1].iter().any(Option::is_none) {
        return Err(Error::parse(path, "only the final row may (and must) have empty controls"));
    }
    let states = DMatrix::from_column_slice(n, rows, &states);
    let flat: Vec<f64> = controls[..rows - 1].iter().flatten().flatten().copied().collect();
    let controls = DMatrix::from_column_slice(m, rows - 1, &flat);
    Trajectory::new(states, controls)
}

pub fn trajectory_file_name(index: usize) -> String {
    format!("traj_{index:04}.csv")
}

/// Writes `meta.json` and `traj_%04d.csv` files into `dir`.
pub fn write_batch(dir: &Path, batch: &TrajectoryBatch, meta: &BatchMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, tr) in batch.trajectories.iter().enumerate() {
        write_trajectory_csv(&dir.join(trajectory_file_name(i)), tr)?;
    }
    write_json(&dir.join("meta.json"), meta)
}

/// Reads a directory written by [`write_batch`]. Ragged horizons are an error
/// unless `truncate` is set.
pub fn read_batch(dir: &Path, truncate: bool) -> Result<(TrajectoryBatch, BatchMeta)> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::InvalidInput(format!("{}: missing meta.json", dir.display())));
    }
    let meta: BatchMeta = read_json(&meta_path)?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|s| s.to_str())
                .is_some_and(|s| s.starts_with("traj_") && s.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no trajectory files", dir.display())));
    }
    let trajectories = files
        .iter()
        .map(|p| read_trajectory_csv(p))
        .collect::<Result<Vec<_>>>()?;
    let batch = if truncate {
        TrajectoryBatch::truncate_to_shortest(meta.dt, trajectories)?
    } else {
        TrajectoryBatch::new(meta.dt, trajectories)?
    };
    if batch.n() != meta.n || batch.m() != meta.m {
        return Err(Error::DimensionMismatch(format!(
            "{}: files have (n, m) = ({}, {}), meta.json says ({}, {})",
            dir.display(),
            batch.n(),
            batch.m(),
            meta.n,
            meta.m
        )));
    }
    Ok((batch, meta))
}

// ---------------------------------------------------------------------------
// models

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Bilinear(BilinearModel),
    Linear(LinearModel),
}

impl FittedModel {
    pub fn dict(&self) -> &Dictionary {
        match self {
            FittedModel::Bilinear(m) => &m.dict,
            FittedModel::Linear(m) => &m.dict,
        }
    }

    pub fn residual(&self) -> f64 {
        match self {
            FittedModel::Bilinear(m) => m.residual,
            FittedModel::Linear(m) => m.residual,
        }
    }

    pub fn warnings(&self) -> &[String] {
        match self {
            FittedModel::Bilinear(m) => &m.warnings,
            FittedModel::Linear(m) => &m.warnings,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bilinear,
    Linear,
}

/// On-disk model. Matrices are nested row lists. For `linear` models `B`
/// holds a single `N x m` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub n: usize,
    pub m: usize,
    pub N: usize,
    pub dt: f64,
    pub dictionary: Vec<Term>,
    pub A: Vec<Vec<f64>>,
    pub B: Vec<Vec<Vec<f64>>>,
    pub C: Vec<Vec<f64>>,
    pub residual: f64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ModelFile {
    pub fn from_model(model: &FittedModel) -> Self {
        match model {
            FittedModel::Bilinear(b) => ModelFile {
                kind: ModelKind::Bilinear,
                n: b.n(),
                m: b.m(),
                N: b.lifted_dim(),
                dt: b.dt,
                dictionary: b.dict.terms().to_vec(),
                A: rows_of(&b.a),
                B: b.b.iter().map(rows_of).collect(),
                C: rows_of(&b.c),
                residual: b.residual,
                warnings: b.warnings.clone(),
            },
            FittedModel::Linear(l) => ModelFile {
                kind: ModelKind::Linear,
                n: l.dict.n(),
                m: l.m(),
                N: l.lifted_dim(),
                dt: l.dt,
                dictionary: l.dict.terms().to_vec(),
                A: rows_of(&l.a),
                B: vec![rows_of(&l.b)],
                C: rows_of(&l.c),
                residual: l.residual,
                warnings: l.warnings.clone(),
            },
        }
    }

    pub fn into_model(self) -> Result<FittedModel> {
        let dict = Dictionary::new(self.n, self.dictionary)?;
        if dict.len() != self.N {
            return Err(Error::DimensionMismatch(format!(
                "model declares N = {} but its dictionary has {} terms",
                self.N,
                dict.len()
            )));
        }
        let a = matrix_from_rows(&self.A, "A")?;
        let c = matrix_from_rows(&self.C, "C")?;
        let bs = self
            .B
            .iter()
            .map(|b| matrix_from_rows(b, "B"))
            .collect::<Result<Vec<_>>>()?;
        match self.kind {
            ModelKind::Bilinear => {
                if bs.len() != self.m {
                    return Err(Error::DimensionMismatch(format!(
                        "model declares m = {} but lists {} B matrices",
                        self.m,
                        bs.len()
                    )));
                }
                let mut model = BilinearModel::from_parts(a, bs, c, dict, self.dt)?;
                model.residual = self.residual;
                model.warnings = self.warnings;
                Ok(FittedModel::Bilinear(model))
            }
            ModelKind::Linear => {
                let [b]: [DMatrix<f64>; 1] = bs.try_into().map_err(|_| {
                    Error::InvalidInput("linear model must list exactly one B matrix".into())
                })?;
                if a.shape() != (self.N, self.N) || b.shape() != (self.N, self.m) || c.shape() != (self.n, self.N) {
                    return Err(Error::DimensionMismatch("linear model matrix shapes".into()));
                }
                Ok(FittedModel::Linear(LinearModel {
                    a,
                    b,
                    c,
                    dict,
                    dt: self.dt,
                    residual: self.residual,
                    warnings: self.warnings,
                }))
            }
        }
    }
}

pub fn save_model(path: &Path, model: &FittedModel) -> Result<()> {
    write_json(path, &ModelFile::from_model(model))
}

pub fn load_model(path: &Path) -> Result<FittedModel> {
    let file: ModelFile = read_json(path)?;
    file.into_model().map_err(|e| match e {
        Error::Io { .. } | Error::Parse { .. } => e,
        other => Error::parse(path, other),
    })
}

// ---------------------------------------------------------------------------
// costs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsFile {
    pub rows: usize,
    pub equations: usize,
    pub cols: usize,
    pub numerical_rank: usize,
    pub solve_rank: usize,
    /// `null` when the matrix is numerically zero.
    pub condition_number: Option<f64>,
    pub lemma5: bool,
    pub lemma6: bool,
    pub unactuated_modes: Vec<usize>,
    pub nullspace_dim: usize,
    /// Columns of the null-space basis of `vech(Q)`.
    pub nullspace_basis: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct CostFile {
    pub N: usize,
    pub m: usize,
    pub Q: Vec<Vec<f64>>,
    pub R: Vec<Vec<f64>>,
    pub ls_residual: f64,
    pub diagnostics: DiagnosticsFile,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl CostFile {
    pub fn from_estimate(est: &CostEstimate) -> Self {
        let d = &est.diagnostics;
        CostFile {
            N: est.q.nrows(),
            m: est.r.nrows(),
            Q: rows_of(&est.q),
            R: rows_of(&est.r),
            ls_residual: est.ls_residual,
            diagnostics: DiagnosticsFile {
                rows: d.rows,
                equations: d.equations,
                cols: d.cols,
                numerical_rank: d.numerical_rank,
                solve_rank: d.solve_rank,
                condition_number: d.condition_number.is_finite().then_some(d.condition_number),
                lemma5: d.lemma5_satisfied,
                lemma6: d.lemma6_satisfied,
                unactuated_modes: d.unactuated_modes.clone(),
                nullspace_dim: d.nullspace_dim(),
                nullspace_basis: d
                    .nullspace_basis
                    .column_iter()
                    .map(|c| c.iter().copied().collect())
                    .collect(),
            },
            warnings: est.warnings.clone(),
        }
    }

    pub fn into_estimate(self) -> Result<CostEstimate> {
        let q = matrix_from_rows(&self.Q, "Q")?;
        let r = matrix_from_rows(&self.R, "R")?;
        if q.shape() != (self.N, self.N) || r.shape() != (self.m, self.m) {
            return Err(Error::DimensionMismatch("cost matrix shapes disagree with N, m".into()));
        }
        let d = self.diagnostics;
        let cols = d.nullspace_basis.len();
        let len = crate::linalg::vech_len(self.N);
        if d.nullspace_basis.iter().any(|c| c.len() != len) {
            return Err(Error::DimensionMismatch("null-space basis vectors have the wrong length".into()));
        }
        let basis = DMatrix::from_fn(len, cols, |i, j| d.nullspace_basis[j][i]);
        Ok(CostEstimate {
            q,
            r,
            ls_residual: self.ls_residual,
            diagnostics: IocDiagnostics {
                rows: d.rows,
                equations: d.equations,
                cols: d.cols,
                numerical_rank: d.numerical_rank,
                solve_rank: d.solve_rank,
                condition_number: d.condition_number.unwrap_or(f64::INFINITY),
                lemma5_satisfied: d.lemma5,
                lemma6_satisfied: d.lemma6,
                unactuated_modes: d.unactuated_modes,
                nullspace_basis: basis,
            },
            warnings: self.warnings,
        })
    }
}

pub fn save_cost(path: &Path, est: &CostEstimate) -> Result<()> {
    write_json(path, &CostFile::from_estimate(est))
}

pub fn load_cost(path: &Path) -> Result<CostEstimate> {
    let file: CostFile = read_json(path)?;
    file.into_estimate().map_err(|e| Error::parse(path, e))
}

/// Reads a JSON nested array as a matrix (used for `--r-matrix`).
pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = read_json(path)?;
    matrix_from_rows(&rows, &path.display().to_string())
}

/// An initial state given either inline (`0.5,-0.2`) or as a CSV file whose
/// first data row (or a trajectory file's `x_i` columns) provides it.
pub fn parse_x0(spec: &str) -> Result<DVector<f64>> {
    let path = Path::new(spec);
    if path.is_file() {
        if let Ok(tr) = read_trajectory_csv(path) {
            return Ok(tr.state(0));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let line = text
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty() && l.split(',').all(|c| c.trim().parse::<f64>().is_ok()))
            .ok_or_else(|| Error::parse(path, "no numeric row found"))?;
        return parse_vector(line);
    }
    parse_vector(spec)
}

pub fn parse_vector(spec: &str) -> Result<DVector<f64>> {
    let vals = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Usage(format!("`{s}` is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.is_empty() {
        return Err(Error::Usage("empty vector".into()));
    }
    Ok(DVector::from_vec(vals))
}
