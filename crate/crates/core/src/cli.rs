//! `kbilqr` command-line interface.
//!
//! Exit codes: 0 success, 1 repro thresholds not met, 2 usage, 3 data error,
//! 4 numerical failure (including a prediction that did not converge).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use crate::bilqr::{detect_unactuated, inverse_bilqr, inverse_lqr};
use crate::config::RunConfig;
use crate::edmdc::{fit_bilinear_with, fit_linear_with};
use crate::error::{Error, Result};
use crate::io::{self, BatchMeta, FittedModel};
use crate::lifting::{lift_batch, Dictionary};
use crate::optctrl::{generate_batch, predict, Dynamics, GenerateSpec, X0Box};
use crate::repro::{evaluate, run_study, state_plot, Study};
use crate::systems::{make_system, parse_params};

#[derive(Debug, Parser)]
#[command(name = "kbilqr", version, about = "Bilinear Koopman identification and inverse Bi-LQR cost recovery")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate optimal trajectories of a registered system.
    Generate(GenerateArgs),
    /// Fit a lifted bilinear (or linear) model to a trajectory directory.
    Fit(FitArgs),
    /// Recover the lifted state cost Q from optimal trajectories.
    Ioc(IocArgs),
    /// Predict an optimal trajectory from a model and a cost.
    Predict(PredictArgs),
    /// Compare predictions against held-out trajectories.
    Eval(EvalArgs),
    /// Run a complete study: example2 or unicycle.
    Repro(ReproArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub system: String,
    /// `key=value,...`
    #[arg(long, default_value = "")]
    pub params: String,
    /// Comma-separated cost weights (state basis weights, then control weights).
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long, default_value_t = 40)]
    pub n_traj: usize,
    #[arg(long, default_value_t = 100)]
    pub horizon: usize,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    /// Half-width `h` for `[-h, h]^n`, or per-coordinate `lo:hi` ranges separated by commas.
    #[arg(long, default_value = "1", allow_hyphen_values = true)]
    pub x0_box: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config (only `[solver]` is used).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// TOML config with a `[dictionary]` section; defaults to the lifting of
    /// the system named in the data's meta.json.
    #[arg(long)]
    pub dict: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Fit the linear EDMDc model instead of the bilinear one.
    #[arg(long)]
    pub linear: bool,
    /// Truncate trajectories to the shortest horizon instead of rejecting ragged data.
    #[arg(long)]
    pub truncate: bool,
}

#[derive(Debug, Args)]
pub struct IocArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON nested array holding the known control weight R.
    #[arg(long)]
    pub r_matrix: Option<PathBuf>,
    #[arg(long)]
    pub psd_project: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub truncate: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cost: PathBuf,
    /// Inline `x1,x2,...` or a CSV file (a trajectory file or a single numeric row).
    #[arg(long, allow_hyphen_values = true)]
    pub x0: String,
    #[arg(long)]
    pub horizon: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cost: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Also write predicted trajectories and SVG state plots here.
    #[arg(long)]
    pub plot_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    pub target: String,
    /// Artifact directory (default `repro_<target>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Parses `--x0-box`: `h`, `lo:hi`, or one `lo:hi` per coordinate.
pub fn parse_x0_box(spec: &str, n: usize) -> Result<X0Box> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Usage(format!("--x0-box: `{s}` is not a number")))
    };
    let range = |s: &str| -> Result<(f64, f64)> {
        match s.split_once(':') {
            Some((lo, hi)) => Ok((num(lo)?, num(hi)?)),
            None => {
                let h = num(s)?;
                if h < 0.0 {
                    return Err(Error::Usage("--x0-box half-width must be non-negative".into()));
                }
                Ok((-h, h))
            }
        }
    };
    let ranges: Vec<(f64, f64)> = match parts.len() {
        1 => vec![range(parts[0])?; n],
        k if k == n => parts.iter().map(|p| range(p)).collect::<Result<_>>()?,
        k => {
            return Err(Error::Usage(format!("--x0-box has {k} ranges, system has {n} states")));
        }
    };
    X0Box::new(
        DVector::from_iterator(n, ranges.iter().map(|r| r.0)),
        DVector::from_iterator(n, ranges.iter().map(|r| r.1)),
    )
    .map_err(|e| Error::Usage(e.to_string()))
}

fn parse_weights(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Usage(format!("--weights: `{s}` is not a number")))
        })
        .collect()
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    if args.n_traj == 0 {
        return Err(Error::Usage("--n-traj must be positive".into()));
    }
    let cfg = load_config(args.config.as_deref())?;
    let params = parse_params(&args.params)?;
    let sys = make_system(&args.system, &params, args.dt)?;
    let cost = match &args.weights {
        Some(w) => sys.cost(&parse_weights(w)?)?,
        None => sys.default_cost(),
    };
    let spec = GenerateSpec {
        n_traj: args.n_traj,
        horizon: args.horizon,
        dt: args.dt,
        x0: parse_x0_box(&args.x0_box, sys.n())?,
        seed: args.seed,
    };
    let batch = generate_batch(&sys, &cost, &spec, &cfg.solver)?;
    let mut meta = BatchMeta::for_batch(&batch);
    meta.system = Some(sys.name.clone());
    meta.params = Some(sys.params.clone());
    meta.seed = Some(args.seed);
    io::write_batch(&args.out, &batch, &meta)?;
    println!(
        "wrote {} trajectories (T = {}) to {}",
        batch.len(),
        batch.horizon(),
        args.out.display()
    );
    Ok(())
}

fn resolve_dictionary(cfg: &RunConfig, meta: &BatchMeta) -> Result<Dictionary> {
    if let Some(spec) = &cfg.dictionary {
        return spec.build();
    }
    match &meta.system {
        Some(name) => Ok(make_system(name, &Default::default(), 0.01)?.lifting().clone()),
        None => Err(Error::Usage(
            "no dictionary: pass --dict CONFIG or use data whose meta.json names a system".into(),
        )),
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let cfg = load_config(args.dict.as_deref())?;
    let (batch, meta) = io::read_batch(&args.data, args.truncate)?;
    let dict = resolve_dictionary(&cfg, &meta)?;
    let opts = cfg.fit_options();
    let bilinear = fit_bilinear_with(&batch, &dict, &opts)?;
    let model = if args.linear {
        let linear = fit_linear_with(&batch, &dict, &opts)?;
        println!("linear residual: {:.6e}", linear.residual);
        println!("bilinear residual (same data): {:.6e}", bilinear.residual);
        FittedModel::Linear(linear)
    } else {
        println!("bilinear residual: {:.6e}", bilinear.residual);
        let unact = detect_unactuated(&bilinear, cfg.ioc.tol_unact);
        if !unact.is_empty() {
            println!("warning: unactuated lifted coordinates {unact:?}");
        }
        FittedModel::Bilinear(bilinear)
    };
    for w in model.warnings() {
        println!("warning: {w}");
    }
    io::save_model(&args.out, &model)
}

pub fn cmd_ioc(args: &IocArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let mut opts = cfg.ioc_options()?;
    if let Some(p) = &args.r_matrix {
        opts.r = Some(io::load_matrix(p)?);
    }
    opts.psd_project |= args.psd_project;
    let model = io::load_model(&args.model)?;
    let (batch, _) = io::read_batch(&args.data, args.truncate)?;
    let lifted = lift_batch(model.dict(), &batch)?;
    let est = match &model {
        FittedModel::Bilinear(m) => inverse_bilqr(m, &lifted, &opts)?,
        FittedModel::Linear(m) => inverse_lqr(&m.a, &m.b, &lifted, &opts)?,
    };
    let d = &est.diagnostics;
    println!(
        "rank {}/{} (solve rank {}), condition {:.3e}, nullspace dim {}, lemma5 {}, lemma6 {}",
        d.numerical_rank,
        d.cols,
        d.solve_rank,
        d.condition_number,
        d.nullspace_dim(),
        d.lemma5_satisfied,
        d.lemma6_satisfied
    );
    println!("ls residual: {:.6e}", est.ls_residual);
    io::save_cost(&args.out, &est)
}

fn bilinear_only(model: FittedModel) -> Result<crate::edmdc::BilinearModel> {
    match model {
        FittedModel::Bilinear(m) => Ok(m),
        FittedModel::Linear(_) => Err(Error::Usage(
            "prediction needs a bilinear model (refit without --linear)".into(),
        )),
    }
}

#[derive(Serialize)]
struct PredictMeta {
    converged: bool,
    objective: f64,
    grad_norm: f64,
    iterations: usize,
    horizon: usize,
}

/// Writes the prediction and `<out>.meta.json`. Returns whether the solve converged.
pub fn cmd_predict(args: &PredictArgs) -> Result<bool> {
    let cfg = load_config(args.config.as_deref())?;
    let model = bilinear_only(io::load_model(&args.model)?)?;
    let cost = io::load_cost(&args.cost)?;
    let x0 = io::parse_x0(&args.x0)?;
    let sol = predict(&model, &cost, &x0, args.horizon, &cfg.solver)?;
    io::write_trajectory_csv(&args.out, &sol.to_trajectory()?)?;
    let mut meta_path = args.out.clone().into_os_string();
    meta_path.push(".meta.json");
    io::write_json(
        Path::new(&meta_path),
        &PredictMeta {
            converged: sol.converged,
            objective: sol.objective,
            grad_norm: sol.grad_norm,
            iterations: sol.iterations,
            horizon: args.horizon,
        },
    )?;
    println!(
        "objective {:.6e}, |grad| {:.3e}, {} iterations, converged {}",
        sol.objective, sol.grad_norm, sol.iterations, sol.converged
    );
    Ok(sol.converged)
}

fn has_trajectories(dir: &Path) -> bool {
    std::fs::read_dir(dir).is_ok_and(|entries| {
        entries.filter_map(|e| e.ok()).any(|e| {
            e.file_name()
                .to_str()
                .is_some_and(|s| s.starts_with("traj_") && s.ends_with(".csv"))
        })
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<bool> {
    if !has_trajectories(&args.data) {
        return Err(Error::Usage(format!("{}: no test trajectories", args.data.display())));
    }
    let cfg = load_config(args.config.as_deref())?;
    let model = bilinear_only(io::load_model(&args.model)?)?;
    let cost = io::load_cost(&args.cost)?;
    let (test, _) = io::read_batch(&args.data, false)?;
    let (report, predictions) = evaluate(&model, &cost, &test, &cfg.solver)?;
    io::write_json(&args.report, &report)?;
    if let Some(dir) = &args.plot_dir {
        for (i, (sol, tr)) in predictions.iter().zip(&test.trajectories).enumerate() {
            io::write_trajectory_csv(&dir.join(io::trajectory_file_name(i)), &sol.to_trajectory()?)?;
            io::write_atomic(
                &dir.join(format!("states_{i:04}.svg")),
                state_plot(&format!("test trajectory {i}"), tr, sol).as_bytes(),
            )?;
        }
    }
    println!("traj  state_rmse  pos_rmse  path_len  ctrl_rmse");
    for t in &report.trajectories {
        println!(
            "{:>4} {:>11.3e} {:>9.3e} {:>9.4} {:>10.3e}",
            t.index, t.state_rmse, t.position_rmse, t.path_length, t.control_rmse
        );
    }
    Ok(report.aggregate.all_converged)
}

pub fn cmd_repro(args: &ReproArgs) -> Result<bool> {
    let mut study = Study::by_name(&args.target)?;
    if let Some(seed) = args.seed {
        study.seed = seed;
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("repro_{}", args.target)));
    let result = run_study(&study, Some(&out))?;
    print!("{}", result.report.summary());
    println!("artifacts written to {}", out.display());
    Ok(result.report.passed())
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let ok_code = |ok: bool, fail: i32| if ok { 0 } else { fail };
    match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(|_| 0),
        Command::Fit(a) => cmd_fit(a).map(|_| 0),
        Command::Ioc(a) => cmd_ioc(a).map(|_| 0),
        Command::Predict(a) => cmd_predict(a).map(|ok| ok_code(ok, 4)),
        Command::Eval(a) => cmd_eval(a).map(|ok| ok_code(ok, 4)),
        Command::Repro(a) => cmd_repro(a).map(|ok| ok_code(ok, 1)),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
