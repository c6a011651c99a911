//! Command-line front end.
//!
//! Subcommands: `fit`, `reduce`, `select-d`, `test-predictors`,
//! `test-structure`, and `simulate`. Results go to stdout (or `--out`) as
//! JSON or CSV; diagnostics and warnings go to stderr. Exit codes: 0 on
//! success, 2 for input problems (missing files, bad flags, unparseable
//! data), 3 for numerical failures (singular covariances, diverging
//! iterations). The environment variable `PFCRED_THREADS` caps the worker
//! threads used by `simulate`.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::design::{build_design, load_csv, BasisSpec, Dataset, DesignMatrices, Response};
use crate::error::PfcError;
use crate::inference::{
    backward_elimination, select_d_ic, select_d_lrt, test_predictors, test_predictors_maxw,
    Criterion, DimSelection, PredictorTest,
};
use crate::pfc::{fit_isotonic_pfc, fit_pc, fit_pfc, ModelKind, PfcFit};
use crate::simlab::{
    run_angle_study, run_dim_study, run_level_study, AngleArm, DimMethod, ExperimentResult,
    FitBasis, Generator, GeneratorKind, GridAxis, LevelKind,
};
use crate::structured::{fit_structured, test_structure, DeltaStructure, FixedPointOpts};
use crate::Result;

/// Signal-strength default for the ten-predictor null design; see the
/// `simulate` docs.
const SEC6_DEFAULT_SIGMA_Y: f64 = 1.0;

#[derive(Parser)]
#[command(
    name = "pfcred",
    version,
    about = "Model-based sufficient dimension reduction via principal fitted components"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model and write the full fit report as JSON.
    Fit(FitArgs),
    /// Fit, then write the reduced coordinates of each row as CSV.
    Reduce(ReduceArgs),
    /// Choose the reduction dimension by likelihood ratio or information
    /// criteria.
    SelectD(SelectArgs),
    /// Test whether the predictors outside a kept set can be dropped.
    TestPredictors(TestPredictorsArgs),
    /// Test a linear structure on the error covariance.
    TestStructure(TestStructureArgs),
    /// Run a replicated simulation study and write its result files.
    Simulate(SimulateArgs),
}

/// Flags shared by every command that reads a dataset.
#[derive(Args)]
struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Response column name.
    #[arg(long)]
    response: String,
    /// Comma-separated predictor columns; default: every other column in
    /// file order.
    #[arg(long, value_delimiter = ',')]
    predictors: Vec<String>,
    /// Treat the response as categorical even when numeric.
    #[arg(long)]
    categorical: bool,
    /// Response basis: poly:K, slices:H, piecewise:H:K, or categorical.
    #[arg(long, default_value = "poly:3")]
    basis: String,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, DesignMatrices)> {
        let predictors = if self.predictors.is_empty() {
            None
        } else {
            Some(self.predictors.as_slice())
        };
        let data = load_csv(&self.input, &self.response, predictors, self.categorical)?;
        let spec = BasisSpec::parse(&self.basis)?;
        let des = build_design(&data, &spec)?;
        Ok((data, des))
    }
}

#[derive(Args)]
struct OutArgs {
    /// Write results here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArgs {
    fn write(&self, content: &str) -> Result<()> {
        match &self.out {
            Some(path) => std::fs::write(path, content)?,
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout.write_all(content.as_bytes())?;
            }
        }
        Ok(())
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Reduction dimension.
    #[arg(long)]
    d: usize,
    /// Model variant: pfc_full (free covariance), isotonic_pfc
    /// (isotropic covariance), or pc (no response information).
    #[arg(long, default_value = "pfc_full")]
    model: String,
    /// Constrain the error covariance: diag, equicorr,
    /// groups=<label,label,...>, or custom=<path>.
    #[arg(long)]
    delta: Option<String>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ReduceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value = "pfc_full")]
    model: String,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    /// lrt, aic, bic, or all.
    #[arg(long, default_value = "all")]
    method: String,
    /// Test level for the sequential likelihood-ratio method.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct TestPredictorsArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated names of the predictors to keep; the test asks
    /// whether the rest can be dropped.
    #[arg(long, value_delimiter = ',')]
    keep: Vec<String>,
    /// Working dimension; default: the largest usable one, min(r, kept).
    #[arg(long)]
    d: Option<usize>,
    /// Run backward elimination over all predictors instead of a single
    /// test (requires --d).
    #[arg(long)]
    eliminate: bool,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct TestStructureArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Covariance structure: diag, equicorr, groups=<labels>, or
    /// custom=<path>.
    #[arg(long)]
    delta: String,
    /// Working dimension; default min(r, p).
    #[arg(long)]
    w: Option<usize>,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// fig1, dim-study, predictor-levels, or structure-levels.
    #[arg(long)]
    experiment: String,
    /// Replications; default depends on the experiment.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Directory for the result files `<experiment>_<seed>.{csv,json}`.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Sample size override (fixed-n experiments).
    #[arg(long)]
    n: Option<usize>,
    /// Ambient dimension override.
    #[arg(long)]
    p: Option<usize>,
    /// Basis rank of the diagonal-covariance design.
    #[arg(long)]
    r: Option<usize>,
    /// Response scale of the two-direction and null designs.
    #[arg(long)]
    sigma_y: Option<f64>,
    /// Sample-size grid for level studies and the dimension study.
    #[arg(long, value_delimiter = ',')]
    ns: Vec<usize>,
    /// Predictor-count grid for the dimension study (uses --n as the
    /// fixed sample size).
    #[arg(long, value_delimiter = ',')]
    ps: Vec<usize>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Basis used when fitting in the dimension study: abs:K or poly:K.
    #[arg(long, default_value = "abs:3")]
    fit_basis: String,
}

/// Entry point for the binary: returns the process exit code.
pub fn run() -> i32 {
    init_threads();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_threads() {
    if let Ok(v) = std::env::var("PFCRED_THREADS") {
        if let Ok(k) = v.parse::<usize>() {
            if k >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(k)
                    .build_global();
            }
        }
    }
}

fn exit_code(e: &PfcError) -> i32 {
    match e {
        PfcError::SchemaError(_)
        | PfcError::ParseError { .. }
        | PfcError::InvalidInput(_)
        | PfcError::DegenerateResponse(_)
        | PfcError::RankDeficientBasis(_)
        | PfcError::Io(_) => 2,
        PfcError::ResidualCovSingular(_)
        | PfcError::NotPSD(_)
        | PfcError::SingularMatrix(_)
        | PfcError::NumericalDegeneracy(_)
        | PfcError::IterationDiverged { .. }
        | PfcError::InternalInconsistency(_) => 3,
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Fit(args) => cmd_fit(args),
        Command::Reduce(args) => cmd_reduce(args),
        Command::SelectD(args) => cmd_select_d(args),
        Command::TestPredictors(args) => cmd_test_predictors(args),
        Command::TestStructure(args) => cmd_test_structure(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

fn require_positive_d(d: usize) -> Result<()> {
    if d == 0 {
        return Err(PfcError::InvalidInput(
            "d must be at least 1; run `pfcred select-d` to choose a dimension".into(),
        ));
    }
    Ok(())
}

fn parse_model(s: &str) -> Result<ModelKind> {
    match s {
        "pfc_full" => Ok(ModelKind::PfcFull),
        "isotonic_pfc" => Ok(ModelKind::IsotonicPfc),
        "pc" => Ok(ModelKind::Pc),
        other => Err(PfcError::InvalidInput(format!(
            "unknown model '{other}' (expected pfc_full, isotonic_pfc, or pc)"
        ))),
    }
}

/// Parses `diag`, `equicorr`, `groups=a,b,a,...`, or `custom=<path>`. The
/// custom file holds the structure matrices as whitespace-separated
/// numbers, `m` blocks of `p` rows of `p` values.
fn parse_structure(s: &str, p: usize) -> Result<DeltaStructure> {
    if s == "diag" {
        return Ok(DeltaStructure::Diagonal);
    }
    if s == "equicorr" {
        return Ok(DeltaStructure::Equicorrelated);
    }
    if let Some(labels) = s.strip_prefix("groups=") {
        let names: Vec<&str> = labels.split(',').collect();
        let mut seen: Vec<&str> = Vec::new();
        let mut groups = Vec::with_capacity(names.len());
        for name in names {
            let id = match seen.iter().position(|s| *s == name) {
                Some(i) => i,
                None => {
                    seen.push(name);
                    seen.len() - 1
                }
            };
            groups.push(id);
        }
        return Ok(DeltaStructure::GroupedDiagonal { groups });
    }
    if let Some(path) = s.strip_prefix("custom=") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PfcError::SchemaError(format!("cannot read {path}: {e}")))?;
        let mut values = Vec::new();
        for tok in text.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| {
                PfcError::InvalidInput(format!("non-numeric entry '{tok}' in {path}"))
            })?;
            values.push(v);
        }
        let block = p * p;
        if values.is_empty() || values.len() % block != 0 {
            return Err(PfcError::InvalidInput(format!(
                "{path} holds {} numbers, not a multiple of p*p = {block}",
                values.len()
            )));
        }
        let matrices = values
            .chunks(block)
            .map(|chunk| DMatrix::from_row_slice(p, p, chunk))
            .collect();
        return Ok(DeltaStructure::Custom { matrices });
    }
    Err(PfcError::InvalidInput(format!(
        "unknown structure '{s}' (expected diag, equicorr, groups=..., or custom=<path>)"
    )))
}

fn mat_json(m: &DMatrix<f64>) -> Value {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect();
    json!(rows)
}

fn report_warnings(warnings: &[crate::FitWarning]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn fit_report(fit: &PfcFit, des: &DesignMatrices, names: &[String]) -> Value {
    json!({
        "schema": "pfcred/1",
        "kind": "fit",
        "model": fit.model_kind.to_string(),
        "n": des.n(),
        "p": des.p(),
        "r": des.r(),
        "d": fit.d,
        "predictors": names,
        "mu_hat": fit.mu_hat.iter().copied().collect::<Vec<f64>>(),
        "delta_hat": mat_json(&fit.delta_hat),
        "gamma_span": mat_json(fit.gamma_span.basis()),
        "beta_hat": mat_json(&fit.beta_hat),
        "lambda_hat": fit.lambda_hat,
        "loglik": fit.loglik,
        "reduction": mat_json(&fit.reduction),
        "warnings": fit.warnings,
    })
}

fn fit_model(des: &DesignMatrices, model: ModelKind, d: usize) -> Result<PfcFit> {
    match model {
        ModelKind::PfcFull => fit_pfc(des, d),
        ModelKind::IsotonicPfc => fit_isotonic_pfc(des, d),
        ModelKind::Pc => fit_pc(des, d),
    }
}

fn cmd_fit(args: FitArgs) -> Result<i32> {
    require_positive_d(args.d)?;
    let (data, des) = args.data.load()?;
    let report = match &args.delta {
        None => {
            let fit = fit_model(&des, parse_model(&args.model)?, args.d)?;
            report_warnings(&fit.warnings);
            fit_report(&fit, &des, data.predictor_names())
        }
        Some(spec) => {
            if args.model != "pfc_full" {
                return Err(PfcError::InvalidInput(
                    "--delta constrains the full model; drop --model".into(),
                ));
            }
            let structure = parse_structure(spec, des.p())?;
            let fit = fit_structured(&des, args.d, &structure, FixedPointOpts::default())?;
            report_warnings(&fit.warnings);
            json!({
                "schema": "pfcred/1",
                "kind": "fit",
                "model": "structured",
                "structure": spec,
                "n": des.n(),
                "p": des.p(),
                "r": des.r(),
                "d": args.d,
                "predictors": data.predictor_names(),
                "delta_coeffs": fit.delta_coeffs,
                "delta_tilde": mat_json(&fit.delta_tilde),
                "subspace": mat_json(fit.subspace.basis()),
                "loglik": fit.loglik,
                "iterations": fit.iterations,
                "converged": fit.converged,
                "gradient_norm": fit.gradient_norm,
                "warnings": fit.warnings,
            })
        }
    };
    args.out.write(&pretty(&report))?;
    Ok(0)
}

fn cmd_reduce(args: ReduceArgs) -> Result<i32> {
    require_positive_d(args.d)?;
    let (data, des) = args.data.load()?;
    let fit = fit_model(&des, parse_model(&args.model)?, args.d)?;
    report_warnings(&fit.warnings);
    let coords = fit.reduce(data.x())?;
    let mut out = String::new();
    out.push_str(&args.data.response);
    for j in 0..coords.ncols() {
        out.push_str(&format!(",r{}", j + 1));
    }
    out.push('\n');
    for i in 0..coords.nrows() {
        match data.y() {
            Response::Continuous(v) => out.push_str(&format!("{}", v[i])),
            Response::Categorical(v) => out.push_str(&v[i]),
        }
        for j in 0..coords.ncols() {
            out.push_str(&format!(",{}", coords[(i, j)]));
        }
        out.push('\n');
    }
    args.out.write(&out)?;
    Ok(0)
}

fn cmd_select_d(args: SelectArgs) -> Result<i32> {
    let (_, des) = args.data.load()?;
    // One design serves every requested method.
    let selections: Vec<DimSelection> = match args.method.as_str() {
        "lrt" => vec![select_d_lrt(&des, args.alpha)?],
        "aic" => vec![select_d_ic(&des, Criterion::Aic)?],
        "bic" => vec![select_d_ic(&des, Criterion::Bic)?],
        "all" => vec![
            select_d_lrt(&des, args.alpha)?,
            select_d_ic(&des, Criterion::Aic)?,
            select_d_ic(&des, Criterion::Bic)?,
        ],
        other => {
            return Err(PfcError::InvalidInput(format!(
                "unknown method '{other}' (expected lrt, aic, bic, or all)"
            )))
        }
    };
    let report = json!({
        "schema": "pfcred/1",
        "kind": "select_d",
        "n": des.n(),
        "p": des.p(),
        "r": des.r(),
        "selections": selections,
    });
    args.out.write(&pretty(&report))?;
    Ok(0)
}

fn predictor_report(test: &PredictorTest, names: &[String]) -> Value {
    let kept: Vec<&String> = test.active.iter().map(|&i| &names[i]).collect();
    json!({
        "schema": "pfcred/1",
        "kind": "test_predictors",
        "report": test.report,
        "statistic_corr_form": test.statistic_corr_form,
        "loglik_full": test.loglik_full,
        "loglik_restricted": test.loglik_restricted,
        "restricted_subspace": mat_json(test.restricted_subspace.basis()),
        "kept": kept,
        "working_d": test.working_d,
    })
}

fn cmd_test_predictors(args: TestPredictorsArgs) -> Result<i32> {
    let (data, des) = args.data.load()?;
    let names = data.predictor_names().to_vec();
    if args.eliminate {
        let d = args.d.ok_or_else(|| {
            PfcError::InvalidInput("backward elimination needs an explicit --d".into())
        })?;
        require_positive_d(d)?;
        let trace = backward_elimination(&des, d, args.alpha)?;
        let retained: Vec<&String> = trace.retained.iter().map(|&i| &names[i]).collect();
        let report = json!({
            "schema": "pfcred/1",
            "kind": "backward_elimination",
            "alpha": args.alpha,
            "d": d,
            "retained": retained,
            "rounds": trace.rounds,
        });
        args.out.write(&pretty(&report))?;
        return Ok(0);
    }
    if args.keep.is_empty() {
        return Err(PfcError::InvalidInput(
            "--keep must list the predictors to retain".into(),
        ));
    }
    let mut active = Vec::with_capacity(args.keep.len());
    for name in &args.keep {
        let idx = data.predictor_index(name).ok_or_else(|| {
            PfcError::InvalidInput(format!("'{name}' is not a predictor column"))
        })?;
        active.push(idx);
    }
    let test = match args.d {
        Some(d) => {
            require_positive_d(d)?;
            test_predictors(&des, d, &active)?
        }
        None => test_predictors_maxw(&des, &active)?,
    };
    report_warnings(&test.report.warnings);
    args.out.write(&pretty(&predictor_report(&test, &names)))?;
    Ok(0)
}

fn cmd_test_structure(args: TestStructureArgs) -> Result<i32> {
    let (_, des) = args.data.load()?;
    let structure = parse_structure(&args.delta, des.p())?;
    let w = args.w.unwrap_or_else(|| des.tau());
    let opts = FixedPointOpts {
        tol: args.tol,
        max_iter: args.max_iter,
    };
    let report = test_structure(&des, &structure, w, opts)?;
    report_warnings(&report.warnings);
    let doc = json!({
        "schema": "pfcred/1",
        "kind": "test_structure",
        "structure": args.delta,
        "w": w,
        "report": report,
    });
    args.out.write(&pretty(&doc))?;
    Ok(0)
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32> {
    let seed = args.seed;
    let alpha = args.alpha;
    let result: ExperimentResult = match args.experiment.as_str() {
        "fig1" => {
            let gen = Generator {
                kind: GeneratorKind::Fig1ExpNu {
                    p: args.p.unwrap_or(20),
                },
                n: args.n.unwrap_or(200),
                seed,
            };
            let arms: Vec<AngleArm> = (1..=6)
                .map(AngleArm::Poly)
                .chain([AngleArm::ExpResponse])
                .collect();
            run_angle_study(&gen, &arms, args.reps.unwrap_or(100))?
        }
        "dim-study" => {
            let gen = Generator {
                kind: GeneratorKind::Sec5TwoDim {
                    p: args.p.unwrap_or(5),
                    sigma_y: args.sigma_y.unwrap_or(2.0),
                },
                n: args.n.unwrap_or(200),
                seed,
            };
            let methods = [DimMethod::Lrt { alpha }, DimMethod::Aic, DimMethod::Bic];
            let (axis, grid) = if !args.ps.is_empty() {
                (GridAxis::Predictors, args.ps.clone())
            } else if !args.ns.is_empty() {
                (GridAxis::SampleSize, args.ns.clone())
            } else {
                (GridAxis::SampleSize, vec![gen.n])
            };
            run_dim_study(
                &gen,
                &methods,
                axis,
                &grid,
                parse_fit_basis(&args.fit_basis)?,
                args.reps.unwrap_or(500),
            )?
        }
        "predictor-levels" => {
            let gen = Generator {
                kind: GeneratorKind::Sec6NullTest {
                    sigma_y: args.sigma_y.unwrap_or(SEC6_DEFAULT_SIGMA_Y),
                },
                n: 0,
                seed,
            };
            let ns = if args.ns.is_empty() {
                vec![20, 40, 100, 120]
            } else {
                args.ns.clone()
            };
            run_level_study(
                LevelKind::Predictor,
                &gen,
                &ns,
                args.reps.unwrap_or(500),
                alpha,
            )?
        }
        "structure-levels" => {
            let gen = Generator {
                kind: GeneratorKind::Sec8DiagDelta {
                    p: args.p.unwrap_or(6),
                    r: args.r.unwrap_or(1),
                },
                n: 0,
                seed,
            };
            let ns = if args.ns.is_empty() {
                vec![100, 200, 400, 800]
            } else {
                args.ns.clone()
            };
            run_level_study(
                LevelKind::Structure,
                &gen,
                &ns,
                args.reps.unwrap_or(500),
                alpha,
            )?
        }
        other => {
            return Err(PfcError::InvalidInput(format!(
                "unknown experiment '{other}' (expected fig1, dim-study, predictor-levels, \
                 or structure-levels)"
            )))
        }
    };

    let mut result = result;
    result.experiment = args.experiment.replace('-', "_");
    let (csv_path, json_path) = result.save(&args.out_dir)?;

    let total = result.records.len() + result.excluded.len();
    let failed = result.excluded.len();
    let doc = json!({
        "schema": "pfcred/1",
        "kind": "simulate",
        "experiment": result.experiment,
        "seed": seed,
        "reps": result.reps,
        "cells_scored": result.records.len(),
        "cells_failed": failed,
        "csv": csv_path,
        "json": json_path,
    });
    println!("{}", pretty(&doc));
    if total > 0 && failed * 20 > total {
        eprintln!(
            "error: {failed} of {total} replication cells failed; results are incomplete"
        );
        return Ok(3);
    }
    Ok(0)
}

fn parse_fit_basis(s: &str) -> Result<FitBasis> {
    let bad = || {
        PfcError::InvalidInput(format!(
            "unknown fit basis '{s}' (expected abs:K with K >= 3, or poly:K)"
        ))
    };
    match s.split_once(':') {
        Some(("abs", k)) => {
            let max_degree: usize = k.parse().map_err(|_| bad())?;
            Ok(FitBasis::AbsPoly { max_degree })
        }
        Some(("poly", k)) => {
            let degree: usize = k.parse().map_err(|_| bad())?;
            Ok(FitBasis::Poly { degree })
        }
        _ => Err(bad()),
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable report");
    s.push('\n');
    s
}
