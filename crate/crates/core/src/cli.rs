//! Command-line front end.
//!
//! Every command writes its artifacts into `--out`. Each artifact carries a
//! `schema_version`, the fully resolved configuration and the modelling
//! decisions in force; nothing time-dependent is written, so reruns with the
//! same arguments produce identical bytes. Progress goes to stderr. Failures
//! exit with 2 (configuration), 3 (data) or 4 (numerics) and leave an
//! `error.json` behind.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};

use crate::basis::BasisSpec;
use crate::data::{load_csv, ColumnMap, Dataset, SeedSpec};
use crate::error::{Error, Result};
use crate::experiments::{
    run_illustration, run_rmse_study, write_file, IllustrationConfig, RmseStudyConfig, SpreadReading, ORACLE_N,
};
use crate::incremental::{mean_effect, pseudo_outcomes, shifted_propensity, Increment, PseudoOutcomes};
use crate::inference::{bootstrap, sandwich_fixed, sandwich_linear, InferenceResult};
use crate::nuisance::{fit_nuisances, NoiseMode, NuisanceConfig, NuisanceFit, OutcomeTransform, DEFAULT_CLIP};
use crate::program::{
    build_crossentropy_program, build_l2_program, build_msle_program, risk_estimate, ApproxProgram, ConstraintSpec,
    Loss, ProgramDump, ProgramKind,
};
use crate::solver::{solve, SolveOptions, SolveResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "incrementa", version, about = "Counterfactual regression under incremental propensity-score interventions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
pub enum Command {
    /// Fit a counterfactual regression with optional fairness constraints.
    Fit(FitArgs),
    /// Estimate the counterfactual mean outcome under one or more increments.
    MeanEffect(MeanEffectArgs),
    /// Factual versus counterfactual prediction on the synthetic illustration.
    SimulateIllustration(IllustrationArgs),
    /// RMSE against the oracle target over sample sizes and corruption rates.
    SimulateRmse(RmseArgs),
    /// Solve a quadratic program read from JSON.
    SolveQp(SolveQpArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Outcome column.
    #[arg(long, default_value = "y")]
    pub y: String,
    /// Treatment column (values 0/1).
    #[arg(long, default_value = "a")]
    pub a: String,
    /// Sensitive feature column (values 0/1), required by parity constraints.
    #[arg(long)]
    pub f: Option<String>,
    /// Legitimate factor column (integer levels), required by conditional parity.
    #[arg(long)]
    pub l: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct NuisanceArgs {
    /// Design of both nuisance models: intercept, raw or poly:<deg>.
    #[arg(long, default_value = "raw")]
    pub nuisance_basis: String,
    /// Cross-fitting folds.
    #[arg(long, default_value_t = 2)]
    pub folds: usize,
    /// Propensity clipping level.
    #[arg(long, default_value_t = DEFAULT_CLIP)]
    pub clip: f64,
    /// Precomputed nuisance predictions (columns pi1, mu0_<t>, mu1_<t>).
    #[arg(long)]
    pub nuisance: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceChoice {
    /// Sandwich for quadratic programs, fixed-constraint sandwich for smooth
    /// ones, bootstrap when regularity conditions fail.
    Auto,
    Sandwich,
    Fixed,
    Bootstrap,
    None,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub nuisance: NuisanceArgs,
    /// Odds multiplier δ (a number or `inf`).
    #[arg(long, default_value = "1")]
    pub delta: String,
    #[arg(long, default_value = "l2", value_parser = ["l2", "xent", "msle"])]
    pub loss: String,
    /// Program basis: intercept, raw or poly:<deg>.
    #[arg(long, default_value = "raw")]
    pub basis: String,
    /// Covariates entering the program basis (comma separated; default all).
    #[arg(long, value_delimiter = ',')]
    pub columns: Option<Vec<String>>,
    /// Statistical parity threshold.
    #[arg(long)]
    pub parity: Option<f64>,
    /// Conditional parity `<eps>:<level>`; repeatable.
    #[arg(long)]
    pub cond_parity: Vec<String>,
    /// Positive-class balance threshold (experimental).
    #[arg(long)]
    pub pos_balance: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Keep cross-entropy pseudo-outcomes unclipped.
    #[arg(long)]
    pub no_clip01: bool,
    #[arg(long, value_enum, default_value_t = InferenceChoice::Auto)]
    pub inference: InferenceChoice,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MeanEffectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub nuisance: NuisanceArgs,
    /// Comma-separated increments.
    #[arg(long, default_value = "1", value_delimiter = ',')]
    pub delta: Vec<String>,
    /// Outcome transform: identity, square, log1p, log1p_square, positive_indicator.
    #[arg(long, default_value = "identity")]
    pub transform: String,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpreadArg {
    Variance,
    Sd,
}

#[derive(Debug, Args, Serialize)]
pub struct IllustrationArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value = "0.1,0.01", value_delimiter = ',')]
    pub delta: Vec<String>,
    #[arg(long, default_value_t = 2)]
    pub folds: usize,
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
    /// Reading of the outcome spread `N(m, X)`.
    #[arg(long, value_enum, default_value_t = SpreadArg::Variance)]
    pub spread: SpreadArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseArg {
    Shared,
    PerObservation,
}

#[derive(Debug, Args, Serialize)]
pub struct RmseArgs {
    #[arg(long, default_value = "500,1000,5000", value_delimiter = ',')]
    pub n: Vec<usize>,
    #[arg(long, default_value = "0.1,0.01", value_delimiter = ',')]
    pub delta: Vec<String>,
    /// Corruption exponents; default 0.05, 0.075, …, 0.5 − 0.05.
    #[arg(long, value_delimiter = ',')]
    pub r_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    /// Statistical parity threshold.
    #[arg(long, default_value_t = 0.1)]
    pub parity: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Rows per oracle draw.
    #[arg(long, default_value_t = ORACLE_N)]
    pub n_oracle: usize,
    #[arg(long, value_enum, default_value_t = NoiseArg::Shared)]
    pub noise: NoiseArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SolveQpArgs {
    /// JSON with `q`, `c`, optional `cmat`, `d`, `lambda`.
    #[arg(long)]
    pub program: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Parses arguments and runs a command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    let out = match &cli.command {
        Command::Fit(a) => a.out.clone(),
        Command::MeanEffect(a) => a.out.clone(),
        Command::SimulateIllustration(a) => a.out.clone(),
        Command::SimulateRmse(a) => a.out.clone(),
        Command::SolveQp(a) => a.out.clone(),
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let body = json!({
                "schema_version": SCHEMA_VERSION,
                "error": { "kind": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() },
                "config": &cli.command,
            });
            if std::fs::create_dir_all(&out).is_ok() {
                let _ = write_json(&out.join("error.json"), &body);
            }
            e.exit_code()
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("INCREMENTA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Fit(a) => cmd_fit(a, cmd),
        Command::MeanEffect(a) => cmd_mean_effect(a, cmd),
        Command::SimulateIllustration(a) => cmd_simulate_illustration(a, cmd),
        Command::SimulateRmse(a) => cmd_simulate_rmse(a, cmd),
        Command::SolveQp(a) => cmd_solve_qp(a, cmd),
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, &s)
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parse_deltas(v: &[String]) -> Result<Vec<Increment>> {
    v.iter().map(|s| Increment::parse(s)).collect()
}

fn check_clip(clip: f64) -> Result<()> {
    if !(clip > 0.0 && clip < 0.5) {
        return Err(Error::Argument(format!("--clip must lie in (0, 0.5), got {clip}")));
    }
    Ok(())
}

fn load(args: &DataArgs) -> Result<Dataset> {
    let map = ColumnMap {
        y: args.y.clone(),
        a: args.a.clone(),
        covariates: None,
        sensitive: args.f.clone(),
        legitimate: args.l.clone(),
    };
    log::info!("reading {}", args.data.display());
    load_csv(&args.data, &map)
}

fn nuisances(data: &Dataset, args: &NuisanceArgs, transforms: &[OutcomeTransform]) -> Result<NuisanceFit> {
    if let Some(path) = &args.nuisance {
        log::info!("reading nuisance predictions from {}", path.display());
        let fit = NuisanceFit::read_csv(path, data.n(), args.clip)?;
        for &t in transforms {
            fit.mu(t)?;
        }
        return Ok(fit);
    }
    let design = BasisSpec::parse(&args.nuisance_basis, None)?;
    let cfg = NuisanceConfig {
        propensity_design: design.clone(),
        outcome_design: design,
        transforms: transforms.to_vec(),
        folds: args.folds,
        clip: args.clip,
    };
    log::info!("fitting nuisances with {} folds", args.folds);
    fit_nuisances(data, &cfg, SeedSpec::new(args.seed, 0))
}

fn nuisance_decisions(args: &NuisanceArgs) -> Value {
    json!({
        "propensity_model": if args.nuisance.is_some() { "supplied" } else { "logistic_irls" },
        "outcome_model": if args.nuisance.is_some() { "supplied" } else { "armwise_least_squares" },
        "cross_fitting": args.nuisance.is_none(),
        "folds": args.folds,
        "propensity_clip": args.clip,
        "nuisance_basis": args.nuisance_basis,
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Request {
    Parity(f64),
    CondParity(f64, i64),
    PosBalance(f64),
}

fn constraint_requests(a: &FitArgs) -> Result<Vec<Request>> {
    let mut out = Vec::new();
    let check = |eps: f64, flag: &str| -> Result<f64> {
        if eps >= 0.0 && eps.is_finite() {
            Ok(eps)
        } else {
            Err(Error::Argument(format!("{flag} threshold must be finite and >= 0, got {eps}")))
        }
    };
    if let Some(e) = a.parity {
        out.push(Request::Parity(check(e, "--parity")?));
    }
    for s in &a.cond_parity {
        let (e, l) = s
            .split_once(':')
            .ok_or_else(|| Error::Argument(format!("--cond-parity expects <eps>:<level>, got `{s}`")))?;
        let e: f64 = e.parse().map_err(|_| Error::Argument(format!("bad threshold in `{s}`")))?;
        let l: i64 = l.parse().map_err(|_| Error::Argument(format!("bad level in `{s}`")))?;
        out.push(Request::CondParity(check(e, "--cond-parity")?, l));
    }
    if let Some(e) = a.pos_balance {
        out.push(Request::PosBalance(check(e, "--pos-balance")?));
    }
    let needs_f = !out.is_empty();
    if needs_f && a.data.f.is_none() {
        return Err(Error::Config("sensitive feature required: pass --f <column> with fairness constraints".into()));
    }
    if out.iter().any(|r| matches!(r, Request::CondParity(..))) && a.data.l.is_none() {
        return Err(Error::Config("legitimate factor required: pass --l <column> with --cond-parity".into()));
    }
    Ok(out)
}

/// Program and its inputs for one fit.
struct Built {
    program: ApproxProgram,
    pseudo: PseudoOutcomes,
}

fn transforms_for(loss: Loss, requests: &[Request]) -> Vec<OutcomeTransform> {
    let mut t = vec![loss.target_transform()];
    if let Some(c) = loss.constant_transform() {
        t.push(c);
    }
    if requests.iter().any(|r| matches!(r, Request::PosBalance(_))) {
        t.push(OutcomeTransform::PositiveIndicator);
    }
    t
}

#[allow(clippy::too_many_arguments)]
fn build(
    data: &Dataset,
    nuis: &NuisanceFit,
    delta: Increment,
    loss: Loss,
    basis: &BasisSpec,
    requests: &[Request],
    lambda: f64,
    clip01: bool,
) -> Result<Built> {
    let mut constraints = Vec::new();
    for r in requests {
        constraints.push(match *r {
            Request::Parity(eps) => ConstraintSpec::StatisticalParity { eps },
            Request::CondParity(eps, level) => ConstraintSpec::ConditionalParity { eps, level },
            Request::PosBalance(eps) => ConstraintSpec::positive_balance(data, nuis, delta, eps)?,
        });
    }
    let pseudo = pseudo_outcomes(data, nuis, delta, loss.target_transform())?;
    let constant = match loss.constant_transform() {
        Some(t) => Some(pseudo_outcomes(data, nuis, delta, t)?),
        None => None,
    };
    let program = match loss {
        Loss::L2 => build_l2_program(data, &pseudo, constant.as_ref(), basis, &constraints, lambda)?,
        Loss::Msle => build_msle_program(data, &pseudo, constant.as_ref(), basis, &constraints, lambda)?,
        Loss::CrossEntropy => build_crossentropy_program(data, &pseudo, basis, &constraints, lambda, clip01)?,
    };
    Ok(Built { program, pseudo })
}

fn cmd_fit(a: &FitArgs, cmd: &Command) -> Result<()> {
    // validate everything before touching data
    let delta = Increment::parse(&a.delta)?;
    let loss = Loss::parse(&a.loss)?;
    let basis = BasisSpec::parse(&a.basis, a.columns.clone())?;
    BasisSpec::parse(&a.nuisance.nuisance_basis, None)?;
    check_clip(a.nuisance.clip)?;
    if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
        return Err(Error::Argument(format!("--lambda must be finite and >= 0, got {}", a.lambda)));
    }
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(Error::Argument(format!("--level must lie in (0, 1), got {}", a.level)));
    }
    if a.nuisance.folds < 2 && a.nuisance.nuisance.is_none() {
        return Err(Error::Argument("--folds must be >= 2".into()));
    }
    if a.inference == InferenceChoice::Bootstrap && a.reps < 100 {
        return Err(Error::Argument("--reps must be >= 100 for the bootstrap".into()));
    }
    let requests = constraint_requests(a)?;
    prepare_out(&a.out)?;

    let data = load(&a.data)?;
    let nuis = nuisances(&data, &a.nuisance, &transforms_for(loss, &requests))?;
    let clip01 = !a.no_clip01;
    let built = build(&data, &nuis, delta, loss, &basis, &requests, a.lambda, clip01)?;
    log::info!("solving {} program with k={} and r={}", loss, built.program.k(), built.program.r());
    let sol = solve(&built.program, &SolveOptions::default())?;
    sol.require_optimal()?;

    let (inference, inference_note) = infer(a, &data, &nuis, delta, loss, &basis, &requests, &built, &sol)?;
    let risk = risk_estimate(&built.program, &sol.beta_vector()).ok();
    let config = serde_json::to_value(cmd)?;
    let mut warnings = nuis.warnings.clone();
    warnings.extend(built.program.meta.warnings.iter().cloned());
    warnings.extend(sol.warnings.iter().cloned());
    let decisions = json!({
        "nuisance": nuisance_decisions(&a.nuisance),
        "pseudo_outcome": "uncentered efficient influence function",
        "cross_entropy_clip01": clip01,
        "constraint_expansion": "|row·beta| <= eps as two rows",
        "solver": if built.program.kind == ProgramKind::Quadratic { "dual_active_set" } else { "sqp" },
        "solver_tol": SolveOptions::default().tol,
        "experimental_constraints": built.program.meta.experimental,
        "inference": inference_note,
    });

    let beta_json = json!({
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "decisions": decisions,
        "loss": loss,
        "delta": delta,
        "basis": built.program.meta.basis,
        "beta": sol.beta,
        "gamma": sol.gamma,
        "constraints": built.program.labels,
        "active": sol.active,
        "kkt_residual": sol.kkt_residual,
        "status": sol.status,
        "iterations": sol.iterations,
        "objective": sol.objective,
        "risk": risk,
        "se": inference.as_ref().map(|i| i.se.clone()),
        "warnings": warnings,
    });
    write_json(&a.out.join("beta.json"), &beta_json)?;
    write_json(
        &a.out.join("inference.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "config": config,
            "decisions": decisions,
            "inference": inference,
        }),
    )?;
    let q = shifted_propensity(&nuis, delta);
    let mut csv = String::from("row,pi1,q,phi\n");
    for i in 0..data.n() {
        csv.push_str(&format!("{},{},{},{}\n", i, nuis.pi1()[i], q[i], built.pseudo.phi[i]));
    }
    write_file(&a.out.join("pseudo_outcomes.csv"), &csv)?;
    log::info!("wrote artifacts to {}", a.out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn infer(
    a: &FitArgs,
    data: &Dataset,
    nuis: &NuisanceFit,
    delta: Increment,
    loss: Loss,
    basis: &BasisSpec,
    requests: &[Request],
    built: &Built,
    sol: &SolveResult,
) -> Result<(Option<InferenceResult>, Value)> {
    let boot = || -> Result<InferenceResult> {
        log::info!("bootstrap with {} replicates", a.reps);
        bootstrap(
            data.n(),
            &sol.beta,
            |idx| {
                let d = data.select_rows(idx);
                let nu = nuis.select_rows(idx);
                let b = build(&d, &nu, delta, loss, basis, requests, a.lambda, !a.no_clip01)?;
                let s = solve(&b.program, &SolveOptions::default())?;
                s.require_optimal()?;
                Ok(s.beta)
            },
            a.reps,
            SeedSpec::new(a.nuisance.seed, 0).substream(0xb007),
            a.level,
        )
    };
    let sandwich = || -> Result<InferenceResult> {
        match built.program.kind {
            ProgramKind::Quadratic => sandwich_linear(&built.program, sol, a.level),
            ProgramKind::SmoothConvex => sandwich_fixed(&built.program, sol, a.level),
        }
    };
    match a.inference {
        InferenceChoice::None => Ok((None, json!({ "method": "none" }))),
        InferenceChoice::Sandwich => Ok((Some(sandwich_linear(&built.program, sol, a.level)?), json!({ "method": "sandwich_linear" }))),
        InferenceChoice::Fixed => Ok((Some(sandwich_fixed(&built.program, sol, a.level)?), json!({ "method": "sandwich_fixed" }))),
        InferenceChoice::Bootstrap => Ok((Some(boot()?), json!({ "method": "bootstrap", "replicates": a.reps, "resampling": "rows with their nuisance predictions" }))),
        InferenceChoice::Auto => match sandwich() {
            Ok(r) => Ok((Some(r.clone()), json!({ "method": serde_json::to_value(r.method)? }))),
            Err(e @ (Error::StrictComplementarity(_) | Error::Licq(_) | Error::Config(_))) => {
                log::warn!("sandwich unavailable ({e}); falling back to the bootstrap");
                Ok((
                    Some(boot()?),
                    json!({ "method": "bootstrap", "replicates": a.reps, "fallback_reason": e.to_string() }),
                ))
            }
            Err(e) => Err(e),
        },
    }
}

fn cmd_mean_effect(a: &MeanEffectArgs, cmd: &Command) -> Result<()> {
    let deltas = parse_deltas(&a.delta)?;
    let tag = OutcomeTransform::from_tag(&a.transform)
        .ok_or_else(|| Error::Argument(format!("unknown transform `{}`", a.transform)))?;
    BasisSpec::parse(&a.nuisance.nuisance_basis, None)?;
    check_clip(a.nuisance.clip)?;
    prepare_out(&a.out)?;
    let data = load(&a.data)?;
    let nuis = nuisances(&data, &a.nuisance, &[tag])?;
    let results = deltas
        .iter()
        .map(|&d| mean_effect(&data, &nuis, d, tag))
        .collect::<Result<Vec<_>>>()?;
    write_json(
        &a.out.join("mean_effect.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "config": serde_json::to_value(cmd)?,
            "decisions": {
                "nuisance": nuisance_decisions(&a.nuisance),
                "interval": "eif ± 1.96·se",
            },
            "results": results,
            "warnings": nuis.warnings,
        }),
    )
}

fn cmd_simulate_illustration(a: &IllustrationArgs, cmd: &Command) -> Result<()> {
    if a.n < 10 {
        return Err(Error::Argument("--n must be at least 10".into()));
    }
    if a.bins == 0 {
        return Err(Error::Argument("--bins must be >= 1".into()));
    }
    let cfg = IllustrationConfig {
        n: a.n,
        deltas: parse_deltas(&a.delta)?,
        folds: a.folds,
        bins: a.bins,
        spread: match a.spread {
            SpreadArg::Variance => SpreadReading::Variance,
            SpreadArg::Sd => SpreadReading::StdDev,
        },
        seed: SeedSpec::new(a.seed, 0),
    };
    prepare_out(&a.out)?;
    log::info!("illustration with n={} and {} increments", cfg.n, cfg.deltas.len());
    let study = run_illustration(&cfg)?;
    log::info!("illustration finished in {:.1}s", study.elapsed_seconds);
    write_json(
        &a.out.join("illustration.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "config": serde_json::to_value(cmd)?,
            "decisions": {
                "outcome_spread": cfg.spread,
                "factual_model": "least squares on (1, x, x^2, a) with a replaced by the fitted propensity",
                "counterfactual_model": "unconstrained l2 program on (1, x, x^2)",
                "nuisance_models": "logistic on (1, x); arm-wise least squares on (1, x, x^2)",
            },
            "study": study,
        }),
    )?;
    study.write_summary_csv(&a.out.join("illustration_summary.csv"))?;
    study.write_histogram_csv(&a.out.join("illustration_hist.csv"))
}

fn cmd_simulate_rmse(a: &RmseArgs, cmd: &Command) -> Result<()> {
    let defaults = RmseStudyConfig::default();
    if a.n.iter().any(|&n| n < 10) {
        return Err(Error::Argument("every --n must be at least 10".into()));
    }
    if !(a.parity >= 0.0 && a.parity.is_finite()) {
        return Err(Error::Argument("--parity must be finite and >= 0".into()));
    }
    let cfg = RmseStudyConfig {
        n_set: a.n.clone(),
        deltas: parse_deltas(&a.delta)?,
        r_grid: a.r_grid.clone().unwrap_or(defaults.r_grid),
        reps: a.reps,
        eps: a.parity,
        lambda: a.lambda,
        n_oracle: a.n_oracle,
        noise: match a.noise {
            NoiseArg::Shared => NoiseMode::Shared,
            NoiseArg::PerObservation => NoiseMode::PerObservation,
        },
        seed: SeedSpec::new(a.seed, 0),
    };
    prepare_out(&a.out)?;
    log::info!(
        "rmse study: {} sizes x {} increments x {} rates x {} reps",
        cfg.n_set.len(),
        cfg.deltas.len(),
        cfg.r_grid.len(),
        cfg.reps
    );
    let study = run_rmse_study(&cfg)?;
    log::info!("rmse study finished in {:.1}s", study.elapsed_seconds);
    write_json(
        &a.out.join("rmse_study.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "version": env!("CARGO_PKG_VERSION"),
            "config": serde_json::to_value(cmd)?,
            "decisions": {
                "outcome_noise": "standard normal",
                "x2_spread": "variance 2",
                "basis": study.basis,
                "constraint": "statistical parity",
                "corruption_noise": cfg.noise,
                "oracle": "conditional-mean target on two independent draws",
                "rmse": "sqrt(mean over replicates of squared euclidean error)",
            },
            "oracles": study.oracles,
            "rows": study.rows,
        }),
    )?;
    study.write_rmse_csv(&a.out.join("rmse.csv"))?;
    study.write_replicates_csv(&a.out.join("replicates.csv"))
}

fn cmd_solve_qp(a: &SolveQpArgs, cmd: &Command) -> Result<()> {
    let text = std::fs::read_to_string(&a.program).map_err(|e| Error::io(&a.program, e))?;
    let dump: ProgramDump = serde_json::from_str(&text)?;
    let program = dump.into_program()?;
    prepare_out(&a.out)?;
    let sol = solve(&program, &SolveOptions::default())?;
    let beta = DVector::from_column_slice(&sol.beta);
    write_json(
        &a.out.join("solution.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "config": serde_json::to_value(cmd)?,
            "decisions": { "solver": "dual_active_set", "tol": SolveOptions::default().tol },
            "solution": sol,
            "objective_with_penalty": program.objective(&beta),
        }),
    )?;
    sol.require_optimal()
}
