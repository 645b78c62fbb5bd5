//! Command-line front end: configuration loading, command dispatch and output.
//!
//! Exit codes: 0 success, 1 a `compare` check failed, 2 usage error,
//! 3 configuration or validation error, 4 numerical failure.

pub mod config;
pub mod output;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::json;

use crate::engine_phase;
use crate::engine_renewal::{self, MomentState};
use crate::error::TtshsError;
use crate::gene_expression::{self, GeneModelParams};
use crate::model::{TimingLaw, TtshsModel};
use crate::ode::OdeTolerances;
use crate::phase_type;
use crate::simulator::{self, BurstSize, SteadyEstimate, SteadyOptions};

use config::{ConfigError, OutputFormat, RunConfig, SamplerKind, TimingConfig};
use output::Row;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Monte Carlo agreement threshold in standard errors.
pub const MC_SIGMAS: f64 = 3.0;
/// Relative agreement required between the two engines.
pub const ENGINE_REL_TOL: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(
    name = "ttshs",
    version,
    about = "Moment dynamics of linear time-triggered stochastic hybrid systems"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a configuration and report every violated invariant.
    Validate(CommonArgs),
    /// Transient mean (and covariance for phase-type timing) on a time grid.
    Transient(CommonArgs),
    /// Stationary mean and covariance.
    Steady(CommonArgs),
    /// Monte Carlo ensemble statistics on a time grid.
    Simulate(CommonArgs),
    /// Engines against Monte Carlo at steady state, with PASS/FAIL per quantity.
    Compare(CommonArgs),
    /// Fit a phase-type mixture to a mean and CV².
    FitTiming(FitArgs),
    /// Protein-expression preset: closed forms, engines and (optionally) simulation.
    Gene(GeneArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<OutputFormat>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerKind>,
    /// Worker threads for the simulator (default: all cores). Does not change results.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct FitArgs {
    #[arg(long)]
    pub mean: f64,
    #[arg(long)]
    pub cv2: f64,
    /// Rewrite this configuration's timing law with the fitted mixture.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BurstLaw {
    Exponential,
    Constant,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeneVariant {
    Deterministic,
    Bursty,
    Both,
}

#[derive(Debug, Args, Clone)]
pub struct GeneArgs {
    /// Burst frequency kₓ.
    #[arg(long, default_value_t = 10.0)]
    pub kx: f64,
    /// Mean burst size ⟨B⟩.
    #[arg(long, default_value_t = 1.0)]
    pub burst_mean: f64,
    #[arg(long, value_enum, default_value_t = BurstLaw::Exponential)]
    pub burst_law: BurstLaw,
    /// Dilution rate γₓ.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Partitioning noise β.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Erlang stage count of the division interval.
    #[arg(long, default_value_t = 4)]
    pub division_stages: u32,
    /// Fit the division interval to this CV² instead of an Erlang.
    #[arg(long)]
    pub division_cv2: Option<f64>,
    #[arg(long, value_enum, default_value_t = GeneVariant::Both)]
    pub variant: GeneVariant,
    /// Also run the exact-binomial simulator.
    #[arg(long)]
    pub compare: bool,
    #[arg(long, default_value_t = 100_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Config(ConfigError),
    Model(TtshsError),
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<TtshsError> for Failure {
    fn from(e: TtshsError) -> Self {
        Failure::Model(e)
    }
}

impl Failure {
    fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) | Failure::Io(_) => EXIT_CONFIG,
            Failure::Model(e) => match e {
                TtshsError::NotHurwitz(_)
                | TtshsError::SingularSystem(_)
                | TtshsError::SingularLyapunov => EXIT_NUMERICAL,
                _ => EXIT_CONFIG,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Config(e) => e.to_string(),
            Failure::Model(e) => format!("{}: {e}", e.code()),
            Failure::Io(m) => format!("IO_ERROR: {m}"),
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("{}", f.message());
            f.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32, Failure> {
    match command {
        Command::Validate(a) => cmd_validate(&a),
        Command::Transient(a) => cmd_transient(&a),
        Command::Steady(a) => cmd_steady(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::FitTiming(a) => cmd_fit(&a),
        Command::Gene(a) => cmd_gene(&a),
    }
}

struct Loaded {
    cfg: RunConfig,
    model: TtshsModel,
}

fn load(args: &CommonArgs) -> Result<Loaded, Failure> {
    let mut cfg = config::load_config(&args.config)?;
    let run = &mut cfg.run;
    if let Some(v) = args.t_end {
        run.t_end = v;
    }
    if let Some(v) = args.grid_points {
        run.grid_points = v;
    }
    if let Some(v) = args.paths {
        run.paths = v;
    }
    if let Some(v) = args.seed {
        run.seed = v;
    }
    if let Some(v) = &args.out {
        run.out = Some(v.display().to_string());
    }
    if let Some(v) = args.format {
        run.format = v;
    }
    if let Some(v) = args.sampler {
        run.sampler = v;
    }
    let model = cfg.to_model()?;
    Ok(Loaded { cfg, model })
}

fn emit(out: Option<&str>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure::Io(format!("{path}: {e}"))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| Failure::Io(e.to_string()))
        }
    }
}

fn tolerances_json() -> serde_json::Value {
    let t = OdeTolerances::default();
    json!({"ode_rel_tol": t.rel_tol, "ode_abs_tol": t.abs_tol})
}

fn cmd_validate(args: &CommonArgs) -> Result<i32, Failure> {
    // shape and schema errors surface from load; the report adds the Hurwitz check
    let loaded = load(args)?;
    let report = loaded.model.validate(true);
    let text = match loaded.cfg.run.format {
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(&json!({
                "valid": report.is_valid(),
                "violations": report.violations,
            }))
            .expect("json");
            s.push('\n');
            s
        }
        OutputFormat::Csv => {
            let mut s = String::from("code,severity,message\n");
            for v in &report.violations {
                let sev = match v.severity {
                    crate::model::Severity::Error => "error",
                    crate::model::Severity::Warning => "warning",
                };
                s.push_str(&format!(
                    "{},{},\"{}\"\n",
                    v.code,
                    sev,
                    v.message.replace('"', "'")
                ));
            }
            s
        }
    };
    emit(loaded.cfg.run.out.as_deref(), &text)?;
    Ok(if report.is_valid() {
        EXIT_OK
    } else {
        EXIT_CONFIG
    })
}

fn moment_row(label: Option<&str>, state: &MomentState) -> Row {
    Row {
        label: label.map(str::to_string),
        time: state.time,
        mean: state.mean.clone(),
        covariance: Some(state.covariance()),
        se_mean: None,
        se_covariance: None,
    }
}

fn cmd_transient(args: &CommonArgs) -> Result<i32, Failure> {
    let Loaded { cfg, model } = load(args)?;
    let grid = cfg.run.grid();
    let (engine, rows): (&str, Vec<Row>) = if model.timer_reset.timing.as_phase_type().is_some() {
        let states = engine_phase::transient_moments(&model, &grid)?;
        (
            "phase",
            states.iter().map(|s| moment_row(None, s)).collect(),
        )
    } else if model.is_noise_imparting() {
        eprintln!("note: renewal timing gives the transient mean only; fit a phase-type law for covariances");
        let means = engine_renewal::transient_mean(&model, &grid)?;
        (
            "renewal",
            means
                .into_iter()
                .map(|(t, m)| Row {
                    label: None,
                    time: t,
                    mean: m,
                    covariance: None,
                    se_mean: None,
                    se_covariance: None,
                })
                .collect(),
        )
    } else {
        return Err(TtshsError::TimingNotPhaseType.into());
    };
    let meta = json!({"engine": engine, "tolerances": tolerances_json()});
    emit(
        cfg.run.out.as_deref(),
        &output::render(cfg.run.format, "transient", meta, &rows),
    )?;
    Ok(EXIT_OK)
}

/// Stationary moments from every applicable engine, labelled.
fn steady_engines(model: &TtshsModel) -> Result<Vec<(&'static str, MomentState)>, TtshsError> {
    let mut out = Vec::new();
    if model.timer_reset.timing.as_phase_type().is_some() {
        out.push(("phase", engine_phase::steady_state(model)?));
    }
    if model.is_noise_imparting() {
        out.push(("renewal", engine_renewal::steady_state(model)?));
    }
    if out.is_empty() {
        return Err(TtshsError::TimingNotPhaseType);
    }
    Ok(out)
}

fn cmd_steady(args: &CommonArgs) -> Result<i32, Failure> {
    let Loaded { cfg, model } = load(args)?;
    let states = steady_engines(&model)?;
    let rows: Vec<Row> = states.iter().map(|(l, s)| moment_row(Some(l), s)).collect();
    let meta = json!({"tolerances": tolerances_json()});
    emit(
        cfg.run.out.as_deref(),
        &output::render(cfg.run.format, "steady", meta, &rows),
    )?;
    Ok(EXIT_OK)
}

fn cmd_simulate(args: &CommonArgs) -> Result<i32, Failure> {
    let Loaded { cfg, model } = load(args)?;
    let samplers = cfg.samplers(cfg.run.sampler);
    let grid = cfg.run.grid();
    let summary = simulator::run_ensemble(
        &model,
        &samplers,
        cfg.run.paths,
        &grid,
        cfg.run.seed,
        args.threads,
    )?;
    if summary.projection_warnings > 0 {
        eprintln!(
            "warning: {} reset covariances needed PSD projection",
            summary.projection_warnings
        );
    }
    let rows: Vec<Row> = (0..summary.times.len())
        .map(|g| Row {
            label: None,
            time: summary.times[g],
            mean: summary.mean[g].clone(),
            covariance: Some(summary.covariance[g].clone()),
            se_mean: Some(summary.se_mean[g].clone()),
            se_covariance: Some(summary.se_covariance[g].clone()),
        })
        .collect();
    let meta = json!({
        "seed": summary.master_seed,
        "paths": summary.paths,
        "sampler": format!("{:?}", samplers.timer),
        "projection_warnings": summary.projection_warnings,
    });
    emit(
        cfg.run.out.as_deref(),
        &output::render(cfg.run.format, "simulate", meta, &rows),
    )?;
    Ok(EXIT_OK)
}

/// One compared quantity.
#[derive(Debug, Clone)]
pub struct Check {
    pub quantity: String,
    pub reference: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub kind: &'static str,
}

impl Check {
    pub fn passed(&self) -> bool {
        (self.observed - self.reference).abs() <= self.tolerance
    }
}

/// Checks an engine's stationary moments against a Monte Carlo estimate at
/// [`MC_SIGMAS`] standard errors.
pub fn mc_checks(engine: &str, state: &MomentState, mc: &SteadyEstimate) -> Vec<Check> {
    let n = state.mean.len();
    let cov = state.covariance();
    let mut out = Vec::new();
    for a in 0..n {
        out.push(Check {
            quantity: format!("{engine}: mean_{a}"),
            reference: state.mean[a],
            observed: mc.mean[a],
            tolerance: MC_SIGMAS * mc.se_mean[a],
            kind: "monte_carlo",
        });
    }
    for a in 0..n {
        for b in a..n {
            out.push(Check {
                quantity: format!("{engine}: cov_{a}{b}"),
                reference: cov[(a, b)],
                observed: mc.covariance[(a, b)],
                tolerance: MC_SIGMAS * mc.se_covariance[(a, b)],
                kind: "monte_carlo",
            });
        }
    }
    out
}

/// Checks the two engines against each other at [`ENGINE_REL_TOL`].
pub fn engine_checks(phase: &MomentState, renewal: &MomentState) -> Vec<Check> {
    let n = phase.mean.len();
    let (cp, cr) = (phase.covariance(), renewal.covariance());
    let scale_m = renewal.mean.amax().max(f64::MIN_POSITIVE);
    let scale_c = cr.amax().max(f64::MIN_POSITIVE);
    let mut out = Vec::new();
    for a in 0..n {
        out.push(Check {
            quantity: format!("engines: mean_{a}"),
            reference: renewal.mean[a],
            observed: phase.mean[a],
            tolerance: ENGINE_REL_TOL * scale_m,
            kind: "engine",
        });
    }
    for a in 0..n {
        for b in a..n {
            out.push(Check {
                quantity: format!("engines: cov_{a}{b}"),
                reference: cr[(a, b)],
                observed: cp[(a, b)],
                tolerance: ENGINE_REL_TOL * scale_c,
                kind: "engine",
            });
        }
    }
    out
}

fn checks_table(checks: &[Check]) -> String {
    let mut s = format!(
        "{:<24} {:>16} {:>16} {:>12} {:>6}\n",
        "quantity", "reference", "observed", "tolerance", "result"
    );
    for c in checks {
        s.push_str(&format!(
            "{:<24} {:>16.9e} {:>16.9e} {:>12.3e} {:>6}\n",
            c.quantity,
            c.reference,
            c.observed,
            c.tolerance,
            if c.passed() { "PASS" } else { "FAIL" }
        ));
    }
    s
}

fn checks_json(checks: &[Check]) -> serde_json::Value {
    json!(checks
        .iter()
        .map(|c| json!({
            "quantity": c.quantity,
            "kind": c.kind,
            "reference": c.reference,
            "observed": c.observed,
            "tolerance": c.tolerance,
            "pass": c.passed(),
        }))
        .collect::<Vec<_>>())
}

fn cmd_compare(args: &CommonArgs) -> Result<i32, Failure> {
    let Loaded { cfg, model } = load(args)?;
    let engines = steady_engines(&model)?;
    let samplers = cfg.samplers(cfg.run.sampler);
    let mc = simulator::steady_state_estimate(
        &model,
        &samplers,
        cfg.run.paths,
        cfg.run.seed,
        SteadyOptions::default(),
        args.threads,
    )?;
    let mut checks = Vec::new();
    if let [(_, phase), (_, renewal)] = engines.as_slice() {
        checks.extend(engine_checks(phase, renewal));
    }
    for (label, state) in &engines {
        checks.extend(mc_checks(label, state, &mc));
    }
    let all_pass = checks.iter().all(Check::passed);
    let text = match cfg.run.format {
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(&json!({
                "command": "compare",
                "version": env!("CARGO_PKG_VERSION"),
                "seed": mc.master_seed,
                "paths": mc.paths,
                "burn_in": mc.burn_in,
                "checks": checks_json(&checks),
                "pass": all_pass,
            }))
            .expect("json");
            s.push('\n');
            s
        }
        OutputFormat::Csv => {
            let mut s = format!(
                "paths = {}, seed = {}, burn-in = {:.4}, horizon = {:.4}\n",
                mc.paths, mc.master_seed, mc.burn_in, mc.horizon
            );
            s.push_str(&checks_table(&checks));
            s.push_str(if all_pass {
                "overall: PASS\n"
            } else {
                "overall: FAIL\n"
            });
            s
        }
    };
    emit(cfg.run.out.as_deref(), &text)?;
    Ok(if all_pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_fit(args: &FitArgs) -> Result<i32, Failure> {
    let mix = phase_type::fit_mixture(args.mean, args.cv2)?;
    let timing = TimingConfig::from_mixture(&mix);
    let text = match &args.config {
        Some(path) => {
            let mut cfg = config::load_config(path)?;
            cfg.model.timer_reset.timing = timing;
            let mut s = cfg.to_json();
            s.push('\n');
            s
        }
        None => {
            let mut s = serde_json::to_string_pretty(&timing).expect("json");
            s.push('\n');
            s
        }
    };
    let (mean, cv2) = mix.mean_and_cv2();
    eprintln!(
        "fitted mixture: mean = {mean:.12}, cv2 = {cv2:.12}, stages = {}",
        mix.stage_count()
    );
    emit(
        args.out
            .as_ref()
            .map(|p| p.display().to_string())
            .as_deref(),
        &text,
    )?;
    Ok(EXIT_OK)
}

/// One line of the gene-expression comparison.
#[derive(Debug, Clone)]
pub struct GeneLine {
    pub variant: &'static str,
    pub method: &'static str,
    pub mean: f64,
    pub cv2: f64,
    pub se_cv2: Option<f64>,
}

/// Closed forms, both engines and optionally the simulator for one variant.
pub fn gene_lines(
    params: &GeneModelParams,
    with_bursts: bool,
    simulate: Option<(usize, u64, Option<usize>)>,
) -> Result<Vec<GeneLine>, TtshsError> {
    let variant = if with_bursts {
        "bursty"
    } else {
        "deterministic"
    };
    let model = gene_expression::build_ttshs(params, with_bursts)?;
    let closed = gene_expression::closed_form_stats(params, with_bursts);
    let mut lines = vec![
        GeneLine {
            variant,
            method: "printed closed form",
            mean: closed.mean,
            cv2: closed.cv2,
            se_cv2: None,
        },
        GeneLine {
            variant,
            method: "lyapunov substitution",
            mean: params.mean_level(),
            cv2: gene_expression::lyapunov_cv2(params, with_bursts),
            se_cv2: None,
        },
    ];
    let renewal = engine_renewal::steady_state(&model)?;
    lines.push(GeneLine {
        variant,
        method: "engine (renewal)",
        mean: renewal.mean[0],
        cv2: renewal.cv2()[0],
        se_cv2: None,
    });
    if matches!(model.timer_reset.timing, TimingLaw::PhaseType(_)) {
        let phase = engine_phase::steady_state(&model)?;
        lines.push(GeneLine {
            variant,
            method: "engine (phase-type)",
            mean: phase.mean[0],
            cv2: phase.cv2()[0],
            se_cv2: None,
        });
    }
    if let Some((paths, seed, threads)) = simulate {
        let samplers = gene_expression::sampler_set(params, with_bursts);
        let est = simulator::steady_state_estimate(
            &model,
            &samplers,
            paths,
            seed,
            SteadyOptions::default(),
            threads,
        )?;
        let (cv2, se) = est.cv2();
        lines.push(GeneLine {
            variant,
            method: "simulation (binomial)",
            mean: est.mean[0],
            cv2: cv2[0],
            se_cv2: Some(se[0]),
        });
    }
    Ok(lines)
}

fn cmd_gene(args: &GeneArgs) -> Result<i32, Failure> {
    let burst_size = match args.burst_law {
        BurstLaw::Exponential => BurstSize::Exponential {
            mean: args.burst_mean,
        },
        BurstLaw::Constant => BurstSize::Constant {
            size: args.burst_mean,
        },
        BurstLaw::Geometric => BurstSize::Geometric {
            mean: args.burst_mean,
        },
    };
    let division_timing = match args.division_cv2 {
        Some(cv2) => gene_expression::fitted_division_timing(args.gamma, cv2)?,
        None => gene_expression::erlang_division_timing(args.gamma, args.division_stages),
    };
    let params = GeneModelParams {
        burst_rate: args.kx,
        burst_size,
        dilution_rate: args.gamma,
        partition_noise: args.beta,
        division_timing,
        initial_level: None,
    };
    let sim = args
        .compare
        .then_some((args.paths, args.seed, args.threads));
    let variants: &[bool] = match args.variant {
        GeneVariant::Deterministic => &[false],
        GeneVariant::Bursty => &[true],
        GeneVariant::Both => &[false, true],
    };
    let mut lines = Vec::new();
    for &b in variants {
        lines.extend(gene_lines(&params, b, sim)?);
    }
    let text = match args.format {
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(&json!({
                "command": "gene",
                "version": env!("CARGO_PKG_VERSION"),
                "mean_interval": params.mean_interval(),
                "lines": lines.iter().map(|l| json!({
                    "variant": l.variant,
                    "method": l.method,
                    "mean": l.mean,
                    "cv2": l.cv2,
                    "se_cv2": l.se_cv2,
                })).collect::<Vec<_>>(),
            }))
            .expect("json");
            s.push('\n');
            s
        }
        OutputFormat::Csv => {
            let mut s = String::from("variant,method,mean,cv2,se_cv2\n");
            for l in &lines {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    l.variant,
                    l.method,
                    output::fmt_f64(l.mean),
                    output::fmt_f64(l.cv2),
                    l.se_cv2.map(output::fmt_f64).unwrap_or_default()
                ));
            }
            s
        }
    };
    emit(
        args.out
            .as_ref()
            .map(|p| p.display().to_string())
            .as_deref(),
        &text,
    )?;
    Ok(EXIT_OK)
}

/// Largest relative entrywise gap between two matrices, scaled by the larger
/// max-abs entry.
pub fn max_rel_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax()).max(f64::MIN_POSITIVE);
    (a - b).amax() / scale
}
