//! `admission`: simulate, calibrate, fit and price from the command line.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use admission_core::moments::{moment_profile, LookaheadGrid};
use admission_core::pricing::{labeling_savings, price_table, LabeledType, PricingConfig};
use admission_core::simulator::{
    calibrate_and_run, default_search, run_experiment, run_replication_logged, write_event_log, SimConfig,
};
use admission_core::trace_fit::{
    calibrate_p1_p2, fit_records, generate_trace, group_trace, read_trace, regenerated_distance, write_trace, FitConfig,
    FitMethod,
};
use admission_core::{BeliefState, Error, InfoLevel, PolicyKind, PopulationModel, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::manifest::{digest, Run};

#[derive(Parser)]
#[command(name = "admission", version, about = "Moment-based cluster admission experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the number of replications.
    #[arg(long, global = true)]
    reps: Option<u32>,
    /// Worker threads for replications.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run all replications of a simulation config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Also write the event log of the first replication.
        #[arg(long)]
        event_log: bool,
    },
    /// Binary-search the largest threshold meeting the SLA.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Policy to calibrate instead of the one in the config.
        #[arg(long)]
        policy: Option<PolicyKind>,
        /// Search bracket as `lo,hi`.
        #[arg(long, value_parser = parse_pair)]
        bounds: Option<(f64, f64)>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Fit a population model to a trace CSV.
    Fit {
        #[arg(long)]
        trace: PathBuf,
        /// Trace length in hours when the trace has no `end_of_trace` row.
        #[arg(long, default_value_t = 730.0)]
        trace_length: f64,
        #[arg(long, default_value_t = 0.5)]
        p1: f64,
        #[arg(long, default_value_t = 0.5)]
        p2: f64,
        #[arg(long, value_enum, default_value_t = MethodArg::Marginal)]
        method: MethodArg,
        /// Grid of candidate values searched for both P1 and P2.
        #[arg(long, value_delimiter = ',')]
        p_grid: Option<Vec<f64>>,
    },
    /// Calibrate and simulate every policy at several information levels.
    SweepInfo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,5,50")]
        levels: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "zeroth,first,second")]
        policies: Vec<PolicyKind>,
    },
    /// Dump the moment profile of one deployment.
    Moments {
        #[arg(long)]
        config: PathBuf,
    },
    /// Price labelled workload types and the pooled mixture.
    Price {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic trace from a population model.
    SynthTrace {
        /// Population model TOML; the built-in fit when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 30_000)]
        deployments: usize,
        #[arg(long, default_value_t = 730.0)]
        length: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    TwoStage,
    Marginal,
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected lo,hi, got {s:?}"))?;
    let lo = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let hi = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((lo, hi))
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))
}

fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    toml::from_str(&read_config(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Loads a simulation config, applies the command-line overrides and
/// returns it with a digest of everything but the seed.
fn load_sim(path: &Path, common: &Common) -> Result<(SimConfig, String)> {
    let mut cfg: SimConfig = parse_toml(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = common.reps {
        cfg.replications = reps;
    }
    cfg.validate()?;
    let unseeded = SimConfig { seed: 0, ..cfg.clone() };
    Ok((cfg, digest(unseeded.to_toml_string()?.as_bytes())))
}

#[derive(Serialize)]
struct Summary<'a, T> {
    config_digest: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: T,
}

fn simulate(common: &Common, config: &Path, event_log: bool) -> Result<()> {
    let (cfg, cfg_digest) = load_sim(config, common)?;
    let mut run = Run::start("simulate", cfg_digest.clone(), Some(cfg.seed), &common.out)?;
    let result = run_experiment(&cfg, common.parallel)?;
    run.write_json("summary.json", &Summary { config_digest: &cfg_digest, seed: cfg.seed, body: &result })?;
    if event_log {
        let mut records = Vec::new();
        run_replication_logged(&cfg, cfg.replication_seed(0), &mut |e| records.push(e))?;
        let file = fs::File::create(run.path("events.csv"))?;
        write_event_log(&records, file)?;
    }
    println!(
        "{} utilization {:.2}% (stderr {:.2} pp), denial rate {:.6}",
        result.policy,
        100.0 * result.utilization,
        result.utilization_stderr_pp,
        result.denial_rate
    );
    run.finish()?;
    Ok(())
}

fn calibrate(
    common: &Common,
    config: &Path,
    policy: Option<PolicyKind>,
    bounds: Option<(f64, f64)>,
    tolerance: Option<f64>,
) -> Result<()> {
    let (mut cfg, cfg_digest) = load_sim(config, common)?;
    if let Some(kind) = policy {
        cfg.policy.kind = kind;
    }
    let (default_bounds, default_tol) = default_search(cfg.policy.kind, cfg.capacity_c);
    let bounds = bounds.unwrap_or(default_bounds);
    let mut run = Run::start("calibrate", cfg_digest.clone(), Some(cfg.seed), &common.out)?;
    let (report, result) = calibrate_and_run(&cfg, bounds, tolerance.unwrap_or(default_tol), common.parallel)?;
    #[derive(Serialize)]
    struct Calibration<'a> {
        calibration: &'a admission_core::CalibrationReport,
        utilization: f64,
        utilization_stderr_pp: f64,
        denial_rate: f64,
    }
    let body = Calibration {
        calibration: &report,
        utilization: result.utilization,
        utilization_stderr_pp: result.utilization_stderr_pp,
        denial_rate: result.denial_rate,
    };
    run.write_json("calibration.json", &Summary { config_digest: &cfg_digest, seed: cfg.seed, body })?;
    println!(
        "{} threshold {} utilization {:.2}% after {} probes",
        report.policy,
        report.threshold,
        100.0 * result.utilization,
        report.probes.len()
    );
    run.finish()?;
    Ok(())
}

struct FitArgs<'a> {
    trace: &'a Path,
    trace_length: f64,
    p1: f64,
    p2: f64,
    method: MethodArg,
    p_grid: Option<&'a [f64]>,
}

fn fit(common: &Common, args: FitArgs) -> Result<()> {
    let bytes = fs::read(args.trace).map_err(|e| Error::Config(format!("cannot read trace {}: {e}", args.trace.display())))?;
    let seed = common.seed.unwrap_or(0);
    let events = read_trace(bytes.as_slice())?;
    let (records, length) = group_trace(&events, args.trace_length)?;
    let method = match args.method {
        MethodArg::TwoStage => FitMethod::TwoStage,
        MethodArg::Marginal => FitMethod::Marginal,
    };
    let base = FitConfig { p1: args.p1, p2: args.p2, trace_length: length, method };
    let mut run = Run::start("fit", digest(&bytes), Some(seed), &common.out)?;
    let report = match args.p_grid {
        Some(grid) => {
            let (report, candidates) = calibrate_p1_p2(&records, &base, grid, seed)?;
            run.write_json("p1_p2_search.json", &candidates)?;
            report
        }
        None => {
            let mut report = fit_records(&records, &base)?;
            report.cvm_distance = Some(regenerated_distance(&records, length, &report.model, seed)?);
            report
        }
    };
    run.write("model.toml", report.model.to_toml_string()?.as_bytes())?;
    run.write_json("fit_report.json", &report)?;
    let m = &report.model;
    println!(
        "fitted {} deployments: nu {:.3}, delta {:.4}, Cramér–von Mises {:.4}",
        report.deployments,
        m.nu,
        m.delta,
        report.cvm_distance.unwrap_or(f64::NAN)
    );
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    policy: PolicyKind,
    level: u32,
    threshold: f64,
    utilization: f64,
    stderr: f64,
    denial_rate: f64,
}

fn sweep_info(common: &Common, config: &Path, levels: &[u32], policies: &[PolicyKind]) -> Result<()> {
    let (cfg, cfg_digest) = load_sim(config, common)?;
    let mut run = Run::start("sweep-info", cfg_digest, Some(cfg.seed), &common.out)?;
    let mut rows = Vec::new();
    for &kind in policies {
        for &level in levels {
            let mut probe = SimConfig { info_level: InfoLevel::new(level), ..cfg.clone() };
            probe.policy.kind = kind;
            let (bounds, tol) = default_search(kind, cfg.capacity_c);
            let (report, result) = calibrate_and_run(&probe, bounds, tol, common.parallel)?;
            println!("{kind} level {level}: threshold {} utilization {:.2}%", report.threshold, 100.0 * result.utilization);
            rows.push(SweepRow {
                policy: kind,
                level,
                threshold: report.threshold,
                utilization: result.utilization,
                stderr: result.utilization_stderr_pp,
                denial_rate: result.denial_rate,
            });
        }
    }
    let mut w = csv::Writer::from_writer(fs::File::create(run.path("sweep_info.csv"))?);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    run.finish()?;
    Ok(())
}

/// Input of the `moments` command.
#[derive(Debug, Deserialize, Serialize)]
struct MomentsConfig {
    #[serde(default)]
    population: PopulationModel,
    #[serde(default)]
    grid: LookaheadGrid,
    /// Belief to project; the population prior when omitted.
    belief: Option<BeliefState>,
    cores: u64,
}

fn moments(common: &Common, config: &Path) -> Result<()> {
    let text = read_config(config)?;
    let cfg: MomentsConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    cfg.population.validate()?;
    let belief = cfg.belief.unwrap_or_else(|| BeliefState::from_prior(&cfg.population));
    let profile = moment_profile(&belief, cfg.cores, &cfg.population, &cfg.grid)?;
    let mut run = Run::start("moments", digest(text.as_bytes()), None, &common.out)?;
    profile.write_csv(&cfg.grid, fs::File::create(run.path("profile.csv"))?)?;
    run.finish()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PriceConfig {
    pricing: PricingConfig,
    types: Vec<LabeledType>,
}

fn price(common: &Common, config: &Path) -> Result<()> {
    let text = read_config(config)?;
    let cfg: PriceConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    let rows = price_table(&cfg.types, &cfg.pricing)?;
    let savings = labeling_savings(&cfg.types, &cfg.pricing)?;
    let mut run = Run::start("price", digest(text.as_bytes()), None, &common.out)?;
    let mut w = csv::Writer::from_writer(fs::File::create(run.path("prices.csv"))?);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    println!("labelling saves {savings} per hour");
    run.finish()?;
    Ok(())
}

fn synth_trace(common: &Common, config: Option<&Path>, deployments: usize, length: f64) -> Result<()> {
    let (model, cfg_digest) = match config {
        Some(path) => {
            let text = read_config(path)?;
            (PopulationModel::from_toml_str(&text)?, digest(text.as_bytes()))
        }
        None => {
            let model = PopulationModel::default();
            let text = model.to_toml_string()?;
            (model, digest(text.as_bytes()))
        }
    };
    let seed = common.seed.unwrap_or(0);
    let events = generate_trace(&model, deployments, length, seed);
    let mut run = Run::start("synth-trace", cfg_digest, Some(seed), &common.out)?;
    write_trace(&events, fs::File::create(run.path("trace.csv"))?)?;
    run.finish()?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Simulate { config, event_log } => simulate(common, &config, event_log),
        Command::Calibrate { config, policy, bounds, tolerance } => calibrate(common, &config, policy, bounds, tolerance),
        Command::Fit { trace, trace_length, p1, p2, method, p_grid } => fit(
            common,
            FitArgs { trace: &trace, trace_length, p1, p2, method, p_grid: p_grid.as_deref() },
        ),
        Command::SweepInfo { config, levels, policies } => sweep_info(common, &config, &levels, &policies),
        Command::Moments { config } => moments(common, &config),
        Command::Price { config } => price(common, &config),
        Command::SynthTrace { config, deployments, length } => synth_trace(common, config.as_deref(), deployments, length),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidParameter(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
