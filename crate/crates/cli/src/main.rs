//! `tierroute` command-line driver.
//!
//! Data sets are a pure function of the configuration and seed, so every
//! subcommand regenerates them in memory. Trained artifacts are chained
//! through the output directory: `train-router` writes the router checkpoint,
//! `calibrate` needs it and writes the threshold table, and the evaluation
//! subcommands need both.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use tierroute::calibration::{CalibrationConfig, ThresholdTable};
use tierroute::cascade::{write_traces_csv, ExperimentMetrics, Policy};
use tierroute::config::{RunConfig, SweepParameter};
use tierroute::coopt::{coopt_loop, write_history_csv, DistillMode};
use tierroute::experiment::{
    build_world, evaluate_policy, fit_router, fit_thresholds, generate_datasets, run_sweep, write_sweep_csv, Datasets, Pipeline,
};
use tierroute::latency::{latency_sweep, write_latency_csv};
use tierroute::portfolio::World;
use tierroute::router::RouterModel;
use tierroute::workload::write_workload_csv;
use tierroute::Error;

const ROUTER_FILE: &str = "router.ckpt";
const THRESHOLD_FILE: &str = "thresholds.csv";
const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "tierroute", version, about = "Tiered model routing experiments on synthetic workloads")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Treat unstable queues as errors.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the training, calibration and evaluation workloads.
    Generate,
    /// Label the training set and fit the router.
    TrainRouter,
    /// Fit escalation thresholds for the trained router.
    Calibrate,
    /// Evaluate policies on the evaluation set.
    Simulate {
        /// Policy to run; all policies when omitted.
        #[arg(long)]
        policy: Option<Policy>,
    },
    /// Run the failure-driven co-optimization loop.
    Coopt {
        /// Use randomly placed patches instead of failure clusters.
        #[arg(long)]
        random: bool,
    },
    /// Queueing simulation over the configured arrival rates.
    Latency {
        /// Policy to run; the configured list when omitted.
        #[arg(long)]
        policy: Option<Policy>,
    },
    /// Parameter sweeps.
    Sweep {
        /// Parameter to sweep; all parameters when omitted.
        #[arg(long)]
        param: Option<SweepParameter>,
    },
    /// Summarize evaluated policies.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::TrainRouter => "train-router",
            Command::Calibrate => "calibrate",
            Command::Simulate { .. } => "simulate",
            Command::Coopt { .. } => "coopt",
            Command::Latency { .. } => "latency",
            Command::Sweep { .. } => "sweep",
            Command::Report => "report",
        }
    }
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Missing(String),
    Unstable(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Missing(_) => 3,
            Failure::Unstable(_) => 4,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            Error::Missing(_) => Failure::Missing(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

struct Context {
    config: RunConfig,
    config_hash: String,
    seed: u64,
    out: PathBuf,
    strict: bool,
    artifacts: Vec<String>,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&mut self, name: &str) -> Outcome<BufWriter<File>> {
        self.artifacts.push(name.to_string());
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn world(&self) -> Outcome<World> {
        Ok(build_world(&self.config)?)
    }

    fn datasets(&self) -> Outcome<Datasets> {
        Ok(generate_datasets(&self.config, self.seed)?)
    }

    fn router(&self) -> Outcome<RouterModel> {
        let path = self.path(ROUTER_FILE);
        let file = File::open(&path)
            .map_err(|_| Failure::Missing(format!("{} not found; run `tierroute train-router` first", path.display())))?;
        Ok(RouterModel::read_checkpoint(BufReader::new(file))?)
    }

    fn thresholds(&self, world: &World) -> Outcome<ThresholdTable> {
        let path = self.path(THRESHOLD_FILE);
        let file = File::open(&path)
            .map_err(|_| Failure::Missing(format!("{} not found; run `tierroute calibrate` first", path.display())))?;
        let CalibrationConfig { alpha, rule, .. } = self.config.calibration;
        Ok(ThresholdTable::read_csv(file, world.num_tiers(), world.num_tasks(), alpha, rule)?)
    }

    fn pipeline(&self) -> Outcome<Pipeline> {
        let world = self.world()?;
        let router = self.router()?;
        let thresholds = self.thresholds(&world)?;
        Ok(Pipeline {
            seed: self.seed,
            data: self.datasets()?,
            world,
            router,
            training: Default::default(),
            thresholds,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_file(path: &Path) -> Outcome<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn metrics_file(policy: Policy) -> String {
    format!("metrics_{}.json", policy.name())
}

fn write_metrics(ctx: &mut Context, m: &ExperimentMetrics) -> Outcome<()> {
    let mut fields: BTreeMap<&str, serde_json::Value> = BTreeMap::new();
    fields.insert("policy", m.policy.name().into());
    fields.insert("queries", m.queries.into());
    for (k, v) in [
        ("quality_ratio", m.quality_ratio),
        ("cost_ratio", m.cost_ratio),
        ("mean_quality", m.mean_quality),
        ("pass_rate", m.pass_rate),
        ("total_cost", m.total_cost),
        ("reference_total_cost", m.reference_total_cost),
        ("sla_violation_rate", m.sla_violation_rate),
        ("coverage_violation_rate", m.coverage_violation_rate),
        ("p50_latency_ms", m.p50_latency_ms),
        ("p99_latency_ms", m.p99_latency_ms),
    ] {
        fields.insert(k, f6(v).into());
    }
    fields.insert("tier_shares", m.tier_shares.iter().map(|&x| f6(x)).collect::<Vec<_>>().into());
    fields.insert("escalation_rate", m.escalation_rate.iter().map(|&x| f6(x)).collect::<Vec<_>>().into());
    let mut w = ctx.create(&metrics_file(m.policy))?;
    serde_json::to_writer_pretty(&mut w, &fields).map_err(Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn generate(ctx: &mut Context) -> Outcome<()> {
    let data = ctx.datasets()?;
    for (name, set) in [("workload_train.csv", &data.train), ("workload_calib.csv", &data.calib), ("workload_eval.csv", &data.eval)] {
        let mut w = ctx.create(name)?;
        write_workload_csv(set, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn train_router(ctx: &mut Context) -> Outcome<()> {
    let world = ctx.world()?;
    let data = ctx.datasets()?;
    let (router, report) = fit_router(&world, &data.train, &ctx.config.router, ctx.seed)?;
    let mut w = ctx.create(ROUTER_FILE)?;
    router.write_checkpoint(&mut w)?;
    w.flush()?;
    let mut w = ctx.create("training_report.json")?;
    let summary: BTreeMap<&str, String> = BTreeMap::from([
        ("epochs_run", report.epochs_run.to_string()),
        ("best_epoch", report.best_epoch.to_string()),
        ("best_validation_loss", f6(report.best_validation_loss)),
        ("train_accuracy", f6(report.train_accuracy)),
    ]);
    serde_json::to_writer_pretty(&mut w, &summary).map_err(Error::from)?;
    writeln!(w)?;
    w.flush()?;
    println!("router trained: {} epochs, accuracy {:.4}", report.epochs_run, report.train_accuracy);
    Ok(())
}

fn calibrate(ctx: &mut Context) -> Outcome<()> {
    let world = ctx.world()?;
    let router = ctx.router()?;
    let data = ctx.datasets()?;
    let table = fit_thresholds(&world, &router, &data.calib, &ctx.config.calibration, ctx.seed)?;
    let mut w = ctx.create(THRESHOLD_FILE)?;
    table.write_csv(&mut w)?;
    w.flush()?;
    let degenerate = table.cells().filter(|(_, _, c)| c.degenerate).count();
    println!("calibrated {} cells ({degenerate} degenerate)", table.cells().count());
    Ok(())
}

fn simulate(ctx: &mut Context, only: Option<Policy>) -> Outcome<()> {
    let policies: Vec<Policy> = only.map_or(Policy::ALL.to_vec(), |p| vec![p]);
    let world = ctx.world()?;
    let needs_router = policies.iter().any(|p| p.needs_router());
    let (router, thresholds) = if needs_router {
        let r = ctx.router()?;
        let t = ctx.thresholds(&world)?;
        (Some(r), Some(t))
    } else {
        (None, None)
    };
    let data = ctx.datasets()?;
    for policy in policies {
        let run = evaluate_policy(policy, &world, &data.eval, router.as_ref(), thresholds.as_ref(), ctx.seed)?;
        let mut w = ctx.create(&format!("traces_{}.csv", policy.name()))?;
        write_traces_csv(&run.traces, &mut w)?;
        w.flush()?;
        write_metrics(ctx, &run.metrics)?;
        println!(
            "{:<11} quality_ratio {:.6} cost_ratio {:.6} p99 {:.1} ms",
            policy.name(),
            run.metrics.quality_ratio,
            run.metrics.cost_ratio,
            run.metrics.p99_latency_ms
        );
    }
    Ok(())
}

fn coopt(ctx: &mut Context, random: bool) -> Outcome<()> {
    let base = ctx.pipeline()?;
    let mode = if random { DistillMode::Random } else { DistillMode::Targeted };
    let outcome = coopt_loop(&ctx.config, &base, mode)?;
    let name = if random { "coopt_history_random.csv" } else { "coopt_history.csv" };
    let mut w = ctx.create(name)?;
    write_history_csv(&outcome.history, &mut w)?;
    w.flush()?;
    let s = &outcome.state;
    println!(
        "{} after {} iterations; cost ratio {:.6} -> {:.6}",
        if s.converged { "converged" } else { "stopped at the iteration cap" },
        s.iteration,
        s.cost_ratio_history[0],
        s.cost_ratio_history[s.iteration]
    );
    Ok(())
}

fn latency(ctx: &mut Context, only: Option<Policy>) -> Outcome<()> {
    let lc = ctx.config.latency.clone();
    let policies = only.map_or(lc.policies.clone(), |p| vec![p]);
    let world = ctx.world()?;
    let (router, thresholds) = if policies.iter().any(|p| p.needs_router()) {
        let r = ctx.router()?;
        let t = ctx.thresholds(&world)?;
        (Some(r), Some(t))
    } else {
        (None, None)
    };
    let data = ctx.datasets()?;
    let rows = latency_sweep(
        &world,
        &data.eval,
        router.as_ref(),
        thresholds.as_ref(),
        &lc.arrival_rates_per_min,
        &policies,
        lc.duration_s,
        lc.warmup_s,
        ctx.seed,
    )?;
    let mut w = ctx.create("latency_sweep.csv")?;
    write_latency_csv(&rows, &mut w)?;
    w.flush()?;
    let unstable: Vec<String> = rows
        .iter()
        .filter(|r| r.stats.unstable)
        .map(|r| format!("{} at {}/min", r.policy, r.arrival_rate_per_min))
        .collect();
    if !unstable.is_empty() {
        let msg = format!("unstable queues: {}", unstable.join(", "));
        if ctx.strict {
            return Err(Failure::Unstable(msg));
        }
        eprintln!("warning: {msg}");
    }
    Ok(())
}

fn sweep(ctx: &mut Context, only: Option<SweepParameter>) -> Outcome<()> {
    let base = ctx.pipeline()?;
    let params = only.map_or(SweepParameter::ALL.to_vec(), |p| vec![p]);
    for p in params {
        let rows = run_sweep(&ctx.config, &base, &ctx.config.sweep.spec(p))?;
        let mut w = ctx.create(&format!("sweep_{}.csv", p.name()))?;
        write_sweep_csv(&rows, &mut w)?;
        w.flush()?;
        println!("sweep {} done ({} points)", p.name(), rows.len());
    }
    Ok(())
}

fn report(ctx: &mut Context) -> Outcome<()> {
    let mut rows = Vec::new();
    for policy in Policy::ALL {
        let path = ctx.path(&metrics_file(policy));
        if let Ok(text) = fs::read_to_string(&path) {
            let v: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
            let field = |k: &str| v[k].as_str().unwrap_or("").to_string();
            rows.push([
                policy.name().to_string(),
                field("quality_ratio"),
                field("cost_ratio"),
                field("p99_latency_ms"),
                field("sla_violation_rate"),
            ]);
        }
    }
    if rows.is_empty() {
        return Err(Failure::Missing(format!(
            "no metrics files in {}; run `tierroute simulate` first",
            ctx.out.display()
        )));
    }
    let header = ["Policy", "Quality Ratio", "Cost Ratio", "p99 (ms)", "SLA Viol."];
    let mut md = String::new();
    md.push_str(&format!("| {} |\n", header.join(" | ")));
    md.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in &rows {
        md.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    let mut w = ctx.create("report.md")?;
    w.write_all(md.as_bytes())?;
    w.flush()?;
    let mut w = ctx.create("report.csv")?;
    writeln!(w, "policy,quality_ratio,cost_ratio,p99_ms,sla_violation_rate")?;
    for r in &rows {
        writeln!(w, "{}", r.join(","))?;
    }
    w.flush()?;
    print!("{md}");
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    tool_version: &'a str,
    config_sha256: &'a str,
    seed: u64,
    started_unix_s: u64,
    wall_time_s: f64,
    artifacts: BTreeMap<String, String>,
}

fn run(cli: Cli) -> Outcome<()> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let (config, text) = match &cli.common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            (RunConfig::from_toml(&text)?, text)
        }
        None => (RunConfig::default(), String::new()),
    };
    if cli.common.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.common.jobs)
            .build_global()
            .map_err(|e| Failure::Other(e.to_string()))?;
    }
    let out = cli.common.out.clone().unwrap_or_else(|| config.output_dir.clone());
    fs::create_dir_all(&out)?;
    let mut ctx = Context {
        config_hash: hex(&Sha256::digest(text.as_bytes())),
        seed: cli.common.seed.unwrap_or(config.seed),
        config,
        out,
        strict: cli.common.strict,
        artifacts: Vec::new(),
    };
    let result = match cli.command {
        Command::Generate => generate(&mut ctx),
        Command::TrainRouter => train_router(&mut ctx),
        Command::Calibrate => calibrate(&mut ctx),
        Command::Simulate { policy } => simulate(&mut ctx, policy),
        Command::Coopt { random } => coopt(&mut ctx, random),
        Command::Latency { policy } => latency(&mut ctx, policy),
        Command::Sweep { param } => sweep(&mut ctx, param),
        Command::Report => report(&mut ctx),
    };
    let failed_strict = matches!(result, Err(Failure::Unstable(_)));
    if result.is_ok() || failed_strict {
        let mut artifacts = BTreeMap::new();
        for name in &ctx.artifacts {
            artifacts.insert(name.clone(), sha256_file(&ctx.path(name))?);
        }
        let manifest = Manifest {
            subcommand: cli.command.name(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config_sha256: &ctx.config_hash,
            seed: ctx.seed,
            started_unix_s: started,
            wall_time_s: clock.elapsed().as_secs_f64(),
            artifacts,
        };
        let mut w = BufWriter::new(File::create(ctx.path(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(&mut w, &manifest).map_err(Error::from)?;
        writeln!(w)?;
        w.flush()?;
    }
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Config(m) | Failure::Missing(m) | Failure::Unstable(m) | Failure::Other(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
