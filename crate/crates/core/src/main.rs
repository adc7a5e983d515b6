use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use compound_sim::canned;
use compound_sim::engine::RNG_ALGORITHM;
use compound_sim::report::{self, compare_runs, summarize, write_reports, write_run_records, ReportHeader, Summary};
use compound_sim::scenario::{check_trace, Scenario, ScenarioError};
use compound_sim::simulation::{simulate, SimConfig, SimError, WorkloadSource};
use compound_sim::workload::{amplify_variance, load_trace};

#[derive(Parser)]
#[command(name = "compound-sim", version, about = "Discrete-event simulator for serverless compound AI pipelines")]
struct Cli {
    /// Master seed; replaces the config's `master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Simulated horizon in ms; replaces the config's `horizon_ms`.
    #[arg(long, global = true)]
    horizon: Option<u64>,
    /// Dotted config override, e.g. `policies.coordinated_prewarm=true`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run N consecutive seeds concurrently, one report directory each.
    #[arg(long, global = true, default_value_t = 1)]
    runs: u32,
    /// Write every dispatched event to `events.log`.
    #[arg(long, global = true)]
    event_log: bool,
    /// Write per-request node records to `runs.jsonl`.
    #[arg(long, global = true)]
    run_log: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file.
    Sim { config: PathBuf },
    /// Replace a scenario's workloads with a trace, optionally amplifying its variance.
    Replay {
        trace: PathBuf,
        config: PathBuf,
        /// Multiply the inter-arrival coefficient of variation by K.
        #[arg(long)]
        cov: Option<f64>,
    },
    /// Compare two `summary.json` reports.
    Compare { a: PathBuf, b: PathBuf },
    /// Run a built-in scenario and its checks.
    Scenario {
        /// Scenario name; `list` prints the catalog.
        name: String,
        /// Write the embedded config to DIR/<name>.yaml instead of running.
        #[arg(long, value_name = "DIR")]
        export: Option<PathBuf>,
    },
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: 2, error: error.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let code = match e {
            SimError::Invariant(_) => 3,
            SimError::Config(_) => 2,
            SimError::Io(_) => 1,
        };
        Failure { code, error: e.into() }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::config(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Sim { config } => cmd_simulate(&cli, config, None),
        Command::Replay { trace, config, cov } => cmd_simulate(&cli, config, Some((trace.as_path(), *cov))),
        Command::Compare { a, b } => cmd_compare(&cli, a, b),
        Command::Scenario { name, export } => cmd_scenario(&cli, name, export.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn overrides(cli: &Cli) -> Vec<String> {
    let mut all = cli.set.clone();
    if let Some(h) = cli.horizon {
        all.push(format!("horizon_ms={h}"));
    }
    all
}

fn cmd_simulate(cli: &Cli, config: &Path, replay: Option<(&Path, Option<f64>)>) -> Result<u8, Failure> {
    let mut provenance = overrides(cli);
    let scenario = Scenario::load(config, &provenance)?;
    let base_dir = config.parent().unwrap_or(Path::new("."));
    let mut cfg = scenario.build(base_dir)?;
    if let Some((trace_path, cov)) = replay {
        let mut records = load_trace(trace_path).map_err(Failure::config)?;
        let ids: BTreeSet<String> = cfg.pipelines.iter().map(|p| p.id.clone()).collect();
        check_trace(&records, &ids)?;
        provenance.push(format!("trace={}", trace_path.display()));
        if let Some(k) = cov {
            records = amplify_variance(&records, k).map_err(Failure::config)?;
            provenance.push(format!("cov={k}"));
        }
        cfg.workloads = vec![WorkloadSource::Trace(records)];
    }
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let first_seed = cli.seed.unwrap_or(cfg.seed);
    if cli.runs <= 1 {
        cfg.seed = first_seed;
        let summary = run_one(cli, &scenario, &cfg, &provenance, &out_dir)?;
        print_summary(&summary);
        println!("reports written to {}", out_dir.display());
        return Ok(0);
    }

    let seeds: Vec<u64> = (0..u64::from(cli.runs)).map(|i| first_seed.wrapping_add(i)).collect();
    let results: Vec<Result<Summary, Failure>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let mut cfg = cfg.clone();
                cfg.seed = seed;
                let dir = out_dir.join(format!("seed-{seed}"));
                let (scenario, provenance) = (&scenario, &provenance);
                s.spawn(move || run_one(cli, scenario, &cfg, provenance, &dir))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let mut summaries = Vec::with_capacity(results.len());
    for r in results {
        summaries.push(r?);
    }
    write_aggregate(&out_dir.join("aggregate.csv"), &summaries).context("writing aggregate.csv")?;
    for s in &summaries {
        println!("seed {}", s.header.seed);
        print_summary(s);
    }
    println!("reports written to {}", out_dir.display());
    Ok(0)
}

fn run_one(cli: &Cli, scenario: &Scenario, cfg: &SimConfig, provenance: &[String], dir: &Path) -> Result<Summary, Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let out = if cli.event_log {
        let path = dir.join("events.log");
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        let out = simulate(cfg, Some(&mut w), cli.run_log)?;
        w.flush().context("flushing events.log")?;
        out
    } else {
        simulate(cfg, None, cli.run_log)?
    };
    let header = ReportHeader {
        scenario: scenario.name.clone(),
        seed: cfg.seed,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        horizon_ms: cfg.horizon_ms,
        overrides: provenance.to_vec(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let summary = summarize(cfg, &out, &scenario.report, header);
    write_reports(dir, &summary, &out).context("writing reports")?;
    if cli.run_log {
        write_run_records(&dir.join("runs.jsonl"), &out).context("writing runs.jsonl")?;
    }
    Ok(summary)
}

fn write_aggregate(path: &Path, summaries: &[Summary]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "pipeline", "requests", "p50_ms", "p95_ms", "p99_ms", "availability", "drop_rate", "throughput_rpm", "cost"])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for s in summaries {
        for p in &s.pipelines {
            w.write_record([
                s.header.seed.to_string(),
                p.id.clone(),
                p.requests.to_string(),
                opt(p.p50_ms.map(|v| v.to_string())),
                opt(p.p95_ms.map(|v| v.to_string())),
                opt(p.p99_ms.map(|v| v.to_string())),
                opt(p.availability.map(|v| v.to_string())),
                opt(p.drop_rate.map(|v| v.to_string())),
                p.throughput_rpm.to_string(),
                p.cost.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn print_summary(s: &Summary) {
    let ms = |v: Option<u64>| v.map_or("-".to_string(), |x| format!("{x}"));
    println!("{:<20} {:>9} {:>9} {:>9} {:>9} {:>8} {:>10} {:>10}", "pipeline", "requests", "p50 ms", "p95 ms", "p99 ms", "avail", "RPM", "cost");
    for p in &s.pipelines {
        println!(
            "{:<20} {:>9} {:>9} {:>9} {:>9} {:>8} {:>10.1} {:>10.2}",
            p.id,
            p.requests,
            ms(p.p50_ms),
            ms(p.p95_ms),
            ms(p.p99_ms),
            p.availability.map_or("-".to_string(), |a| format!("{a:.4}")),
            p.throughput_rpm,
            p.cost
        );
    }
    println!("total cost {:.2}", s.cost.total);
}

fn cmd_compare(cli: &Cli, a: &Path, b: &Path) -> Result<u8, Failure> {
    let load = |p: &Path| report::load_summary(p).with_context(|| format!("reading {}", p.display())).map_err(Failure::config);
    let (sa, sb) = (load(a)?, load(b)?);
    let cmp = compare_runs(&sa, &sb).map_err(Failure::config)?;
    print!("{}", cmp.to_table());
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    cmp.write_csv(&out_dir.join("comparison.csv")).context("writing comparison.csv")?;
    Ok(0)
}

fn cmd_scenario(cli: &Cli, name: &str, export: Option<&Path>) -> Result<u8, Failure> {
    if name == "list" {
        for c in canned::CATALOG {
            println!("{}", c.name);
        }
        return Ok(0);
    }
    let entry = canned::find(name).map_err(Failure::config)?;
    if let Some(dir) = export {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("{name}.yaml"));
        fs::write(&path, entry.yaml).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
        return Ok(0);
    }
    let outcome = canned::run(name, cli.seed, &overrides(cli)).map_err(|e| match e {
        canned::CannedError::Sim(s) => Failure::from(s),
        other => Failure::config(other),
    })?;
    for c in &outcome.checks {
        println!("{c}");
    }
    for n in &outcome.notes {
        println!("note: {n}");
    }
    if let Some(dir) = &cli.out {
        for r in &outcome.runs {
            let d = dir.join(&r.label);
            write_reports(&d, &r.summary, &r.out).with_context(|| format!("writing {}", d.display()))?;
        }
    }
    println!("{} {name}", if outcome.passed() { "PASS" } else { "FAIL" });
    Ok(if outcome.passed() { 0 } else { 1 })
}
