//! `kvflow`: run, compare and analyze scheduling experiments from JSON configs.
//!
//! Exit status is 0 on success, 1 when a run fails, and 2 for invalid
//! configuration or arguments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kvflow::engine::EventLog;
use kvflow::experiment::{
    aggregate_reports, compare, merge_for_compare, run_experiment, series_csv, stability_for_config,
    usage_series_csv, write_atomic, AggregateRow, ExperimentConfig,
};
use kvflow::metrics::MetricsReport;
use kvflow::oracle::{dominance_against, solve, OfflineInstance};
use kvflow::stability::budget_search;
use kvflow::trace::{ingest_trace, sample_lengths_summary, write_jsonl, TraceFormat};
use kvflow::{Error, Objective, PolicyConfig};

#[derive(Parser)]
#[command(name = "kvflow", version, about = "KV-cache constrained LLM scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seeds to run instead of the config's list. Repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Directory for output files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for parallel runs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Format of the summary printed to stdout.
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Run one policy on every seed.
    Run(Common),
    /// Run several policies on the same workload.
    Compare {
        /// Experiment configs; all must share the workload and capacity.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Evaluate the load conditions and overflow bound for a config.
    Stability(Common),
    /// Sweep a budget grid and report the best value.
    BudgetSearch(Common),
    /// Solve a small instance exactly.
    Oracle {
        /// Offline instance (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Also check that the optimum beats every online policy.
        #[arg(long)]
        check_policies: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Summarize a trace file and optionally write it as token-count JSONL.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "trace-format", default_value = "jsonl")]
        trace_format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type CliResult<T> = Result<T, Error>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 1 })
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Run(c) => with_jobs(c.jobs, || cmd_run(&c)),
        Command::Compare {
            configs,
            seeds,
            out,
            jobs,
            format,
        } => with_jobs(jobs, || cmd_compare(&configs, &seeds, out.as_deref(), format)),
        Command::Stability(c) => cmd_stability(&c),
        Command::BudgetSearch(c) => with_jobs(c.jobs, || cmd_budget_search(&c)),
        Command::Oracle {
            config,
            check_policies,
            out,
            jobs,
        } => with_jobs(jobs, || cmd_oracle(&config, check_policies, out.as_deref())),
        Command::Ingest {
            input,
            trace_format,
            out,
        } => cmd_ingest(&input, &trace_format, out.as_deref()),
    }
}

fn with_jobs(jobs: Option<usize>, f: impl FnOnce() -> CliResult<()> + Send) -> CliResult<()> {
    match jobs {
        Some(0) => Err(Error::Config("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(f),
        None => f(),
    }
}

fn load_config(path: &Path, seeds: &[u64]) -> CliResult<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if !seeds.is_empty() {
        config.seeds = seeds.to_vec();
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(out: Option<&Path>) -> CliResult<Option<&Path>> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    Ok(out)
}

fn json_bytes<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn csv_bytes<T: Serialize>(rows: &[T], header: bool) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

fn print<T: Serialize>(value: &T, rows_for_csv: Option<Vec<u8>>, format: Format) -> CliResult<()> {
    let bytes = match (format, rows_for_csv) {
        (Format::Csv, Some(csv)) => csv,
        _ => json_bytes(value)?,
    };
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

/// Appends one row to a sweep table, writing the header on first use.
fn append_sweep_row(path: &Path, row: &AggregateRow) -> CliResult<()> {
    let mut existing = match std::fs::read(path) {
        Ok(bytes) => bytes,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => {
            return Err(Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        }
    };
    existing.extend(csv_bytes(std::slice::from_ref(row), existing.is_empty())?);
    write_atomic(path, &existing)
}

fn cmd_run(c: &Common) -> CliResult<()> {
    let config = load_config(&c.config, &c.seeds)?;
    let runs = run_experiment(&config)?;
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.metrics.clone()).collect();
    let label = config.policy()?.label();
    let row = aggregate_reports(&label, &reports);

    if let Some(dir) = out_dir(c.out.as_deref())? {
        for run in &runs {
            if config.emit.metrics_json {
                write_atomic(dir.join(format!("metrics_seed{}.json", run.seed)), &json_bytes(&run.metrics)?)?;
            }
            if config.emit.series_csv {
                let mut buf = Vec::new();
                series_csv(&run.result, &mut buf)?;
                write_atomic(dir.join(format!("series_seed{}.csv", run.seed)), &buf)?;
            }
            if config.emit.event_log {
                let mut buf = Vec::new();
                run.result.events.clone().unwrap_or_else(EventLog::default).write_csv(&mut buf)?;
                write_atomic(dir.join(format!("events_seed{}.csv", run.seed)), &buf)?;
            }
        }
        if config.emit.metrics_csv {
            let mut buf = Vec::new();
            MetricsReport::write_csv(&reports, &mut buf)?;
            write_atomic(dir.join("metrics.csv"), &buf)?;
        }
        append_sweep_row(&dir.join("sweep.csv"), &row)?;
    }
    print(&row, Some(csv_bytes(std::slice::from_ref(&row), true)?), c.format)
}

fn cmd_compare(paths: &[PathBuf], seeds: &[u64], out: Option<&Path>, format: Format) -> CliResult<()> {
    let configs = paths
        .iter()
        .map(|p| load_config(p, seeds))
        .collect::<CliResult<Vec<_>>>()?;
    let merged = merge_for_compare(&configs)?;
    let comparison = compare(&merged)?;
    let mut table = Vec::new();
    comparison.write_csv(&mut table)?;
    if let Some(dir) = out_dir(out)? {
        write_atomic(dir.join("compare.csv"), &table)?;
        write_atomic(dir.join("compare.json"), &json_bytes(&comparison.rows)?)?;
        let mut series = Vec::new();
        usage_series_csv(&comparison.series, &mut series)?;
        write_atomic(dir.join("usage_series.csv"), &series)?;
    }
    print(&comparison.rows, Some(table), format)
}

fn cmd_stability(c: &Common) -> CliResult<()> {
    let config = ExperimentConfig::load(&c.config)?;
    let report = stability_for_config(&config)?;
    if let Some(dir) = out_dir(c.out.as_deref())? {
        write_atomic(dir.join("stability.json"), &json_bytes(&report)?)?;
    }
    print(&report, None, c.format)
}

fn cmd_budget_search(c: &Common) -> CliResult<()> {
    let config = load_config(&c.config, &c.seeds)?;
    let spec = config
        .search
        .as_ref()
        .ok_or_else(|| Error::Config("missing field `search`".into()))?;
    let result = budget_search(&config.workload, config.kv_capacity, spec, &config.seeds)?;
    let mut table = Vec::new();
    result.write_csv(&mut table)?;
    if let Some(dir) = out_dir(c.out.as_deref())? {
        write_atomic(dir.join("budget_search.csv"), &table)?;
        write_atomic(dir.join("budget_search.json"), &json_bytes(&result)?)?;
    }
    print(&result, Some(table), c.format)
}

fn all_policies(objective: Objective, class_count: usize) -> Vec<PolicyConfig> {
    let mut policies = vec![
        PolicyConfig::FlowUnknown { b: 1.0, cap: None },
        PolicyConfig::AlphaProtection { alpha: 0.1 },
        PolicyConfig::Mc { assume_max_output: None },
        PolicyConfig::McSf,
        PolicyConfig::Amin { o_min: None },
        PolicyConfig::Oracle { objective },
    ];
    if class_count > 0 {
        policies.insert(0, PolicyConfig::FlowKnown {
            budgets: vec![1; class_count],
        });
    }
    policies
}

fn cmd_oracle(path: &Path, check_policies: bool, out: Option<&Path>) -> CliResult<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let instance: OfflineInstance = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    instance.validate()?;
    let solution = solve(&instance)?;
    let mut doc = serde_json::json!({ "solution": solution });
    if check_policies {
        let classes = instance
            .requests
            .iter()
            .filter_map(|r| r.class_id)
            .max()
            .map_or(0, |k| k as usize + 1);
        let witnesses = all_policies(instance.objective, classes)
            .iter()
            .map(|p| dominance_against(&instance, &solution, p, 0))
            .collect::<CliResult<Vec<_>>>()?;
        doc["dominance"] = serde_json::to_value(&witnesses)?;
    }
    if let Some(dir) = out_dir(out)? {
        write_atomic(dir.join("oracle.json"), &json_bytes(&doc)?)?;
    }
    print(&doc, None, Format::Json)
}

fn cmd_ingest(input: &Path, format: &str, out: Option<&Path>) -> CliResult<()> {
    let format: TraceFormat = format.parse()?;
    let ingest = ingest_trace(input, format)?;
    for m in &ingest.malformed {
        eprintln!("warning: {}:{}: {}", input.display(), m.line, m.message);
    }
    let summary = sample_lengths_summary(&ingest.records)?;
    let doc = serde_json::json!({
        "records": ingest.records.len(),
        "dropped_zero_length": ingest.dropped_zero_length,
        "malformed": ingest.malformed.len(),
        "summary": summary,
    });
    if let Some(dir) = out_dir(out)? {
        let mut buf = Vec::new();
        write_jsonl(&ingest.records, &mut buf)?;
        write_atomic(dir.join("trace.jsonl"), &buf)?;
        write_atomic(dir.join("ingest.json"), &json_bytes(&doc)?)?;
    }
    print(&doc, None, Format::Json)
}
