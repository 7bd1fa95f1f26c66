//! Experiment configs and the runs behind the command-line tool.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{build_policy, policy_context, run_stream, EngineOptions, RunResult, SlotCostModel};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, compute_metrics, MetricsReport};
use crate::policy::PolicyConfig;
use crate::stability::{
    budgeted_load, check_necessary_known, check_necessary_unknown, check_sufficient_known, epsilon_slack,
    overflow_bound, BudgetSearchSpec, ClassLoad, LengthDistribution, StabilityReport,
};
use crate::trace::ingest_trace;
use crate::types::{Rate, Tokens};
use crate::workload::{generate_arrivals, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitFlags {
    pub metrics_json: bool,
    pub metrics_csv: bool,
    pub series_csv: bool,
    pub event_log: bool,
}

impl Default for EmitFlags {
    fn default() -> Self {
        Self {
            metrics_json: true,
            metrics_csv: true,
            series_csv: false,
            event_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub workload: WorkloadSpec,
    /// Policy for `run` and `stability`.
    #[serde(default)]
    pub policy: Option<PolicyConfig>,
    /// Policies for `compare`.
    #[serde(default)]
    pub policies: Vec<PolicyConfig>,
    pub kv_capacity: Tokens,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub emit: EmitFlags,
    #[serde(default)]
    pub slot_cost: SlotCostModel,
    #[serde(default)]
    pub search: Option<BudgetSearchSpec>,
    /// Length cap used for the overflow bound; defaults to the longest length.
    #[serde(default)]
    pub length_cap: Option<Tokens>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file. Relative trace paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json(&text)?;
        if let WorkloadSpec::Trace { path: trace, .. } = &mut config.workload {
            if trace.is_relative() {
                if let Some(dir) = path.parent() {
                    *trace = dir.join(&*trace);
                }
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        if self.kv_capacity == 0 {
            return Err(Error::Config("`kv_capacity` must be positive".into()));
        }
        self.workload.validate()?;
        self.slot_cost.validate()?;
        Ok(())
    }

    /// The single policy of a `run`.
    pub fn policy(&self) -> Result<&PolicyConfig> {
        self.policy
            .as_ref()
            .ok_or_else(|| Error::Config("missing field `policy`".into()))
    }

    /// Policies of a `compare`: `policies`, or the single `policy`.
    pub fn compared_policies(&self) -> Result<Vec<PolicyConfig>> {
        if !self.policies.is_empty() {
            Ok(self.policies.clone())
        } else {
            Ok(vec![self.policy()?.clone()])
        }
    }

    fn engine_options(&self) -> EngineOptions {
        EngineOptions {
            record_events: self.emit.event_log,
            slot_cost: self.slot_cost,
            class_count: 0,
        }
    }
}

/// One run per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub result: RunResult,
    pub metrics: MetricsReport,
}

/// Runs one policy on one seed.
pub fn run_seed(config: &ExperimentConfig, policy: &PolicyConfig, seed: u64, options: EngineOptions) -> Result<SeedRun> {
    let stream = generate_arrivals(&config.workload, seed)?;
    let ctx = policy_context(&config.workload, &stream)?;
    policy.validate(&ctx)?;
    let built = build_policy(policy, &ctx, &stream, config.kv_capacity)?;
    let options = EngineOptions {
        class_count: ctx.class_count,
        ..options
    };
    let mut result = run_stream(&stream, built, config.kv_capacity, seed, options)?;
    result.policy = policy.label();
    let metrics = compute_metrics(&result);
    Ok(SeedRun { seed, result, metrics })
}

/// Runs the config's policy on every seed, in parallel.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    config.validate()?;
    let policy = config.policy()?.clone();
    let options = config.engine_options();
    config
        .seeds
        .par_iter()
        .map(|&seed| run_seed(config, &policy, seed, options))
        .collect()
}

/// Mean and standard deviation of the headline metrics across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub policy: String,
    pub seeds: usize,
    pub avg_latency_mean: Option<f64>,
    pub avg_latency_std: Option<f64>,
    pub p95_latency_mean: Option<f64>,
    pub p95_latency_std: Option<f64>,
    pub request_throughput_mean: f64,
    pub request_throughput_std: f64,
    pub token_throughput_mean: f64,
    pub token_throughput_std: f64,
    pub wasted_tokens_mean: f64,
    pub overflow_events_mean: f64,
    pub eviction_events_mean: f64,
    pub kv_utilization_mean: f64,
    pub queue_growth_slope_mean: f64,
}

fn opt_stats(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>) {
    match values.collect::<Option<Vec<f64>>>() {
        Some(v) => {
            let a = aggregate(&v);
            (Some(a.mean), Some(a.std))
        }
        None => (None, None),
    }
}

pub fn aggregate_reports(policy: &str, reports: &[MetricsReport]) -> AggregateRow {
    let col = |f: fn(&MetricsReport) -> f64| aggregate(&reports.iter().map(f).collect::<Vec<_>>());
    let (lat_m, lat_s) = opt_stats(reports.iter().map(|r| r.avg_latency));
    let (p95_m, p95_s) = opt_stats(reports.iter().map(|r| r.p95_latency.map(|v| v as f64)));
    let req = col(|r| r.request_throughput);
    let tok = col(|r| r.token_throughput);
    AggregateRow {
        policy: policy.to_string(),
        seeds: reports.len(),
        avg_latency_mean: lat_m,
        avg_latency_std: lat_s,
        p95_latency_mean: p95_m,
        p95_latency_std: p95_s,
        request_throughput_mean: req.mean,
        request_throughput_std: req.std,
        token_throughput_mean: tok.mean,
        token_throughput_std: tok.std,
        wasted_tokens_mean: col(|r| r.wasted_tokens as f64).mean,
        overflow_events_mean: col(|r| r.overflow_events as f64).mean,
        eviction_events_mean: col(|r| r.eviction_events as f64).mean,
        kv_utilization_mean: col(|r| r.kv_utilization_mean).mean,
        queue_growth_slope_mean: col(|r| r.queue_growth_slope).mean,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Inapplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub policy: String,
    pub status: RowStatus,
    pub note: String,
    pub seeds: usize,
    pub avg_latency: Option<f64>,
    pub p95_latency: Option<f64>,
    pub request_throughput: Option<f64>,
    pub token_throughput: Option<f64>,
    pub overflow_events: Option<f64>,
    pub evictions: Option<f64>,
    pub wasted_tokens: Option<f64>,
    /// Largest `U_t` over every seed.
    pub max_usage: Option<Tokens>,
    pub kv_capacity: Tokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageSeries {
    pub policy: String,
    pub seed: u64,
    pub usage: Vec<Tokens>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    /// Usage series of the first seed, one per applicable policy.
    pub series: Vec<UsageSeries>,
}

impl Comparison {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<comparison>", e))?;
        Ok(())
    }

    pub fn read_csv(input: impl std::io::Read) -> Result<Vec<CompareRow>> {
        let mut r = csv::Reader::from_reader(input);
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
}

/// Runs every policy of the config on every seed.
pub fn compare(config: &ExperimentConfig) -> Result<Comparison> {
    config.validate()?;
    let policies = config.compared_policies()?;
    let options = EngineOptions {
        record_events: false,
        ..config.engine_options()
    };
    // Applicability depends only on the workload.
    let probe_ctx = crate::policy::PolicyContext {
        class_count: config.workload.classes()?.len(),
        output_known: config.workload.output_known(),
        min_output: None,
    };
    let outcomes: Vec<(CompareRow, Option<UsageSeries>)> = policies
        .par_iter()
        .map(|policy| {
            let label = policy.label();
            let inapplicable = |note: String| CompareRow {
                policy: label.clone(),
                status: RowStatus::Inapplicable,
                note,
                seeds: 0,
                avg_latency: None,
                p95_latency: None,
                request_throughput: None,
                token_throughput: None,
                overflow_events: None,
                evictions: None,
                wasted_tokens: None,
                max_usage: None,
                kv_capacity: config.kv_capacity,
            };
            if let Some(reason) = policy.inapplicable_reason(&probe_ctx) {
                return Ok((inapplicable(reason), None));
            }
            let runs: Result<Vec<SeedRun>> = config
                .seeds
                .iter()
                .map(|&seed| run_seed(config, policy, seed, options))
                .collect();
            let runs = match runs {
                Err(Error::OracleLimits(msg)) => return Ok((inapplicable(msg), None)),
                other => other?,
            };
            let reports: Vec<MetricsReport> = runs.iter().map(|r| r.metrics.clone()).collect();
            let agg = aggregate_reports(&label, &reports);
            let row = CompareRow {
                policy: label.clone(),
                status: RowStatus::Ok,
                note: String::new(),
                seeds: reports.len(),
                avg_latency: agg.avg_latency_mean,
                p95_latency: agg.p95_latency_mean,
                request_throughput: Some(agg.request_throughput_mean),
                token_throughput: Some(agg.token_throughput_mean),
                overflow_events: Some(agg.overflow_events_mean),
                evictions: Some(agg.eviction_events_mean),
                wasted_tokens: Some(agg.wasted_tokens_mean),
                max_usage: runs.iter().map(|r| r.result.max_usage()).max(),
                kv_capacity: config.kv_capacity,
            };
            let series = UsageSeries {
                policy: label,
                seed: runs[0].seed,
                usage: runs[0].result.series.usage.clone(),
            };
            Ok((row, Some(series)))
        })
        .collect::<Result<_>>()?;
    let (rows, series): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    Ok(Comparison {
        rows,
        series: series.into_iter().flatten().collect(),
    })
}

/// Merges configs that share a workload and capacity into one comparison.
pub fn merge_for_compare(configs: &[ExperimentConfig]) -> Result<ExperimentConfig> {
    let first = configs.first().ok_or(Error::Empty("config list"))?;
    let mut merged = first.clone();
    merged.policies = first.compared_policies()?;
    for c in &configs[1..] {
        if c.workload != first.workload || c.kv_capacity != first.kv_capacity {
            return Err(Error::Config("compared configs must share the workload and kv_capacity".into()));
        }
        merged.policies.extend(c.compared_policies()?);
    }
    Ok(merged)
}

fn class_loads(spec: &WorkloadSpec) -> Result<Vec<ClassLoad>> {
    match spec {
        WorkloadSpec::Synthetic { classes, .. } => Ok(classes
            .iter()
            .map(|c| ClassLoad::new(c.prompt_len, c.decode_len, c.rate))
            .collect()),
        WorkloadSpec::Trace { .. } => Ok(Vec::new()),
    }
}

/// Load conditions for a config, plus the policy-specific guarantees when
/// the config names a flow-control policy.
pub fn stability_for_config(config: &ExperimentConfig) -> Result<StabilityReport> {
    config.workload.validate()?;
    let m = config.kv_capacity;
    let (mut report, dist) = match &config.workload {
        WorkloadSpec::Synthetic { output_known, .. } => {
            let loads = class_loads(&config.workload)?;
            let dist = LengthDistribution::from_classes(&loads);
            let total = loads.iter().fold(num_rational::Ratio::<u64>::from_integer(0), |acc, c| acc + c.rate.ratio());
            let total = Rate::new(*total.numer(), *total.denom())?;
            let check = if *output_known {
                check_necessary_known(&loads, m)?
            } else {
                check_necessary_unknown(&dist, total, m)?
            };
            (StabilityReport::from_necessary(check), dist)
        }
        WorkloadSpec::Trace { path, format, rate, .. } => {
            let ingest = ingest_trace(path, *format)?;
            let dist = LengthDistribution::from_records(&ingest.records);
            let mut report = StabilityReport::from_necessary(check_necessary_unknown(&dist, *rate, m)?);
            report.notes.push(format!(
                "empirical distribution over {} trace records",
                ingest.records.len()
            ));
            (report, dist)
        }
    };
    match &config.policy {
        Some(PolicyConfig::FlowKnown { budgets }) => {
            let classes = config.workload.classes()?;
            let rates: Vec<Rate> = class_loads(&config.workload)?.iter().map(|c| c.rate).collect();
            if rates.is_empty() {
                report.notes.push("per-class budgets need a synthetic workload".into());
            } else {
                let s = check_sufficient_known(&classes, budgets, &rates, m)?;
                report.sufficient_holds = s.sufficient_holds;
                report.notes.push(format!("peak usage under these budgets is at most {}", budgeted_load(&classes, budgets)?));
                report.sufficient = Some(s);
            }
        }
        Some(PolicyConfig::FlowUnknown { b, cap }) => {
            let b_rate = Rate::from_f64(*b)?;
            let a = cap.unwrap_or(b.ceil() as u32).max(1);
            report.epsilon_slack = epsilon_slack(b_rate, &dist, m)?;
            let c = match config.length_cap {
                Some(c) => c,
                None => dist.max_len()?,
            };
            match overflow_bound(b_rate, a, c.max(1), m, config.workload.horizon(), &dist) {
                Ok(bound) => report.overflow_bound = Some(bound),
                Err(e) => report.notes.push(format!("overflow bound unavailable: {e}")),
            }
            if let Ok(w_max) = dist_max_workload(&dist) {
                if (a as u128) * (w_max as u128) <= m as u128 {
                    report
                        .notes
                        .push(format!("A * w_max = {} <= M: overflow is impossible", a as u128 * w_max as u128));
                }
            }
        }
        _ => {}
    }
    Ok(report)
}

fn dist_max_workload(dist: &LengthDistribution) -> Result<Tokens> {
    let pairs: Vec<(Tokens, Tokens)> = match dist {
        LengthDistribution::Empirical { samples } => samples.clone(),
        LengthDistribution::Weighted { atoms } => atoms.iter().map(|&(l, o, _)| (l, o)).collect(),
        LengthDistribution::Parametric { .. } => return Err(Error::Empty("parametric support")),
    };
    let mut best = 0;
    for (l, o) in pairs {
        best = best.max(crate::types::workload_tokens(l, o)?);
    }
    Ok(best)
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp: PathBuf = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Per-slot series as CSV, one row per slot.
pub fn series_csv(result: &RunResult, out: impl Write) -> Result<()> {
    let s = &result.series;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["slot", "usage", "waiting", "active", "unfinished", "budget"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend((0..s.class_waiting.len()).map(|k| format!("waiting_class_{k}")));
    w.write_record(&header)?;
    for i in 0..s.usage.len() {
        let mut row = vec![
            (i + 1).to_string(),
            s.usage[i].to_string(),
            s.waiting[i].to_string(),
            s.active[i].to_string(),
            s.unfinished[i].to_string(),
            s.budget[i].map(|b| b.to_string()).unwrap_or_default(),
        ];
        row.extend(s.class_waiting.iter().map(|c| c[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<series>", e))?;
    Ok(())
}

/// Usage series of several policies side by side: `slot,<policy>...`.
pub fn usage_series_csv(series: &[UsageSeries], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["slot".to_string()];
    header.extend(series.iter().map(|s| s.policy.clone()));
    w.write_record(&header)?;
    let len = series.iter().map(|s| s.usage.len()).max().unwrap_or(0);
    for i in 0..len {
        let mut row = vec![(i + 1).to_string()];
        row.extend(series.iter().map(|s| s.usage.get(i).map(|u| u.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<series>", e))?;
    Ok(())
}
