//! Run metrics.
//!
//! Latency of a completed request is `completion_slot - arrival_slot + 1`, so
//! a request that arrives and finishes in the same slot has latency 1.
//! Requests still unfinished at the horizon are left out of the latency
//! statistics. Token throughput counts only tokens kept by completed
//! requests; tokens thrown away by eviction are reported as waste.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::engine::{EventKind, EventLog, RunResult};
use crate::error::{Error, Result};
use crate::trace::nearest_rank;
use crate::types::{Phase, RequestId, Slot, Tokens};

/// Scalar objectives for ranking schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    AvgLatency,
    P95Latency,
    RequestThroughput,
    TokenThroughput,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::AvgLatency,
        Objective::P95Latency,
        Objective::RequestThroughput,
        Objective::TokenThroughput,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::AvgLatency => "avg_latency",
            Objective::P95Latency => "p95_latency",
            Objective::RequestThroughput => "request_throughput",
            Objective::TokenThroughput => "token_throughput",
        }
    }

    pub fn maximize(&self) -> bool {
        matches!(self, Objective::RequestThroughput | Objective::TokenThroughput)
    }

    /// Reads the objective off a report. Missing latencies count as infinitely bad.
    pub fn value(&self, report: &MetricsReport) -> f64 {
        match self {
            Objective::AvgLatency => report.avg_latency.unwrap_or(f64::INFINITY),
            Objective::P95Latency => report.p95_latency.map_or(f64::INFINITY, |v| v as f64),
            Objective::RequestThroughput => report.request_throughput,
            Objective::TokenThroughput => report.token_throughput,
        }
    }

    /// True if `a` is at least as good as `b`.
    pub fn at_least_as_good(&self, a: f64, b: f64) -> bool {
        if self.maximize() {
            a >= b
        } else {
            a <= b
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.as_str() == s || o.as_str().replace('_', "-") == s)
            .ok_or_else(|| Error::Config(format!("unknown objective `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub seed: u64,
    pub horizon: Slot,
    pub kv_capacity: Tokens,
    pub arrivals: u64,
    pub completed: u64,
    pub unfinished: u64,
    pub avg_latency: Option<f64>,
    pub p95_latency: Option<u64>,
    pub min_latency: Option<u64>,
    pub max_latency: Option<u64>,
    /// Completions per slot.
    pub request_throughput: f64,
    /// Tokens kept by completed requests, per slot.
    pub token_throughput: f64,
    /// Every decoded token per slot, including ones later evicted.
    pub gross_token_throughput: f64,
    pub wasted_tokens: u64,
    pub overflow_events: u64,
    pub eviction_events: u64,
    pub kv_utilization_mean: f64,
    pub kv_utilization_max: f64,
    pub kv_utilization_std: f64,
    /// Least-squares slope of the unfinished count over the whole run.
    pub queue_growth_slope: f64,
    pub wall_time: f64,
    pub request_throughput_wall: f64,
    pub token_throughput_wall: f64,
}

/// Latencies of completed requests, ascending.
pub fn completed_latencies(result: &RunResult) -> Vec<u64> {
    let mut out: Vec<u64> = result
        .final_state
        .requests
        .iter()
        .filter(|e| e.state.phase == Phase::Completed)
        .map(|e| e.state.completion_slot.expect("completed") - e.request.arrival_slot + 1)
        .collect();
    out.sort_unstable();
    out
}

/// Slope of the least-squares line through `(i, ys[i])`.
pub fn least_squares_slope(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let x_mean = (nf - 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    sxy / sxx
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

pub fn compute_metrics(result: &RunResult) -> MetricsReport {
    let t = result.horizon.max(1) as f64;
    let latencies = completed_latencies(result);
    let retained: u64 = result
        .final_state
        .requests
        .iter()
        .filter(|e| e.state.phase == Phase::Completed)
        .map(|e| e.request.decode_len)
        .sum();
    let completed = result.counters.completed;
    let cap = result.kv_capacity as f64;
    let util = result.series.usage.iter().map(|&u| u as f64 / cap);
    let (util_mean, util_std) = mean_std(util.clone());
    let unfinished: Vec<f64> = result.series.unfinished.iter().map(|&u| u as f64).collect();
    let wall = if result.wall_time > 0.0 { result.wall_time } else { t };

    MetricsReport {
        policy: result.policy.clone(),
        seed: result.seed,
        horizon: result.horizon,
        kv_capacity: result.kv_capacity,
        arrivals: result.counters.total_arrivals,
        completed,
        unfinished: result.series.unfinished.last().copied().unwrap_or(0),
        avg_latency: (!latencies.is_empty())
            .then(|| latencies.iter().sum::<u64>() as f64 / latencies.len() as f64),
        p95_latency: (!latencies.is_empty()).then(|| nearest_rank(&latencies, 95)),
        min_latency: latencies.first().copied(),
        max_latency: latencies.last().copied(),
        request_throughput: completed as f64 / t,
        token_throughput: retained as f64 / t,
        gross_token_throughput: result.counters.generated_tokens as f64 / t,
        wasted_tokens: result.counters.wasted_tokens,
        overflow_events: result.counters.overflow_events,
        eviction_events: result.counters.evictions,
        kv_utilization_mean: util_mean,
        kv_utilization_max: util.fold(0.0, f64::max),
        kv_utilization_std: util_std,
        queue_growth_slope: least_squares_slope(&unfinished),
        wall_time: wall,
        request_throughput_wall: completed as f64 / wall,
        token_throughput_wall: retained as f64 / wall,
    }
}

impl MetricsReport {
    pub fn write_csv(reports: &[MetricsReport], out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in reports {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<metrics>", e))?;
        Ok(())
    }

    pub fn read_csv(input: impl Read) -> Result<Vec<MetricsReport>> {
        let mut r = csv::Reader::from_reader(input);
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
}

/// Totals recomputed from an event log alone.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventTotals {
    pub arrivals: u64,
    pub completed: u64,
    pub evictions: u64,
    pub overflow_events: u64,
    pub decode_steps: u64,
    /// Tokens held by requests at completion.
    pub retained_tokens: u64,
    /// Tokens held by requests at eviction.
    pub wasted_tokens: u64,
    /// Ascending.
    pub latencies: Vec<u64>,
}

/// Second, independent pass over the event log.
pub fn totals_from_events(log: &EventLog) -> EventTotals {
    let mut totals = EventTotals::default();
    let mut arrival: HashMap<RequestId, Slot> = HashMap::new();
    let mut progress: HashMap<RequestId, u64> = HashMap::new();
    for e in &log.events {
        let id = e.request_id;
        match e.event {
            EventKind::Arrive => {
                totals.arrivals += 1;
                arrival.insert(id.expect("arrive has id"), e.slot);
            }
            EventKind::Activate => {
                progress.insert(id.expect("activate has id"), 0);
            }
            EventKind::DecodeStep => {
                totals.decode_steps += 1;
                *progress.entry(id.expect("decode has id")).or_default() += 1;
            }
            EventKind::Evict => {
                totals.evictions += 1;
                totals.wasted_tokens += progress.remove(&id.expect("evict has id")).unwrap_or(0);
            }
            EventKind::Complete => {
                let id = id.expect("complete has id");
                totals.completed += 1;
                totals.retained_tokens += progress.remove(&id).unwrap_or(0);
                totals.latencies.push(e.slot - arrival[&id] + 1);
            }
            EventKind::Overflow => totals.overflow_events += 1,
        }
    }
    totals.latencies.sort_unstable();
    totals
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthVerdict {
    Stable,
    Growing,
    /// Fewer than [`MIN_SLOTS_FOR_VERDICT`] slots.
    Inconclusive,
}

pub const MIN_SLOTS_FOR_VERDICT: usize = 1000;
pub const DEFAULT_GROWTH_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityEstimate {
    pub slope: f64,
    pub verdict: GrowthVerdict,
}

/// Fits the unfinished-count series over the last half of the run.
pub fn stability_estimate(result: &RunResult, threshold: f64) -> StabilityEstimate {
    estimate_from_series(&result.series.unfinished, threshold)
}

pub fn estimate_from_series(unfinished: &[u64], threshold: f64) -> StabilityEstimate {
    let half = &unfinished[unfinished.len() / 2..];
    let ys: Vec<f64> = half.iter().map(|&u| u as f64).collect();
    let slope = least_squares_slope(&ys);
    let verdict = if unfinished.len() < MIN_SLOTS_FOR_VERDICT {
        GrowthVerdict::Inconclusive
    } else if slope > threshold {
        GrowthVerdict::Growing
    } else {
        GrowthVerdict::Stable
    };
    StabilityEstimate { slope, verdict }
}

/// Mean and sample standard deviation of one metric across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Aggregate { mean, std, n }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_stream, EngineOptions};
    use crate::policy::AlphaProtection;
    use crate::types::Request;
    use crate::workload::ArrivalStream;

    fn run_single(requests: Vec<Request>, horizon: Slot, cap: Tokens) -> RunResult {
        let stream = ArrivalStream::from_requests(requests, horizon).unwrap();
        run_stream(
            &stream,
            Box::new(AlphaProtection::new(0.0).unwrap()),
            cap,
            0,
            EngineOptions {
                record_events: true,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn one_request_hand_computed() {
        let r = run_single(vec![Request::new(0, 3, 5, 1).unwrap()], 10, 100);
        let m = compute_metrics(&r);
        assert_eq!(m.avg_latency, Some(5.0));
        assert_eq!(m.p95_latency, Some(5));
        assert_eq!(m.request_throughput, 0.1);
        assert_eq!(m.token_throughput, 0.5);
        assert_eq!(m.wall_time, 10.0);
    }

    #[test]
    fn no_completions() {
        let r = run_single(vec![Request::new(0, 3, 50, 1).unwrap()], 10, 100);
        let m = compute_metrics(&r);
        assert_eq!(m.avg_latency, None);
        assert_eq!(m.p95_latency, None);
        assert_eq!(m.request_throughput, 0.0);
        assert_eq!(m.token_throughput, 0.0);
        assert_eq!(m.unfinished, 1);
    }

    #[test]
    fn p95_nearest_rank_over_hundred() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(nearest_rank(&v, 95), 95);
    }

    #[test]
    fn slope_of_constant_and_linear() {
        assert_eq!(least_squares_slope(&[4.0; 10]), 0.0);
        let ys: Vec<f64> = (0..50).map(|t| t as f64).collect();
        assert!((least_squares_slope(&ys) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn growth_verdicts() {
        assert_eq!(
            estimate_from_series(&[3; 2000], DEFAULT_GROWTH_THRESHOLD).verdict,
            GrowthVerdict::Stable
        );
        let linear: Vec<u64> = (1..=2000).collect();
        let e = estimate_from_series(&linear, DEFAULT_GROWTH_THRESHOLD);
        assert_eq!(e.verdict, GrowthVerdict::Growing);
        assert!((e.slope - 1.0).abs() < 1e-9);
        assert_eq!(
            estimate_from_series(&linear[..999], DEFAULT_GROWTH_THRESHOLD).verdict,
            GrowthVerdict::Inconclusive
        );
    }

    #[test]
    fn events_reproduce_report() {
        let reqs: Vec<Request> = (0..6).map(|i| Request::new(i, 4, 2 + i % 3, 1 + i).unwrap()).collect();
        let r = run_single(reqs, 20, 14);
        let m = compute_metrics(&r);
        let t = totals_from_events(r.events.as_ref().unwrap());
        assert_eq!(t.completed, m.completed);
        assert_eq!(t.retained_tokens as f64 / 20.0, m.token_throughput);
        assert_eq!(t.latencies, completed_latencies(&r));
        assert_eq!(t.wasted_tokens, m.wasted_tokens);
        assert_eq!(t.decode_steps, r.counters.generated_tokens);
    }

    #[test]
    fn csv_round_trip() {
        let r = run_single(vec![Request::new(0, 3, 5, 1).unwrap(), Request::new(1, 3, 50, 2).unwrap()], 7, 100);
        let reports = vec![compute_metrics(&r), compute_metrics(&run_single(vec![], 3, 10))];
        let mut buf = Vec::new();
        MetricsReport::write_csv(&reports, &mut buf).unwrap();
        assert_eq!(MetricsReport::read_csv(buf.as_slice()).unwrap(), reports);
    }

    #[test]
    fn objective_parsing_and_direction() {
        assert_eq!("p95_latency".parse::<Objective>().unwrap(), Objective::P95Latency);
        assert_eq!("token-throughput".parse::<Objective>().unwrap(), Objective::TokenThroughput);
        assert!(Objective::AvgLatency.at_least_as_good(2.0, 3.0));
        assert!(Objective::TokenThroughput.at_least_as_good(3.0, 2.0));
    }

    #[test]
    fn aggregate_mean_std() {
        let a = aggregate(&[1.0, 2.0, 3.0]);
        assert_eq!(a.mean, 2.0);
        assert!((a.std - 1.0).abs() < 1e-12);
        assert_eq!(aggregate(&[5.0]).std, 0.0);
    }
}
