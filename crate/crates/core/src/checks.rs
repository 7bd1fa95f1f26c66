//! Seeded statistical checks of the load guarantees, plus the exact replays
//! (queue recursion, usage decomposition) they rely on.
//!
//! Each check returns `Skipped` when its precondition fails rather than
//! asserting anything, so a perturbed preset never produces a false alarm.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{run, EngineOptions, EventKind, EventLog, RunResult};
use crate::error::Result;
use crate::metrics::compute_metrics;
use crate::policy::PolicyConfig;
use crate::stability::{
    budgeted_load, check_sufficient_known, epsilon_slack, offered_load, ClassLoad, LengthDistribution,
};
use crate::trace::ingest_trace;
use crate::types::{workload_tokens, Rate, Request, RequestId, Slot, Tokens};
use crate::workload::{ArrivalStream, WorkloadSpec};

/// Seeds, horizon and tolerance of one statistical check, fixed in code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTestSpec {
    pub seeds: Vec<u64>,
    pub horizon: Slot,
    /// Multiplier applied to an asymptotic lower bound before comparing.
    pub safety_factor: f64,
    /// Acceptance criterion this spec backs.
    pub claim: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "detail", rename_all = "snake_case")]
pub enum CheckOutcome {
    Pass(String),
    Fail(String),
    Skipped(String),
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, CheckOutcome::Pass(_))
    }

    pub fn skipped(&self) -> bool {
        matches!(self, CheckOutcome::Skipped(_))
    }
}

fn with_horizon(workload: &WorkloadSpec, horizon: Slot) -> WorkloadSpec {
    let mut w = workload.clone();
    match &mut w {
        WorkloadSpec::Synthetic { horizon: h, .. } | WorkloadSpec::Trace { horizon: h, .. } => *h = horizon,
    }
    w
}

fn run_seeds(workload: &WorkloadSpec, policy: &PolicyConfig, capacity: Tokens, seeds: &[u64]) -> Result<Vec<RunResult>> {
    seeds
        .par_iter()
        .map(|&seed| run(workload, policy, capacity, seed, EngineOptions::default()))
        .collect()
}

/// Offered load in token-slots per slot and the largest single-request workload.
pub fn load_profile(workload: &WorkloadSpec) -> Result<(f64, Tokens)> {
    match workload {
        WorkloadSpec::Synthetic { classes, .. } => {
            let loads: Vec<ClassLoad> = classes
                .iter()
                .map(|c| ClassLoad::new(c.prompt_len, c.decode_len, c.rate))
                .collect();
            let load = offered_load(&loads)?;
            let mut w_max = 0;
            for c in &loads {
                if !c.rate.is_zero() {
                    w_max = w_max.max(c.workload()?);
                }
            }
            Ok((*load.numer() as f64 / *load.denom() as f64, w_max))
        }
        WorkloadSpec::Trace { path, format, rate, .. } => {
            let records = ingest_trace(path, *format)?.records;
            let mean = LengthDistribution::from_records(&records).mean_workload()?;
            let mut w_max = 0;
            for r in &records {
                w_max = w_max.max(workload_tokens(r.prompt_tokens, r.output_tokens)?);
            }
            Ok((rate.as_f64() * mean, w_max))
        }
    }
}

/// Asymptotic growth rate `(load - M) / w_max` of the unfinished count, or
/// `None` when the load does not exceed the capacity.
pub fn growth_lower_bound(load: f64, capacity: Tokens, w_max: Tokens) -> Option<f64> {
    let delta = load - capacity as f64;
    (delta > 0.0 && w_max > 0).then(|| delta / w_max as f64)
}

/// Per-class flow control with budgets inside the memory condition never
/// overflows, never evicts, and peaks at or below the budgeted load.
pub fn check_budgeted_no_overflow(
    workload: &WorkloadSpec,
    budgets: &[u32],
    capacity: Tokens,
    spec: &StatTestSpec,
) -> Result<CheckOutcome> {
    let classes = workload.classes()?;
    if classes.is_empty() {
        return Ok(CheckOutcome::Pass("empty workload".into()));
    }
    let WorkloadSpec::Synthetic { classes: specs, .. } = workload else {
        return Ok(CheckOutcome::Skipped("per-class budgets need a synthetic workload".into()));
    };
    let rates: Vec<Rate> = specs.iter().map(|c| c.rate).collect();
    let sufficient = check_sufficient_known(&classes, budgets, &rates, capacity)?;
    if !sufficient.memory_condition {
        return Ok(CheckOutcome::Skipped(format!(
            "budgeted load {} is not below {capacity}",
            sufficient.budgeted_load
        )));
    }
    let bound = budgeted_load(&classes, budgets)? as Tokens;
    let policy = PolicyConfig::FlowKnown {
        budgets: budgets.to_vec(),
    };
    let runs = run_seeds(&with_horizon(workload, spec.horizon), &policy, capacity, &spec.seeds)?;
    let mut peak = 0;
    for r in &runs {
        let c = &r.counters;
        peak = peak.max(r.max_usage());
        if c.overflow_events > 0 || c.evictions > 0 || r.max_usage() > bound {
            return Ok(CheckOutcome::Fail(format!(
                "seed {}: {} overflows, {} evictions, peak {} against bound {bound}",
                r.seed,
                c.overflow_events,
                c.evictions,
                r.max_usage()
            )));
        }
    }
    Ok(CheckOutcome::Pass(format!(
        "{} seeds, 0 overflows, 0 evictions, peak {peak} <= {bound}",
        runs.len()
    )))
}

/// Under overload every policy's unfinished count grows at least at
/// `safety_factor * (load - M) / w_max` per slot.
pub fn check_overload_growth(
    workload: &WorkloadSpec,
    policies: &[PolicyConfig],
    capacity: Tokens,
    spec: &StatTestSpec,
) -> Result<CheckOutcome> {
    let (load, w_max) = load_profile(workload)?;
    let Some(rate) = growth_lower_bound(load, capacity, w_max) else {
        return Ok(CheckOutcome::Skipped(format!("load {load} does not exceed {capacity}")));
    };
    let threshold = spec.safety_factor * rate;
    let workload = with_horizon(workload, spec.horizon);
    let jobs: Vec<(&PolicyConfig, u64)> = policies
        .iter()
        .flat_map(|p| spec.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let slopes = jobs
        .par_iter()
        .map(|&(p, seed)| {
            let r = run(&workload, p, capacity, seed, EngineOptions::default())?;
            Ok((p.label(), seed, compute_metrics(&r).queue_growth_slope))
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = slopes
        .iter()
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .expect("at least one run");
    let detail = format!(
        "min slope {:.4} ({} seed {}) vs threshold {threshold:.4} over {} runs",
        worst.2,
        worst.0,
        worst.1,
        slopes.len()
    );
    Ok(if worst.2 >= threshold {
        CheckOutcome::Pass(detail)
    } else {
        CheckOutcome::Fail(detail)
    })
}

/// Scalar flow control with positive slack sees no overflow, and its drawn
/// budget never exceeds the cap.
pub fn check_overflow_rarity(
    workload: &WorkloadSpec,
    b: f64,
    cap: Option<u32>,
    capacity: Tokens,
    spec: &StatTestSpec,
) -> Result<CheckOutcome> {
    let dist = match workload {
        WorkloadSpec::Synthetic { classes, .. } => LengthDistribution::from_classes(
            &classes
                .iter()
                .map(|c| ClassLoad::new(c.prompt_len, c.decode_len, c.rate))
                .collect::<Vec<_>>(),
        ),
        WorkloadSpec::Trace { path, format, .. } => LengthDistribution::from_records(&ingest_trace(path, *format)?.records),
    };
    let slack = epsilon_slack(Rate::from_f64(b)?, &dist, capacity)?;
    match slack {
        Some(eps) if eps > 0.0 => {}
        _ => return Ok(CheckOutcome::Skipped(format!("no positive slack for b = {b}"))),
    }
    let cap_value = cap.unwrap_or(b.ceil() as u32);
    let policy = PolicyConfig::FlowUnknown { b, cap };
    let runs = run_seeds(&with_horizon(workload, spec.horizon), &policy, capacity, &spec.seeds)?;
    for r in &runs {
        if r.counters.overflow_events > 0 {
            return Ok(CheckOutcome::Fail(format!(
                "seed {}: {} overflow events",
                r.seed, r.counters.overflow_events
            )));
        }
        if let Some(t) = r.series.budget.iter().position(|&x| x.is_some_and(|x| x > cap_value)) {
            return Ok(CheckOutcome::Fail(format!("seed {}: budget above {cap_value} at slot {}", r.seed, t + 1)));
        }
    }
    Ok(CheckOutcome::Pass(format!(
        "{} seeds x {} slots, 0 overflows, budget <= {cap_value}",
        runs.len(),
        spec.horizon
    )))
}

/// Per-class queue lengths from `Q_t = max(Q_{t-1} + n_t - b, 0)`, one
/// series per class, driven by the arrival stream alone.
pub fn queue_recursion(stream: &ArrivalStream, budgets: &[u32]) -> Vec<Vec<u64>> {
    let mut q = vec![0u64; budgets.len()];
    let mut out = vec![Vec::with_capacity(stream.slots.len()); budgets.len()];
    for arrivals in &stream.slots {
        let mut n = vec![0u64; budgets.len()];
        for r in arrivals {
            if let Some(k) = r.class_id {
                n[k as usize] += 1;
            }
        }
        for k in 0..budgets.len() {
            q[k] = (q[k] + n[k]).saturating_sub(budgets[k] as u64);
            out[k].push(q[k]);
        }
    }
    out
}

/// Cache usage at every slot rebuilt from activation and eviction events:
/// a request activated at `p` holds `l + q` tokens in its `q`-th slot until
/// it finishes or is evicted.
pub fn usage_from_events(requests: &[Request], log: &EventLog, horizon: Slot) -> Vec<Tokens> {
    let lengths: HashMap<RequestId, (Tokens, Tokens)> =
        requests.iter().map(|r| (r.id, (r.prompt_len, r.decode_len))).collect();
    let mut started: HashMap<RequestId, Slot> = HashMap::new();
    // (id, first slot, slot after the last occupied one)
    let mut episodes: Vec<(RequestId, Slot, Slot)> = Vec::new();
    for e in &log.events {
        match (e.event, e.request_id) {
            (EventKind::Activate, Some(id)) => {
                started.insert(id, e.slot);
            }
            (EventKind::Evict, Some(id)) => {
                if let Some(p) = started.remove(&id) {
                    episodes.push((id, p, e.slot));
                }
            }
            _ => {}
        }
    }
    for (id, p) in started {
        episodes.push((id, p, Slot::MAX));
    }
    let mut usage = vec![0; horizon as usize];
    for (id, p, end) in episodes {
        let (l, o) = lengths[&id];
        for q in 1..=o {
            let t = p + q - 1;
            if t >= end || t > horizon {
                break;
            }
            usage[t as usize - 1] += l + q;
        }
    }
    usage
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::ClassSpec;

    fn preset(rate: Rate) -> WorkloadSpec {
        WorkloadSpec::Synthetic {
            classes: [20, 40, 60]
                .iter()
                .map(|&o| ClassSpec {
                    prompt_len: 10,
                    decode_len: o,
                    rate,
                })
                .collect(),
            horizon: 100,
            output_known: true,
        }
    }

    fn spec(seeds: Vec<u64>, horizon: Slot) -> StatTestSpec {
        StatTestSpec {
            seeds,
            horizon,
            safety_factor: 0.8,
            claim: "test".into(),
        }
    }

    #[test]
    fn growth_bound_examples() {
        let (load, w_max) = load_profile(&preset(Rate::integer(5))).unwrap();
        assert_eq!(load, 20300.0);
        assert_eq!(w_max, 2430);
        let g = growth_lower_bound(load, 16492, w_max).unwrap();
        assert!((g - 3808.0 / 2430.0).abs() < 1e-12);
        assert!((0.8 * g - 1.2537).abs() < 1e-4);
        // twice the rate: 40600 - 16492 = 24108
        let g2 = growth_lower_bound(2.0 * load, 16492, w_max).unwrap();
        assert!((g2 - 24108.0 / 2430.0).abs() < 1e-12);
        assert_eq!(growth_lower_bound(16492.0, 16492, 2430), None);
    }

    #[test]
    fn stable_preset_skips_growth_check() {
        let out = check_overload_growth(
            &preset(Rate::new(5, 3).unwrap()),
            &[PolicyConfig::McSf],
            16492,
            &spec(vec![1], 100),
        )
        .unwrap();
        assert!(out.skipped());
    }

    #[test]
    fn memory_violation_skips_no_overflow_check() {
        let out = check_budgeted_no_overflow(&preset(Rate::new(5, 3).unwrap()), &[5, 4, 4], 16492, &spec(vec![1], 100))
            .unwrap();
        assert!(out.skipped());
    }

    #[test]
    fn empty_workload_passes() {
        let w = WorkloadSpec::Synthetic {
            classes: vec![],
            horizon: 10,
            output_known: true,
        };
        assert!(check_budgeted_no_overflow(&w, &[], 100, &spec(vec![1], 10)).unwrap().passed());
    }

    #[test]
    fn tiny_capacity_skips_rarity_check() {
        let out = check_overflow_rarity(&preset(Rate::new(5, 3).unwrap()), 5.5, None, 100, &spec(vec![1], 50)).unwrap();
        assert!(out.skipped());
    }

    #[test]
    fn recursion_by_hand() {
        let mk = |id, t, k| Request::new(id, 1, 1, t).unwrap().with_class(k);
        let stream = ArrivalStream::from_requests(
            vec![mk(0, 1, 0), mk(1, 1, 0), mk(2, 1, 0), mk(3, 2, 1), mk(4, 3, 0)],
            4,
        )
        .unwrap();
        assert_eq!(queue_recursion(&stream, &[1, 1]), vec![vec![2, 1, 1, 0], vec![0, 0, 0, 0]]);
    }
}
