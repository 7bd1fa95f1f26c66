//! Load conditions and the overflow bound.
//!
//! A request of prompt length `l` and output length `o` occupies
//! `w = l*o + o(o+1)/2` token-slots of cache over its life. With arrival
//! rates `lambda_k` the offered load is `sum_k lambda_k * w_k`:
//!
//! * if the offered load exceeds the capacity `M` no policy keeps the queue
//!   bounded;
//! * per-class flow control with integer budgets `b_k > lambda_k` and
//!   `sum_k b_k * w_k < M` never overflows and keeps every queue stable.
//!
//! All load comparisons are exact rational arithmetic. At exact equality the
//! necessary condition reports `Boundary` instead of a verdict.

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{run, EngineOptions};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, Objective};
use crate::policy::PolicyConfig;
use crate::trace::TraceRecord;
use crate::types::{workload_tokens, Rate, RequestClass, Tokens};
use crate::workload::WorkloadSpec;

type Exact = Ratio<i128>;

fn exact_to_f64(r: &Exact) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

fn exact_to_string(r: &Exact) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// A request class with its arrival rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLoad {
    pub prompt_len: Tokens,
    pub decode_len: Tokens,
    pub rate: Rate,
}

impl ClassLoad {
    pub fn new(prompt_len: Tokens, decode_len: Tokens, rate: Rate) -> Self {
        Self {
            prompt_len,
            decode_len,
            rate,
        }
    }

    pub fn workload(&self) -> Result<Tokens> {
        workload_tokens(self.prompt_len, self.decode_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadVerdict {
    /// Offered load strictly above capacity.
    Unstable,
    /// Offered load exactly equal to capacity.
    Boundary,
    /// Offered load strictly below capacity.
    NotFlagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NecessaryCheck {
    /// Offered load in token-slots per slot.
    pub offered_load: f64,
    /// Exact offered load as `p/q`, when it is exactly computable.
    pub offered_load_exact: Option<String>,
    pub capacity: Tokens,
    pub verdict: LoadVerdict,
    pub necessary_violated: bool,
}

impl NecessaryCheck {
    fn exact(load: Exact, capacity: Tokens) -> Self {
        let m = Exact::from_integer(capacity as i128);
        let verdict = match load.cmp(&m) {
            std::cmp::Ordering::Greater => LoadVerdict::Unstable,
            std::cmp::Ordering::Equal => LoadVerdict::Boundary,
            std::cmp::Ordering::Less => LoadVerdict::NotFlagged,
        };
        Self {
            offered_load: exact_to_f64(&load),
            offered_load_exact: Some(exact_to_string(&load)),
            capacity,
            verdict,
            necessary_violated: verdict == LoadVerdict::Unstable,
        }
    }
}

/// Offered load `sum_k lambda_k * w_k`, exactly.
pub fn offered_load(classes: &[ClassLoad]) -> Result<Exact> {
    let mut load = Exact::zero();
    for c in classes {
        load += c.rate.to_i128() * Exact::from_integer(c.workload()? as i128);
    }
    Ok(load)
}

/// Known lengths: flags instability iff `sum_k lambda_k * w_k > M`.
pub fn check_necessary_known(classes: &[ClassLoad], capacity: Tokens) -> Result<NecessaryCheck> {
    Ok(NecessaryCheck::exact(offered_load(classes)?, capacity))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SufficientCheck {
    /// `sum_k b_k * w_k`.
    pub budgeted_load: u128,
    pub capacity: Tokens,
    /// `budgeted_load < capacity`.
    pub memory_condition: bool,
    /// `b_k > lambda_k` for every class.
    pub rate_condition: bool,
    pub rate_condition_per_class: Vec<bool>,
    pub sufficient_holds: bool,
}

/// Budgeted load of per-class flow control; the peak usage it can reach.
pub fn budgeted_load(classes: &[RequestClass], budgets: &[u32]) -> Result<u128> {
    if classes.len() != budgets.len() {
        return Err(Error::Config(format!(
            "{} budgets for {} classes",
            budgets.len(),
            classes.len()
        )));
    }
    Ok(classes
        .iter()
        .zip(budgets)
        .map(|(c, &b)| b as u128 * c.workload() as u128)
        .sum())
}

/// Per-class flow control: holds iff `sum_k b_k w_k < M` and `b_k > lambda_k`.
pub fn check_sufficient_known(
    classes: &[RequestClass],
    budgets: &[u32],
    rates: &[Rate],
    capacity: Tokens,
) -> Result<SufficientCheck> {
    if rates.len() != classes.len() {
        return Err(Error::Config(format!("{} rates for {} classes", rates.len(), classes.len())));
    }
    let load = budgeted_load(classes, budgets)?;
    let per_class: Vec<bool> = budgets
        .iter()
        .zip(rates)
        .map(|(&b, r)| Exact::from_integer(b as i128) > r.to_i128())
        .collect();
    let memory_condition = load < capacity as u128;
    let rate_condition = per_class.iter().all(|&ok| ok);
    Ok(SufficientCheck {
        budgeted_load: load,
        capacity,
        memory_condition,
        rate_condition,
        rate_condition_per_class: per_class,
        sufficient_holds: memory_condition && rate_condition,
    })
}

/// Distribution of `(prompt_len, decode_len)` for unknown-length workloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDistribution {
    /// Uniform over the listed samples.
    Empirical { samples: Vec<(Tokens, Tokens)> },
    /// Atoms with non-negative weights, normalized internally.
    Weighted { atoms: Vec<(Tokens, Tokens, Rate)> },
    /// Only the mean workload is known. Requires a declared length cap.
    Parametric {
        mean_workload: f64,
        #[serde(default)]
        max_len: Option<Tokens>,
    },
}

impl LengthDistribution {
    pub fn from_records(records: &[TraceRecord]) -> Self {
        LengthDistribution::Empirical {
            samples: records.iter().map(|r| (r.prompt_tokens, r.output_tokens)).collect(),
        }
    }

    /// Mix of classes weighted by their arrival rates.
    pub fn from_classes(classes: &[ClassLoad]) -> Self {
        LengthDistribution::Weighted {
            atoms: classes.iter().map(|c| (c.prompt_len, c.decode_len, c.rate)).collect(),
        }
    }

    /// `E[w]` exactly, or `None` for the parametric form. Empty
    /// distributions have mean zero.
    pub fn mean_workload_exact(&self) -> Result<Option<Exact>> {
        match self {
            LengthDistribution::Empirical { samples } => {
                if samples.is_empty() {
                    return Ok(Some(Exact::zero()));
                }
                let mut total: i128 = 0;
                for &(l, o) in samples {
                    total += workload_tokens(l, o)? as i128;
                }
                Ok(Some(Exact::new(total, samples.len() as i128)))
            }
            LengthDistribution::Weighted { atoms } => {
                let mut num = Exact::zero();
                let mut den = Exact::zero();
                for &(l, o, w) in atoms {
                    num += w.to_i128() * Exact::from_integer(workload_tokens(l, o)? as i128);
                    den += w.to_i128();
                }
                Ok(Some(if den.is_zero() { Exact::zero() } else { num / den }))
            }
            LengthDistribution::Parametric { .. } => Ok(None),
        }
    }

    pub fn mean_workload(&self) -> Result<f64> {
        match self {
            LengthDistribution::Parametric { mean_workload, .. } => Ok(*mean_workload),
            other => Ok(exact_to_f64(&other.mean_workload_exact()?.expect("exact form"))),
        }
    }

    /// Largest length appearing anywhere in the support.
    pub fn max_len(&self) -> Result<Tokens> {
        match self {
            LengthDistribution::Empirical { samples } => {
                Ok(samples.iter().map(|&(l, o)| l.max(o)).max().unwrap_or(0))
            }
            LengthDistribution::Weighted { atoms } => {
                Ok(atoms.iter().map(|&(l, o, _)| l.max(o)).max().unwrap_or(0))
            }
            LengthDistribution::Parametric { max_len, .. } => max_len.ok_or_else(|| {
                Error::Config("a parametric length distribution needs a declared max_len".into())
            }),
        }
    }
}

/// Unknown lengths: flags instability iff `lambda * E[w] > M`.
pub fn check_necessary_unknown(dist: &LengthDistribution, rate: Rate, capacity: Tokens) -> Result<NecessaryCheck> {
    // Parametric forms must still declare bounded support.
    dist.max_len()?;
    match dist.mean_workload_exact()? {
        Some(mean) => Ok(NecessaryCheck::exact(rate.to_i128() * mean, capacity)),
        None => {
            let load = rate.as_f64() * dist.mean_workload()?;
            let m = capacity as f64;
            let verdict = if load > m {
                LoadVerdict::Unstable
            } else if load == m {
                LoadVerdict::Boundary
            } else {
                LoadVerdict::NotFlagged
            };
            Ok(NecessaryCheck {
                offered_load: load,
                offered_load_exact: None,
                capacity,
                verdict,
                necessary_violated: verdict == LoadVerdict::Unstable,
            })
        }
    }
}

/// `C(A, eps) = eps^2 / (2 (A^2 + A) C^3)`.
pub fn overflow_constant(a: u32, epsilon: f64, max_len: Tokens) -> f64 {
    let a = a as f64;
    let c = max_len as f64;
    epsilon * epsilon / (2.0 * (a * a + a) * c * c * c)
}

/// Below this log value the bound renders as "≈0".
pub const NEGLIGIBLE_LOG_BOUND: f64 = -700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverflowBound {
    pub epsilon: f64,
    pub constant: f64,
    /// `ln(T) - C(A, eps) * M^2`.
    pub log_bound: f64,
    /// `T * exp(-C(A, eps) * M^2)`; may underflow to 0.
    pub bound: f64,
    pub rendered: String,
}

fn render_bound(log_bound: f64) -> String {
    if log_bound < NEGLIGIBLE_LOG_BOUND {
        format!("≈0 (exp({log_bound:.4e}))")
    } else {
        format!("{:.6e}", log_bound.exp())
    }
}

/// Expected overflow-event bound for a given slack `epsilon`.
pub fn overflow_bound_from_epsilon(
    a: u32,
    epsilon: f64,
    max_len: Tokens,
    capacity: Tokens,
    horizon: u64,
) -> Result<OverflowBound> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::ConditionViolated(format!("slack {epsilon} is not positive")));
    }
    if a == 0 || max_len == 0 || horizon == 0 {
        return Err(Error::Config("A, C and T must be positive".into()));
    }
    let constant = overflow_constant(a, epsilon, max_len);
    let m = capacity as f64;
    let log_bound = (horizon as f64).ln() - constant * m * m;
    Ok(OverflowBound {
        epsilon,
        constant,
        log_bound,
        bound: log_bound.exp(),
        rendered: render_bound(log_bound),
    })
}

/// Slack `eps = 1 - b E[w] / M`, exactly when possible. `None` if `b E[w] >= M`.
pub fn epsilon_slack(b: Rate, dist: &LengthDistribution, capacity: Tokens) -> Result<Option<f64>> {
    let eps = match dist.mean_workload_exact()? {
        Some(mean) => {
            let eps = Exact::from_integer(1) - b.to_i128() * mean / Exact::from_integer(capacity as i128);
            if eps <= Exact::zero() {
                return Ok(None);
            }
            exact_to_f64(&eps)
        }
        None => 1.0 - b.as_f64() * dist.mean_workload()? / capacity as f64,
    };
    Ok((eps > 0.0).then_some(eps))
}

/// Overflow bound for scalar flow control with mean budget `b` and cap `A`.
pub fn overflow_bound(
    b: Rate,
    a: u32,
    max_len: Tokens,
    capacity: Tokens,
    horizon: u64,
    dist: &LengthDistribution,
) -> Result<OverflowBound> {
    let ceil_b = b.ratio().ceil().to_integer();
    if (a as u64) < ceil_b {
        return Err(Error::Config(format!("A = {a} is below ceil(b) = {ceil_b}")));
    }
    let support = dist.max_len()?;
    if support > max_len {
        return Err(Error::Config(format!("C = {max_len} does not bound lengths up to {support}")));
    }
    let eps = epsilon_slack(b, dist, capacity)?.ok_or_else(|| {
        Error::ConditionViolated(format!("b * E[w] is not below M = {capacity}"))
    })?;
    overflow_bound_from_epsilon(a, eps, max_len, capacity, horizon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub offered_load: f64,
    pub offered_load_exact: Option<String>,
    pub capacity: Tokens,
    pub verdict: LoadVerdict,
    pub necessary_violated: bool,
    /// Present for per-class flow control on known lengths.
    pub sufficient: Option<SufficientCheck>,
    pub sufficient_holds: bool,
    /// Present for scalar flow control when `b E[w] < M`.
    pub epsilon_slack: Option<f64>,
    pub overflow_bound: Option<OverflowBound>,
    pub notes: Vec<String>,
}

impl StabilityReport {
    pub fn from_necessary(check: NecessaryCheck) -> Self {
        Self {
            offered_load: check.offered_load,
            offered_load_exact: check.offered_load_exact,
            capacity: check.capacity,
            verdict: check.verdict,
            necessary_violated: check.necessary_violated,
            sufficient: None,
            sufficient_holds: false,
            epsilon_slack: None,
            overflow_bound: None,
            notes: Vec::new(),
        }
    }
}

/// Policy families swept by the budget search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetFamily {
    /// Scalar budget `b` of the unknown-length flow control.
    FlowUnknown,
    /// The same integer budget for every class.
    FlowKnownUniform,
    /// Protection fraction of alpha-protection.
    AlphaProtection,
}

impl BudgetFamily {
    pub fn policy(&self, value: f64, class_count: usize) -> Result<PolicyConfig> {
        Ok(match self {
            BudgetFamily::FlowUnknown => PolicyConfig::FlowUnknown { b: value, cap: None },
            BudgetFamily::FlowKnownUniform => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::Config(format!("per-class budget {value} must be a positive integer")));
                }
                PolicyConfig::FlowKnown {
                    budgets: vec![value as u32; class_count],
                }
            }
            BudgetFamily::AlphaProtection => PolicyConfig::AlphaProtection { alpha: value },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSearchSpec {
    pub family: BudgetFamily,
    pub grid: Vec<f64>,
    pub objective: Objective,
}

/// Mean metrics of one grid point across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub budget: f64,
    pub policy: String,
    /// Mean objective; missing latencies count as infinitely bad.
    pub objective_value: f64,
    pub request_throughput: f64,
    pub token_throughput: f64,
    pub avg_latency: Option<f64>,
    pub p95_latency: Option<f64>,
    pub overflow_events: f64,
    pub evictions: f64,
    pub wasted_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSearchResult {
    pub objective: Objective,
    pub best_budget: f64,
    pub best_value: f64,
    pub rows: Vec<GridRow>,
}

impl BudgetSearchResult {
    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<budget table>", e))?;
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.map(|v| mean(v.into_iter()))
}

/// Runs every grid point on the same seeds and returns the best one. Ties go
/// to the earliest grid point.
pub fn budget_search(
    workload: &WorkloadSpec,
    capacity: Tokens,
    spec: &BudgetSearchSpec,
    seeds: &[u64],
) -> Result<BudgetSearchResult> {
    if spec.grid.is_empty() {
        return Err(Error::Empty("budget grid"));
    }
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    let class_count = workload.classes()?.len();
    let rows: Vec<GridRow> = spec
        .grid
        .par_iter()
        .map(|&value| {
            let policy = spec.family.policy(value, class_count)?;
            let reports = seeds
                .iter()
                .map(|&seed| run(workload, &policy, capacity, seed, EngineOptions::default()).map(|r| compute_metrics(&r)))
                .collect::<Result<Vec<_>>>()?;
            Ok(GridRow {
                budget: value,
                policy: policy.label(),
                objective_value: mean(reports.iter().map(|r| spec.objective.value(r))),
                request_throughput: mean(reports.iter().map(|r| r.request_throughput)),
                token_throughput: mean(reports.iter().map(|r| r.token_throughput)),
                avg_latency: mean_opt(reports.iter().map(|r| r.avg_latency)),
                p95_latency: mean_opt(reports.iter().map(|r| r.p95_latency.map(|v| v as f64))),
                overflow_events: mean(reports.iter().map(|r| r.overflow_events as f64)),
                evictions: mean(reports.iter().map(|r| r.eviction_events as f64)),
                wasted_tokens: mean(reports.iter().map(|r| r.wasted_tokens as f64)),
            })
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, row) in rows.iter().enumerate().skip(1) {
        let better = if spec.objective.maximize() {
            row.objective_value > rows[best].objective_value
        } else {
            row.objective_value < rows[best].objective_value
        };
        if better {
            best = i;
        }
    }
    Ok(BudgetSearchResult {
        objective: spec.objective,
        best_budget: rows[best].budget,
        best_value: rows[best].objective_value,
        rows,
    })
}
