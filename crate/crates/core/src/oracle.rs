//! Exact hindsight scheduling for small instances.
//!
//! With every arrival and length known in advance, a schedule assigns each
//! request an activation slot or leaves it out. Schedules never evict: an
//! evicted episode only consumes memory, so dropping it keeps any schedule
//! feasible without changing which requests complete or when.
//!
//! The search walks requests in arrival order, trying slots in ascending
//! order and "never" last, so the first optimum found is the
//! lexicographically smallest one. Branches are pruned by memory
//! feasibility and by an optimistic bound that activates every remaining
//! request at its arrival slot with unlimited memory.
//!
//! Requests that do not finish within the horizon count as completing one
//! slot after it, i.e. latency `horizon - arrival + 2`, so that latency
//! objectives are defined for every schedule.

use std::collections::HashMap;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{build_policy, run_stream, EngineOptions, RunResult};
use crate::error::{Error, Result};
use crate::metrics::Objective;
use crate::policy::{FixedSchedule, PolicyConfig, PolicyContext};
use crate::trace::nearest_rank;
use crate::types::{Phase, Request, RequestId, Slot, Tokens};
use crate::workload::ArrivalStream;

pub const MAX_REQUESTS: usize = 10;
pub const MAX_HORIZON: Slot = 40;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfflineInstance {
    pub requests: Vec<Request>,
    pub kv_capacity: Tokens,
    pub horizon: Slot,
    pub objective: Objective,
}

impl OfflineInstance {
    pub fn new(requests: Vec<Request>, kv_capacity: Tokens, horizon: Slot, objective: Objective) -> Result<Self> {
        let inst = Self {
            requests,
            kv_capacity,
            horizon,
            objective,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn from_stream(stream: &ArrivalStream, kv_capacity: Tokens, objective: Objective) -> Result<Self> {
        Self::new(
            stream.slots.iter().flatten().cloned().collect(),
            kv_capacity,
            stream.horizon(),
            objective,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.requests.len() > MAX_REQUESTS {
            return Err(Error::OracleLimits(format!(
                "{} requests exceed the limit of {MAX_REQUESTS}",
                self.requests.len()
            )));
        }
        if self.horizon == 0 || self.horizon > MAX_HORIZON {
            return Err(Error::OracleLimits(format!(
                "horizon {} is outside 1..={MAX_HORIZON}",
                self.horizon
            )));
        }
        for r in &self.requests {
            if !r.output_known {
                return Err(Error::OracleLimits(format!("request {} has an unknown output length", r.id)));
            }
            if r.arrival_slot == 0 || r.arrival_slot > self.horizon {
                return Err(Error::OracleLimits(format!(
                    "request {} arrives at slot {} outside the horizon",
                    r.id, r.arrival_slot
                )));
            }
            if r.prompt_len + 1 > self.kv_capacity {
                return Err(Error::OversizedRequest {
                    id: r.id,
                    needed: r.prompt_len + 1,
                    capacity: self.kv_capacity,
                });
            }
        }
        let mut ids: Vec<RequestId> = self.requests.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateRequest(w[0]));
        }
        Ok(())
    }

    pub fn stream(&self) -> Result<ArrivalStream> {
        ArrivalStream::from_requests(self.requests.clone(), self.horizon)
    }

    /// Latency charged to a request that never completes.
    pub fn censored_latency(&self, r: &Request) -> u64 {
        self.horizon - r.arrival_slot + 2
    }

    /// Objective as an integer cost (lower is better) from completion slots.
    pub fn cost(&self, completions: &HashMap<RequestId, Slot>) -> i64 {
        let mut latencies = Vec::with_capacity(self.requests.len());
        let mut completed = 0i64;
        let mut tokens = 0i64;
        for r in &self.requests {
            match completions.get(&r.id) {
                Some(&c) => {
                    latencies.push(c - r.arrival_slot + 1);
                    completed += 1;
                    tokens += r.decode_len as i64;
                }
                None => latencies.push(self.censored_latency(r)),
            }
        }
        cost_of(self.objective, &mut latencies, completed, tokens)
    }

    /// Converts a cost back to the objective's natural units.
    pub fn value_of_cost(&self, cost: i64) -> f64 {
        let n = self.requests.len().max(1) as f64;
        let t = self.horizon as f64;
        match self.objective {
            Objective::AvgLatency => cost as f64 / n,
            Objective::P95Latency => cost as f64,
            Objective::RequestThroughput | Objective::TokenThroughput => -cost as f64 / t,
        }
    }

    /// Completion slots of the requests a run finished.
    pub fn completions_of(&self, run: &RunResult) -> HashMap<RequestId, Slot> {
        run.final_state
            .requests
            .iter()
            .filter(|e| e.state.phase == Phase::Completed)
            .map(|e| (e.request.id, e.state.completion_slot.expect("completed")))
            .collect()
    }
}

fn cost_of(objective: Objective, latencies: &mut [u64], completed: i64, tokens: i64) -> i64 {
    match objective {
        Objective::AvgLatency => latencies.iter().sum::<u64>() as i64,
        Objective::P95Latency => {
            if latencies.is_empty() {
                return 0;
            }
            latencies.sort_unstable();
            nearest_rank(latencies, 95) as i64
        }
        Objective::RequestThroughput => -completed,
        Objective::TokenThroughput => -tokens,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub objective: Objective,
    /// Optimum in the objective's units (slots, or per-slot rates).
    pub value: f64,
    /// Optimum as an integer cost, lower is better.
    pub cost: i64,
    /// Activation slot per request, in instance order. `None` means never.
    pub schedule: Vec<(RequestId, Option<Slot>)>,
    pub nodes_explored: u64,
}

impl Solution {
    pub fn policy(&self) -> FixedSchedule {
        FixedSchedule::new(self.schedule.iter().filter_map(|&(id, s)| s.map(|s| (id, s))))
    }
}

struct Search<'a> {
    inst: &'a OfflineInstance,
    order: Vec<usize>,
    /// For each position, the previous position holding an identical request.
    twin_of: Vec<Option<usize>>,
    global_best: &'a AtomicI64,
    nodes: &'a AtomicU64,
    usage: Vec<Tokens>,
    chosen: Vec<Option<Slot>>,
    best: Option<(i64, Vec<Option<Slot>>)>,
}

impl<'a> Search<'a> {
    fn request(&self, pos: usize) -> &Request {
        &self.inst.requests[self.order[pos]]
    }

    fn latest_start(&self, r: &Request) -> Option<Slot> {
        (r.arrival_slot + r.decode_len - 1 <= self.inst.horizon).then(|| self.inst.horizon + 1 - r.decode_len)
    }

    fn fits(&self, r: &Request, start: Slot) -> bool {
        (1..=r.decode_len).all(|q| {
            let t = (start + q - 1) as usize;
            self.usage[t] + r.prompt_len + q <= self.inst.kv_capacity
        })
    }

    fn place(&mut self, r: &Request, start: Slot, sign: bool) {
        for d in 0..r.decode_len {
            let t = (start + d) as usize;
            let amount = r.prompt_len + d + 1;
            if sign {
                self.usage[t] += amount;
            } else {
                self.usage[t] -= amount;
            }
        }
    }

    /// Cost if every undecided request ran at its arrival with unlimited memory.
    fn optimistic_cost(&self, depth: usize) -> i64 {
        let mut latencies = Vec::with_capacity(self.order.len());
        let mut completed = 0;
        let mut tokens = 0;
        for pos in 0..self.order.len() {
            let r = self.request(pos);
            let start = if pos < depth {
                self.chosen[pos]
            } else {
                self.latest_start(r).map(|_| r.arrival_slot)
            };
            match start {
                Some(s) => {
                    latencies.push(s + r.decode_len - r.arrival_slot);
                    completed += 1;
                    tokens += r.decode_len as i64;
                }
                None => latencies.push(self.inst.censored_latency(r)),
            }
        }
        cost_of(self.inst.objective, &mut latencies, completed, tokens)
    }

    fn pruned(&self, bound: i64) -> bool {
        if bound > self.global_best.load(Ordering::Relaxed) {
            return true;
        }
        matches!(&self.best, Some((best, _)) if bound >= *best)
    }

    fn dfs(&mut self, depth: usize) {
        self.nodes.fetch_add(1, Ordering::Relaxed);
        let bound = self.optimistic_cost(depth);
        if self.pruned(bound) {
            return;
        }
        if depth == self.order.len() {
            // The bound is exact once everything is decided.
            self.best = Some((bound, self.chosen.clone()));
            self.global_best.fetch_min(bound, Ordering::Relaxed);
            return;
        }
        let r = self.request(depth).clone();
        // Identical requests take non-decreasing slots, "never" sorting last.
        let twin_slot = self.twin_of[depth].map(|p| self.chosen[p]);
        if let Some(last) = self.latest_start(&r) {
            let first = match twin_slot {
                Some(Some(s)) => s.max(r.arrival_slot),
                Some(None) => last + 1,
                None => r.arrival_slot,
            };
            for start in first..=last {
                if !self.fits(&r, start) {
                    continue;
                }
                self.place(&r, start, true);
                self.chosen[depth] = Some(start);
                self.dfs(depth + 1);
                self.place(&r, start, false);
            }
        }
        self.chosen[depth] = None;
        self.dfs(depth + 1);
    }
}

/// Finds the optimal schedule. Ties go to the lexicographically smallest
/// schedule over requests ordered by `(arrival_slot, id)`.
pub fn solve(instance: &OfflineInstance) -> Result<Solution> {
    instance.validate()?;
    let mut order: Vec<usize> = (0..instance.requests.len()).collect();
    order.sort_by_key(|&i| (instance.requests[i].arrival_slot, instance.requests[i].id));
    let same = |a: &Request, b: &Request| {
        (a.prompt_len, a.decode_len, a.arrival_slot) == (b.prompt_len, b.decode_len, b.arrival_slot)
    };
    let twin_of: Vec<Option<usize>> = (0..order.len())
        .map(|pos| {
            let r = &instance.requests[order[pos]];
            (0..pos).rev().find(|&p| same(&instance.requests[order[p]], r))
        })
        .collect();

    let global_best = AtomicI64::new(i64::MAX);
    let nodes = AtomicU64::new(0);
    let n = order.len();
    let make_search = || Search {
        inst: instance,
        order: order.clone(),
        twin_of: twin_of.clone(),
        global_best: &global_best,
        nodes: &nodes,
        usage: vec![0; instance.horizon as usize + 2],
        chosen: vec![None; n],
        best: None,
    };

    let best = if n == 0 {
        Some((0, Vec::new()))
    } else {
        // Top-level branches: each choice for the first request.
        let first = instance.requests[order[0]].clone();
        let mut choices: Vec<Option<Slot>> = Vec::new();
        {
            let probe = make_search();
            if let Some(last) = probe.latest_start(&first) {
                choices.extend((first.arrival_slot..=last).filter(|&s| probe.fits(&first, s)).map(Some));
            }
        }
        choices.push(None);
        let results: Vec<Option<(i64, Vec<Option<Slot>>)>> = choices
            .par_iter()
            .map(|&choice| {
                let mut s = make_search();
                if let Some(start) = choice {
                    s.place(&first, start, true);
                }
                s.chosen[0] = choice;
                s.dfs(1);
                s.best
            })
            .collect();
        // Branches are in lexicographic order; keep the first strict improvement.
        results
            .into_iter()
            .flatten()
            .fold(None, |acc: Option<(i64, Vec<Option<Slot>>)>, cand| match acc {
                Some(a) if a.0 <= cand.0 => Some(a),
                _ => Some(cand),
            })
    };

    let (cost, chosen) = best.expect("the empty schedule is always feasible");
    let mut schedule: Vec<(RequestId, Option<Slot>)> = order
        .iter()
        .zip(&chosen)
        .map(|(&i, &s)| (instance.requests[i].id, s))
        .collect();
    // Report in instance order.
    let pos: HashMap<RequestId, usize> = instance.requests.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
    schedule.sort_by_key(|(id, _)| pos[id]);
    Ok(Solution {
        objective: instance.objective,
        value: instance.value_of_cost(cost),
        cost,
        schedule,
        nodes_explored: nodes.load(Ordering::Relaxed),
    })
}

/// Replays a solution through the engine.
pub fn replay(instance: &OfflineInstance, solution: &Solution) -> Result<RunResult> {
    run_stream(
        &instance.stream()?,
        Box::new(solution.policy()),
        instance.kv_capacity,
        0,
        EngineOptions::default(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceWitness {
    pub holds: bool,
    pub policy: String,
    pub objective: Objective,
    pub oracle_cost: i64,
    pub policy_cost: i64,
    pub oracle_schedule: Vec<(RequestId, Option<Slot>)>,
    /// Final activation slot of every request the policy completed.
    pub policy_schedule: Vec<(RequestId, Option<Slot>)>,
}

/// Runs `policy` on the instance and checks that the oracle is at least as good.
pub fn verify_policy_dominance(instance: &OfflineInstance, policy: &PolicyConfig, seed: u64) -> Result<DominanceWitness> {
    dominance_against(instance, &solve(instance)?, policy, seed)
}

/// Same as [`verify_policy_dominance`] with the optimum already solved.
pub fn dominance_against(
    instance: &OfflineInstance,
    solution: &Solution,
    policy: &PolicyConfig,
    seed: u64,
) -> Result<DominanceWitness> {
    let stream = instance.stream()?;
    let ctx = PolicyContext {
        class_count: instance
            .requests
            .iter()
            .filter_map(|r| r.class_id)
            .max()
            .map_or(0, |k| k as usize + 1),
        output_known: true,
        min_output: instance.requests.iter().map(|r| r.decode_len).min(),
    };
    let built = build_policy(policy, &ctx, &stream, instance.kv_capacity)?;
    let run = run_stream(&stream, built, instance.kv_capacity, seed, EngineOptions::default())?;
    let completions = instance.completions_of(&run);
    let policy_cost = instance.cost(&completions);
    let policy_schedule = instance
        .requests
        .iter()
        .map(|r| (r.id, completions.get(&r.id).map(|&c| c + 1 - r.decode_len)))
        .collect();
    Ok(DominanceWitness {
        holds: solution.cost <= policy_cost,
        policy: policy.label(),
        objective: instance.objective,
        oracle_cost: solution.cost,
        policy_cost,
        oracle_schedule: solution.schedule.clone(),
        policy_schedule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: u64, l: u64, o: u64, t: u64) -> Request {
        Request::new(id, l, o, t).unwrap()
    }

    #[test]
    fn single_request_forced_optimum() {
        let inst = OfflineInstance::new(vec![req(0, 1, 1, 1)], 2, 2, Objective::AvgLatency).unwrap();
        let s = solve(&inst).unwrap();
        assert_eq!(s.value, 1.0);
        assert_eq!(s.schedule, vec![(0, Some(1))]);
    }

    #[test]
    fn two_identical_requests_take_turns() {
        let inst = OfflineInstance::new(
            vec![req(0, 10, 2, 1), req(1, 10, 2, 1)],
            12,
            4,
            Objective::RequestThroughput,
        )
        .unwrap();
        let s = solve(&inst).unwrap();
        assert_eq!(s.value, 0.5);
        assert_eq!(s.schedule, vec![(0, Some(1)), (1, Some(3))]);
    }

    #[test]
    fn limits_are_enforced() {
        let many: Vec<Request> = (0..11).map(|i| req(i, 1, 1, 1)).collect();
        assert!(matches!(
            OfflineInstance::new(many, 100, 10, Objective::AvgLatency),
            Err(Error::OracleLimits(_))
        ));
        assert!(OfflineInstance::new(vec![], 100, 41, Objective::AvgLatency).is_err());
        assert!(matches!(
            OfflineInstance::new(vec![req(0, 5, 1, 1)], 5, 10, Objective::AvgLatency),
            Err(Error::OversizedRequest { .. })
        ));
    }

    #[test]
    fn replay_reproduces_value() {
        let inst = OfflineInstance::new(
            vec![req(0, 3, 4, 1), req(1, 2, 2, 1), req(2, 4, 3, 2), req(3, 1, 5, 3)],
            14,
            10,
            Objective::AvgLatency,
        )
        .unwrap();
        let s = solve(&inst).unwrap();
        let run = replay(&inst, &s).unwrap();
        assert_eq!(inst.cost(&inst.completions_of(&run)), s.cost);
    }

    #[test]
    fn latency_and_throughput_optima_differ() {
        // The long request alone yields the most tokens; the short one alone
        // yields the lower total latency. They never fit together.
        let requests = vec![req(0, 1, 5, 1), req(1, 4, 1, 1)];
        let lat = solve(&OfflineInstance::new(requests.clone(), 6, 5, Objective::AvgLatency).unwrap()).unwrap();
        let tok = solve(&OfflineInstance::new(requests, 6, 5, Objective::TokenThroughput).unwrap()).unwrap();
        assert_eq!(tok.schedule, vec![(0, Some(1)), (1, None)]);
        assert_eq!(tok.value, 1.0);
        assert_eq!(lat.schedule[1], (1, Some(1)));
        assert_ne!(lat.schedule, tok.schedule);
    }

    #[test]
    fn oracle_against_itself_is_equal() {
        let inst = OfflineInstance::new(vec![req(0, 2, 3, 1), req(1, 2, 2, 2)], 8, 8, Objective::P95Latency).unwrap();
        let w = verify_policy_dominance(&inst, &PolicyConfig::Oracle { objective: Objective::P95Latency }, 0).unwrap();
        assert!(w.holds);
        assert_eq!(w.oracle_cost, w.policy_cost);
    }

    #[test]
    fn one_request_dominance() {
        let inst = OfflineInstance::new(vec![req(0, 2, 3, 1)], 8, 8, Objective::TokenThroughput).unwrap();
        let w = verify_policy_dominance(&inst, &PolicyConfig::Mc { assume_max_output: None }, 0).unwrap();
        assert!(w.holds);
    }
}
