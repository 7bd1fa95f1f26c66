//! The slot loop.
//!
//! Each slot runs five phases in order: arrivals join the waiting queue, the
//! policy picks activations, the projected end-of-slot usage is checked
//! against the capacity (evicting until it fits), every active request
//! decodes one token, and finished requests release their memory.
//!
//! The recorded usage `U_t` is the slot's peak: after the decode step and
//! before completed requests are released.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyConfig, PolicyContext, PolicyView};
use crate::rng::{SimRng, POLICY_STREAM};
use crate::state::{SimSnapshot, SimState};
use crate::types::{Request, RequestId, Slot, Tokens};
use crate::workload::{generate_arrivals, ArrivalStream, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrive,
    Activate,
    Evict,
    DecodeStep,
    Complete,
    Overflow,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Arrive => "arrive",
            EventKind::Activate => "activate",
            EventKind::Evict => "evict",
            EventKind::DecodeStep => "decode_step",
            EventKind::Complete => "complete",
            EventKind::Overflow => "overflow",
        }
    }
}

/// One log line. `usage_after` is the resident usage once the event has been
/// applied; for `overflow` it is the projected usage that triggered it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub slot: Slot,
    pub event: EventKind,
    pub request_id: Option<RequestId>,
    pub usage_after: Tokens,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    fn push(&mut self, slot: Slot, event: EventKind, request_id: Option<RequestId>, usage_after: Tokens) {
        self.events.push(Event {
            slot,
            event,
            request_id,
            usage_after,
        });
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["slot", "event", "request_id", "usage_after"])?;
        for e in &self.events {
            w.write_record([
                e.slot.to_string(),
                e.event.as_str().to_string(),
                e.request_id.map(|id| id.to_string()).unwrap_or_default(),
                e.usage_after.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<event log>", e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Linear wall-time surrogate: `base + per_prefill * prefill + per_decode * decode`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotCostModel {
    pub base: f64,
    pub per_prefill: f64,
    pub per_decode: f64,
}

impl Default for SlotCostModel {
    fn default() -> Self {
        Self {
            base: 1.0,
            per_prefill: 0.0,
            per_decode: 0.0,
        }
    }
}

impl SlotCostModel {
    pub fn new(base: f64, per_prefill: f64, per_decode: f64) -> Result<Self> {
        let m = Self {
            base,
            per_prefill,
            per_decode,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("base", self.base),
            ("per_prefill", self.per_prefill),
            ("per_decode", self.per_decode),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("slot cost `{name}` must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_unit(&self) -> bool {
        *self == Self::default()
    }
}

pub fn slot_cost(prefill_tokens: Tokens, decode_tokens: Tokens, model: &SlotCostModel) -> f64 {
    model.base + model.per_prefill * prefill_tokens as f64 + model.per_decode * decode_tokens as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    pub record_events: bool,
    pub slot_cost: SlotCostModel,
    /// Number of request classes to track per-class queue lengths for.
    pub class_count: usize,
}

/// Per-slot series, indexed by `t - 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Series {
    /// Peak usage `U_t`.
    pub usage: Vec<Tokens>,
    /// Waiting requests at the end of the slot.
    pub waiting: Vec<u64>,
    /// Requests that decoded in the slot.
    pub active: Vec<u64>,
    /// Waiting plus still-active requests at the end of the slot.
    pub unfinished: Vec<u64>,
    /// Activation budget drawn for the slot, for policies that draw one.
    pub budget: Vec<Option<u32>>,
    /// `class_waiting[k][t - 1]`: class-`k` requests waiting at the end of slot `t`.
    pub class_waiting: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub total_arrivals: u64,
    pub activations: u64,
    pub overflow_events: u64,
    pub evictions: u64,
    pub wasted_tokens: u64,
    pub completed: u64,
    pub generated_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub policy: String,
    pub seed: u64,
    pub kv_capacity: Tokens,
    pub horizon: Slot,
    pub series: Series,
    pub counters: Counters,
    /// Total wall time under the slot cost model.
    pub wall_time: f64,
    pub slot_cost: SlotCostModel,
    pub final_state: SimSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<EventLog>,
}

impl RunResult {
    pub fn max_usage(&self) -> Tokens {
        self.series.usage.iter().copied().max().unwrap_or(0)
    }
}

/// What happened in one slot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotOutcome {
    pub slot: Slot,
    pub activated: Vec<RequestId>,
    pub evicted: Vec<RequestId>,
    pub completed: Vec<RequestId>,
    pub usage: Tokens,
}

pub struct Engine {
    state: SimState,
    policy: Box<dyn Policy>,
    rng: SimRng,
    options: EngineOptions,
    events: Option<EventLog>,
    series: Series,
    counters: Counters,
    wall_time: f64,
}

impl Engine {
    pub fn new(kv_capacity: Tokens, seed: u64, policy: Box<dyn Policy>, options: EngineOptions) -> Result<Self> {
        if kv_capacity == 0 {
            return Err(Error::Config("kv_capacity must be positive".into()));
        }
        options.slot_cost.validate()?;
        let state = SimState::with_indexes(kv_capacity, seed, policy.indexes());
        Ok(Self::with_state(state, policy, options))
    }

    /// Starts from an existing state, e.g. one with resident requests.
    pub fn with_state(state: SimState, policy: Box<dyn Policy>, options: EngineOptions) -> Self {
        let seed = state.rng_seed();
        Self {
            state,
            policy,
            rng: SimRng::new(seed, POLICY_STREAM),
            events: options.record_events.then(EventLog::default),
            series: Series {
                class_waiting: vec![Vec::new(); options.class_count],
                ..Default::default()
            },
            options,
            counters: Counters::default(),
            wall_time: 0.0,
        }
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    fn log(&mut self, event: EventKind, id: Option<RequestId>, usage: Tokens) {
        if let Some(log) = &mut self.events {
            log.push(self.state.clock(), event, id, usage);
        }
    }

    /// Advances one slot. `arrivals` must all carry the new slot number.
    pub fn step(&mut self, arrivals: Vec<Request>) -> Result<SlotOutcome> {
        let t = self.state.advance_clock();
        let capacity = self.state.kv_capacity();

        for r in arrivals {
            if r.arrival_slot != t {
                return Err(Error::ArrivalOutOfOrder {
                    id: r.id,
                    arrival: r.arrival_slot,
                    clock: t,
                });
            }
            if r.prompt_len + 1 > capacity {
                return Err(Error::OversizedRequest {
                    id: r.id,
                    needed: r.prompt_len + 1,
                    capacity,
                });
            }
            let id = r.id;
            self.state.enqueue(r)?;
            self.counters.total_arrivals += 1;
            self.log(EventKind::Arrive, Some(id), self.state.usage());
        }

        let decision = self.policy.decide(&PolicyView::new(&self.state), &mut self.rng)?;
        let mut prefill = 0;
        for &id in &decision.activate {
            prefill += self.state.activate(id)?.request.prompt_len;
            self.counters.activations += 1;
            self.log(EventKind::Activate, Some(id), self.state.usage());
        }

        let mut evicted = Vec::new();
        let mut overflowed = false;
        loop {
            let projected = self.state.projected_usage();
            if projected <= capacity {
                break;
            }
            if !overflowed {
                overflowed = true;
                self.counters.overflow_events += 1;
                self.log(EventKind::Overflow, None, projected);
            }
            let eviction = self.policy.evict(&PolicyView::new(&self.state), projected - capacity)?;
            if eviction.evict.is_empty() {
                return Err(Error::PolicyBug(format!(
                    "{} evicted nothing while {projected} tokens exceed capacity {capacity} at slot {t}",
                    self.policy.name()
                )));
            }
            let wasted = self.state.evict(&eviction.evict)?;
            for (&id, g) in eviction.evict.iter().zip(wasted) {
                self.counters.evictions += 1;
                self.counters.wasted_tokens += g;
                self.log(EventKind::Evict, Some(id), self.state.usage());
            }
            evicted.extend(eviction.evict);
        }

        let batch = self.state.active_len() as u64;
        if self.events.is_some() {
            let mut usage = self.state.usage();
            let ids: Vec<RequestId> = self.state.active().map(|e| e.request.id).collect();
            for id in ids {
                usage += 1;
                self.log(EventKind::DecodeStep, Some(id), usage);
            }
        }
        self.state.decode_all();
        self.counters.generated_tokens += batch;
        let usage = self.state.usage();

        let completed = self.state.complete_finished();
        self.counters.completed += completed.len() as u64;
        if self.events.is_some() {
            // Report usage as each completion releases its memory.
            let mut remaining = usage;
            for &id in &completed {
                let e = self.state.entry(id).expect("completed request exists");
                remaining -= e.request.prompt_len + e.state.generated;
                self.log(EventKind::Complete, Some(id), remaining);
            }
        }

        self.wall_time += slot_cost(prefill, batch, &self.options.slot_cost);
        let waiting = self.state.waiting_len() as u64;
        self.series.usage.push(usage);
        self.series.waiting.push(waiting);
        self.series.active.push(batch);
        self.series.unfinished.push(waiting + self.state.active_len() as u64);
        self.series.budget.push(self.policy.last_budget());
        for (k, s) in self.series.class_waiting.iter_mut().enumerate() {
            s.push(self.state.waiting_in_class_len(k as u32) as u64);
        }

        Ok(SlotOutcome {
            slot: t,
            activated: decision.activate,
            evicted,
            completed,
            usage,
        })
    }

    pub fn into_result(self) -> RunResult {
        RunResult {
            policy: self.policy.name().to_string(),
            seed: self.state.rng_seed(),
            kv_capacity: self.state.kv_capacity(),
            horizon: self.state.clock(),
            series: self.series,
            counters: self.counters,
            wall_time: self.wall_time,
            slot_cost: self.options.slot_cost,
            final_state: self.state.snapshot(),
            events: self.events,
        }
    }
}

/// Runs `policy` over a prepared arrival stream.
pub fn run_stream(
    stream: &ArrivalStream,
    policy: Box<dyn Policy>,
    kv_capacity: Tokens,
    seed: u64,
    options: EngineOptions,
) -> Result<RunResult> {
    let mut engine = Engine::new(kv_capacity, seed, policy, options)?;
    for arrivals in &stream.slots {
        engine.step(arrivals.clone())?;
    }
    Ok(engine.into_result())
}

/// What a policy may assume about a generated stream.
pub fn policy_context(spec: &WorkloadSpec, stream: &ArrivalStream) -> Result<PolicyContext> {
    Ok(PolicyContext {
        class_count: spec.classes()?.len(),
        output_known: spec.output_known(),
        min_output: stream.slots.iter().flatten().map(|r| r.decode_len).min(),
    })
}

/// Builds a policy for a stream. The oracle is solved on the stream itself.
pub fn build_policy(
    config: &PolicyConfig,
    ctx: &PolicyContext,
    stream: &ArrivalStream,
    kv_capacity: Tokens,
) -> Result<Box<dyn Policy>> {
    if let Some(reason) = config.inapplicable_reason(ctx) {
        return Err(Error::Config(format!("{} is not applicable: {reason}", config.label())));
    }
    match config {
        PolicyConfig::Oracle { objective } => {
            let instance = crate::oracle::OfflineInstance::from_stream(stream, kv_capacity, *objective)?;
            let solution = crate::oracle::solve(&instance)?;
            Ok(Box::new(solution.policy()))
        }
        other => other.build(ctx),
    }
}

/// Generates arrivals for `seed` and runs the configured policy over them.
pub fn run(
    spec: &WorkloadSpec,
    policy: &PolicyConfig,
    kv_capacity: Tokens,
    seed: u64,
    options: EngineOptions,
) -> Result<RunResult> {
    let stream = generate_arrivals(spec, seed)?;
    let ctx = policy_context(spec, &stream)?;
    let built = build_policy(policy, &ctx, &stream, kv_capacity)?;
    let options = EngineOptions {
        class_count: ctx.class_count,
        ..options
    };
    run_stream(&stream, built, kv_capacity, seed, options)
}
