//! Scheduling policies.
//!
//! A policy sees the simulator through a [`PolicyView`], which hides decode
//! lengths of requests whose output length is unknown. Each slot the engine
//! asks once for an [`ActivationDecision`]; if the projected end-of-slot usage
//! exceeds the capacity it asks for an [`EvictionDecision`] until the slot is
//! feasible.

mod amin;
mod fixed;
mod flow;
mod greedy;
mod mc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Objective;
use crate::rng::SimRng;
use crate::state::{Entry, SimState, WaitingIndexes};
use crate::types::{RequestId, Slot, Tokens};

pub use amin::Amin;
pub use fixed::{FixedSchedule, Idle};
pub use flow::{lifo_evict, FlowControlKnown, FlowControlUnknown};
pub use greedy::{evict_all, AlphaProtection};
pub use mc::{McShortestFirst, MemoryConstrained};

/// A waiting request as a policy sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaitingView {
    pub id: RequestId,
    pub prompt_len: Tokens,
    pub class_id: Option<u32>,
    /// `None` when the output length is not known in advance.
    pub decode_len: Option<Tokens>,
    pub arrival_slot: Slot,
}

/// An active request as a policy sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveView {
    pub id: RequestId,
    pub prompt_len: Tokens,
    pub generated: Tokens,
    pub activation_slot: Slot,
    pub decode_len: Option<Tokens>,
}

impl ActiveView {
    /// What this request adds to the projected usage of the current slot.
    pub fn slot_footprint(&self) -> Tokens {
        self.prompt_len + self.generated + 1
    }
}

fn waiting_view(e: &Entry) -> WaitingView {
    WaitingView {
        id: e.request.id,
        prompt_len: e.request.prompt_len,
        class_id: e.request.class_id,
        decode_len: e.request.output_known.then_some(e.request.decode_len),
        arrival_slot: e.request.arrival_slot,
    }
}

fn active_view(e: &Entry) -> ActiveView {
    ActiveView {
        id: e.request.id,
        prompt_len: e.request.prompt_len,
        generated: e.state.generated,
        activation_slot: e.state.activation_slot.unwrap_or_default(),
        decode_len: e.request.output_known.then_some(e.request.decode_len),
    }
}

/// Read-only window onto the simulator state.
#[derive(Clone, Copy)]
pub struct PolicyView<'a> {
    state: &'a SimState,
}

impl<'a> PolicyView<'a> {
    pub fn new(state: &'a SimState) -> Self {
        Self { state }
    }

    pub fn clock(&self) -> Slot {
        self.state.clock()
    }

    pub fn kv_capacity(&self) -> Tokens {
        self.state.kv_capacity()
    }

    /// Resident usage before this slot's decode step.
    pub fn current_usage(&self) -> Tokens {
        self.state.usage()
    }

    pub fn waiting_len(&self) -> usize {
        self.state.waiting_len()
    }

    pub fn active_len(&self) -> usize {
        self.state.active_len()
    }

    /// Waiting requests in FIFO order by `(arrival_slot, id)`.
    pub fn waiting(&self) -> impl DoubleEndedIterator<Item = WaitingView> + 'a {
        self.state.waiting().map(waiting_view)
    }

    pub fn waiting_in_class(&self, class: u32) -> impl Iterator<Item = WaitingView> + 'a {
        self.state.waiting_in_class(class).map(waiting_view)
    }

    pub fn waiting_in_class_len(&self, class: u32) -> usize {
        self.state.waiting_in_class_len(class)
    }

    /// Waiting requests ordered by ascending decode length, or `None` if any
    /// waiting request has an unknown output length.
    pub fn waiting_by_decode_len(&self) -> Option<impl Iterator<Item = WaitingView> + 'a> {
        (self.state.waiting_known_len() == self.state.waiting_len())
            .then(|| self.state.waiting_by_decode_len().map(waiting_view))
    }

    pub fn all_waiting_outputs_known(&self) -> bool {
        self.state.waiting_known_len() == self.state.waiting_len()
    }

    pub fn min_waiting_prompt(&self) -> Option<Tokens> {
        self.state.min_waiting_prompt()
    }

    /// Active requests in activation order, most recent last.
    pub fn active(&self) -> impl DoubleEndedIterator<Item = ActiveView> + ExactSizeIterator + 'a {
        self.state.active().map(active_view)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationDecision {
    /// Requests to activate, in activation order.
    pub activate: Vec<RequestId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionDecision {
    pub evict: Vec<RequestId>,
}

/// Activation budgets for the flow-control policies.
#[derive(Debug, Clone, PartialEq)]
pub enum BudgetSpec {
    /// Integer budget `b_k` per class.
    PerClass(Vec<u32>),
    /// Random budget `B_t` with mean `b` and `B_t <= cap`.
    Scalar { b: f64, cap: u32 },
}

impl BudgetSpec {
    pub fn per_class(budgets: Vec<u32>) -> Result<Self> {
        if budgets.is_empty() {
            return Err(Error::Config("per-class budgets are empty".into()));
        }
        if let Some(k) = budgets.iter().position(|&b| b == 0) {
            return Err(Error::Config(format!("budget for class {k} must be at least 1")));
        }
        Ok(BudgetSpec::PerClass(budgets))
    }

    /// `cap` defaults to `ceil(b)`, the smallest cap the two-point budget
    /// distribution can satisfy.
    pub fn scalar(b: f64, cap: Option<u32>) -> Result<Self> {
        if !b.is_finite() || b < 0.0 {
            return Err(Error::Config(format!("scalar budget {b} must be finite and non-negative")));
        }
        let ceil = b.ceil() as u32;
        let cap = cap.unwrap_or(ceil);
        if cap < ceil {
            return Err(Error::Config(format!("budget cap {cap} is below ceil(b) = {ceil}")));
        }
        Ok(BudgetSpec::Scalar { b, cap })
    }
}

pub trait Policy: Send {
    fn name(&self) -> &'static str;

    fn decide(&mut self, view: &PolicyView<'_>, rng: &mut SimRng) -> Result<ActivationDecision>;

    /// Called when the projected end-of-slot usage exceeds the capacity by
    /// `required_release` tokens.
    fn evict(&mut self, view: &PolicyView<'_>, required_release: Tokens) -> Result<EvictionDecision>;

    /// Activation budget drawn for the current slot, if the policy has one.
    fn last_budget(&self) -> Option<u32> {
        None
    }

    /// Waiting-queue indexes this policy queries often.
    fn indexes(&self) -> WaitingIndexes {
        WaitingIndexes::NONE
    }
}

/// Policy selection as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicyConfig {
    /// Per-class flow control for known output lengths.
    FlowKnown { budgets: Vec<u32> },
    /// Scalar flow control with LIFO eviction for unknown output lengths.
    FlowUnknown {
        b: f64,
        #[serde(default)]
        cap: Option<u32>,
    },
    AlphaProtection { alpha: f64 },
    Mc {
        #[serde(default)]
        assume_max_output: Option<Tokens>,
    },
    McSf,
    Amin {
        #[serde(default)]
        o_min: Option<Tokens>,
    },
    /// Replays the hindsight-optimal schedule (small instances only).
    Oracle { objective: Objective },
}

/// What a policy may need to know about the workload when it is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyContext {
    pub class_count: usize,
    pub output_known: bool,
    pub min_output: Option<Tokens>,
}

impl PolicyConfig {
    pub fn label(&self) -> String {
        match self {
            PolicyConfig::FlowKnown { budgets } => format!(
                "flow-known[{}]",
                budgets.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
            ),
            PolicyConfig::FlowUnknown { b, .. } => format!("flow-unknown[b={b}]"),
            PolicyConfig::AlphaProtection { alpha } => format!("alpha-protection[{alpha}]"),
            PolicyConfig::Mc { .. } => "mc".into(),
            PolicyConfig::McSf => "mc-sf".into(),
            PolicyConfig::Amin { .. } => "amin".into(),
            PolicyConfig::Oracle { objective } => format!("oracle[{}]", objective.as_str()),
        }
    }

    /// Why this policy cannot run on the given workload, if it cannot.
    pub fn inapplicable_reason(&self, ctx: &PolicyContext) -> Option<String> {
        match self {
            PolicyConfig::McSf if !ctx.output_known => {
                Some("needs decode lengths, which are unknown in this workload".into())
            }
            PolicyConfig::FlowKnown { .. } if !ctx.output_known => {
                Some("needs request classes with known lengths".into())
            }
            PolicyConfig::FlowKnown { .. } if ctx.class_count == 0 => {
                Some("workload has no request classes".into())
            }
            PolicyConfig::Oracle { .. } if !ctx.output_known => {
                Some("hindsight schedules need known lengths".into())
            }
            _ => None,
        }
    }

    pub fn validate(&self, ctx: &PolicyContext) -> Result<()> {
        match self {
            PolicyConfig::FlowKnown { budgets } => {
                BudgetSpec::per_class(budgets.clone())?;
                if ctx.class_count > 0 && budgets.len() != ctx.class_count {
                    return Err(Error::Config(format!(
                        "flow-known has {} budgets for {} classes",
                        budgets.len(),
                        ctx.class_count
                    )));
                }
            }
            PolicyConfig::FlowUnknown { b, cap } => {
                BudgetSpec::scalar(*b, *cap)?;
            }
            PolicyConfig::AlphaProtection { alpha } => {
                if !(0.0..1.0).contains(alpha) {
                    return Err(Error::Config(format!("alpha {alpha} must lie in [0, 1)")));
                }
            }
            PolicyConfig::Mc { assume_max_output } => {
                if !ctx.output_known && assume_max_output.is_none() {
                    return Err(Error::Config(
                        "mc needs assume_max_output when output lengths are unknown".into(),
                    ));
                }
                if *assume_max_output == Some(0) {
                    return Err(Error::Config("assume_max_output must be positive".into()));
                }
            }
            PolicyConfig::Amin { o_min } => {
                if *o_min == Some(0) {
                    return Err(Error::Config("o_min must be at least 1".into()));
                }
            }
            PolicyConfig::McSf | PolicyConfig::Oracle { .. } => {}
        }
        Ok(())
    }

    /// Builds the policy. The oracle is built by the experiment layer since it
    /// needs the whole arrival stream.
    pub fn build(&self, ctx: &PolicyContext) -> Result<Box<dyn Policy>> {
        self.validate(ctx)?;
        Ok(match self {
            PolicyConfig::FlowKnown { budgets } => Box::new(FlowControlKnown::new(budgets.clone())?),
            PolicyConfig::FlowUnknown { b, cap } => Box::new(FlowControlUnknown::new(*b, *cap)?),
            PolicyConfig::AlphaProtection { alpha } => Box::new(AlphaProtection::new(*alpha)?),
            PolicyConfig::Mc { assume_max_output } => Box::new(MemoryConstrained::new(*assume_max_output)),
            PolicyConfig::McSf => Box::new(McShortestFirst::new()),
            PolicyConfig::Amin { o_min } => {
                Box::new(Amin::new(o_min.or(ctx.min_output).unwrap_or(1))?)
            }
            PolicyConfig::Oracle { .. } => {
                return Err(Error::Config("the oracle policy is built from a solved instance".into()))
            }
        })
    }
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    #[test]
    fn view_hides_unknown_decode_len() {
        let s = state_with(
            100,
            1,
            vec![req(1, 5, 7).with_output_known(false), req(2, 5, 9)],
            vec![(req(3, 4, 6).with_output_known(false), 2)],
        );
        let v = PolicyView::new(&s);
        let w: Vec<_> = v.waiting().collect();
        assert_eq!(w[0].decode_len, None);
        assert_eq!(w[1].decode_len, Some(9));
        assert_eq!(v.active().next().unwrap().decode_len, None);
        assert!(v.waiting_by_decode_len().is_none());
        assert_eq!(v.current_usage(), 6);
    }

    #[test]
    fn budget_spec_validation() {
        assert!(BudgetSpec::per_class(vec![4, 0]).is_err());
        assert!(BudgetSpec::per_class(vec![]).is_err());
        assert_eq!(
            BudgetSpec::scalar(2.5, None).unwrap(),
            BudgetSpec::Scalar { b: 2.5, cap: 3 }
        );
        assert!(BudgetSpec::scalar(2.5, Some(2)).is_err());
        assert!(BudgetSpec::scalar(f64::NAN, None).is_err());
    }

    #[test]
    fn config_parsing() {
        let c: PolicyConfig = serde_json::from_str(r#"{"name":"mc-sf"}"#).unwrap();
        assert_eq!(c, PolicyConfig::McSf);
        let c: PolicyConfig =
            serde_json::from_str(r#"{"name":"flow-unknown","b":2.5}"#).unwrap();
        assert_eq!(c, PolicyConfig::FlowUnknown { b: 2.5, cap: None });
        let c: PolicyConfig =
            serde_json::from_str(r#"{"name":"flow-known","budgets":[4,4,4]}"#).unwrap();
        assert_eq!(c.label(), "flow-known[4,4,4]");
        assert!(serde_json::from_str::<PolicyConfig>(r#"{"name":"fifo"}"#).is_err());
    }

    #[test]
    fn applicability() {
        let unknown = PolicyContext {
            class_count: 3,
            output_known: false,
            min_output: None,
        };
        assert!(PolicyConfig::McSf.inapplicable_reason(&unknown).is_some());
        assert!(PolicyConfig::Amin { o_min: None }.inapplicable_reason(&unknown).is_none());
        assert!(PolicyConfig::Mc { assume_max_output: None }.validate(&unknown).is_err());
        assert!(PolicyConfig::AlphaProtection { alpha: 1.0 }.validate(&unknown).is_err());
    }
}
