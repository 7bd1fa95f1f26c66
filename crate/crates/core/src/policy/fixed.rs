use std::collections::HashMap;

use super::{ActivationDecision, EvictionDecision, Policy, PolicyView};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::types::{RequestId, Slot, Tokens};

/// Activates each request at a preassigned slot. Used to replay offline
/// schedules; an overflow means the schedule was infeasible.
#[derive(Debug, Clone, Default)]
pub struct FixedSchedule {
    slots: HashMap<RequestId, Slot>,
}

impl FixedSchedule {
    pub fn new(assignments: impl IntoIterator<Item = (RequestId, Slot)>) -> Self {
        Self {
            slots: assignments.into_iter().collect(),
        }
    }
}

impl Policy for FixedSchedule {
    fn name(&self) -> &'static str {
        "fixed-schedule"
    }

    fn decide(&mut self, view: &PolicyView<'_>, _rng: &mut SimRng) -> Result<ActivationDecision> {
        let now = view.clock();
        Ok(ActivationDecision {
            activate: view
                .waiting()
                .filter(|w| self.slots.get(&w.id) == Some(&now))
                .map(|w| w.id)
                .collect(),
        })
    }

    fn evict(&mut self, view: &PolicyView<'_>, required_release: Tokens) -> Result<EvictionDecision> {
        Err(Error::PolicyBug(format!(
            "fixed schedule overflows by {required_release} tokens at slot {}",
            view.clock()
        )))
    }
}

/// Never activates anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct Idle;

impl Policy for Idle {
    fn name(&self) -> &'static str {
        "idle"
    }

    fn decide(&mut self, _view: &PolicyView<'_>, _rng: &mut SimRng) -> Result<ActivationDecision> {
        Ok(ActivationDecision::default())
    }

    fn evict(&mut self, _view: &PolicyView<'_>, required_release: Tokens) -> Result<EvictionDecision> {
        Err(Error::NothingToEvict {
            required: required_release,
        })
    }
}
