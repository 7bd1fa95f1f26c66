use super::{ActivationDecision, EvictionDecision, Policy, PolicyView};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::types::{RequestId, Tokens};

/// Greedy admission that keeps `alpha * M` of the cache in reserve.
///
/// A waiting request is admitted if its initial footprint `l + 1`, added to
/// the current usage and the footprints admitted earlier in the slot, stays
/// within `(1 - alpha) * M`. The scan is FIFO and stops at the first request
/// that does not fit. On overflow every active request is evicted.
#[derive(Debug, Clone)]
pub struct AlphaProtection {
    alpha: f64,
}

impl AlphaProtection {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} must lie in [0, 1)")));
        }
        Ok(Self { alpha })
    }

    pub fn limit(&self, capacity: Tokens) -> Tokens {
        // The epsilon absorbs representation error, e.g. 0.9 * 100.
        ((1.0 - self.alpha) * capacity as f64 + 1e-9).floor() as Tokens
    }
}

/// Every active request, most recent first.
pub fn evict_all(active: &[RequestId]) -> Result<EvictionDecision> {
    if active.is_empty() {
        return Err(Error::NothingToEvict { required: 0 });
    }
    Ok(EvictionDecision {
        evict: active.iter().rev().copied().collect(),
    })
}

impl Policy for AlphaProtection {
    fn name(&self) -> &'static str {
        "alpha-protection"
    }

    fn decide(&mut self, view: &PolicyView<'_>, _rng: &mut SimRng) -> Result<ActivationDecision> {
        let limit = self.limit(view.kv_capacity());
        let mut total = view.current_usage();
        let mut decision = ActivationDecision::default();
        for w in view.waiting() {
            let initial = w.prompt_len + 1;
            if total + initial > limit {
                break;
            }
            total += initial;
            decision.activate.push(w.id);
        }
        Ok(decision)
    }

    fn evict(&mut self, view: &PolicyView<'_>, _required_release: Tokens) -> Result<EvictionDecision> {
        let active: Vec<_> = view.active().map(|a| a.id).collect();
        evict_all(&active)
    }
}
