//! Memory-constrained admission: a request is activated only if the projected
//! usage over its whole lifetime stays within the cache.

use super::flow::lifo_evict;
use super::{ActivationDecision, EvictionDecision, Policy, PolicyView};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::state::WaitingIndexes;
use crate::types::{Projection, Tokens};

/// `(prompt_len, decode_len)` pairs that failed the feasibility check this
/// slot. Anything at least as long on both axes fails too, since admissions
/// only ever raise the projection.
#[derive(Debug, Default)]
pub(super) struct Rejections {
    failed: Vec<(Tokens, Tokens)>,
}

impl Rejections {
    pub(super) fn dominated(&self, prompt_len: Tokens, decode_len: Tokens) -> bool {
        self.failed.iter().any(|&(l, o)| l <= prompt_len && o <= decode_len)
    }

    pub(super) fn record(&mut self, prompt_len: Tokens, decode_len: Tokens) {
        if !self.dominated(prompt_len, decode_len) {
            self.failed.retain(|&(l, o)| !(prompt_len <= l && decode_len <= o));
            self.failed.push((prompt_len, decode_len));
        }
    }
}

fn active_projection(view: &PolicyView<'_>, assumed: Option<Tokens>, policy: &'static str) -> Result<Projection> {
    let mut projection = Projection::new();
    for a in view.active() {
        let total = a
            .decode_len
            .or(assumed)
            .ok_or(Error::OutputsUnknown { policy })?;
        // A request that outlived the assumed length still needs this slot.
        projection.add(a.prompt_len, a.generated, total.max(a.generated + 1));
    }
    Ok(projection)
}

fn lifo_fallback(view: &PolicyView<'_>, required_release: Tokens) -> Result<EvictionDecision> {
    let active: Vec<_> = view.active().map(|a| (a.id, a.slot_footprint())).collect();
    lifo_evict(&active, required_release)
}

/// FCFS admission with a lifetime feasibility check. With unknown output
/// lengths every request is assumed to run for `assume_max_output` tokens.
#[derive(Debug, Clone)]
pub struct MemoryConstrained {
    assume_max_output: Option<Tokens>,
}

impl MemoryConstrained {
    pub fn new(assume_max_output: Option<Tokens>) -> Self {
        Self { assume_max_output }
    }
}

impl Policy for MemoryConstrained {
    fn name(&self) -> &'static str {
        "mc"
    }

    fn decide(&mut self, view: &PolicyView<'_>, _rng: &mut SimRng) -> Result<ActivationDecision> {
        let capacity = view.kv_capacity();
        let mut projection = active_projection(view, self.assume_max_output, self.name())?;
        let mut decision = ActivationDecision::default();
        for w in view.waiting() {
            let o = w
                .decode_len
                .or(self.assume_max_output)
                .ok_or(Error::OutputsUnknown { policy: self.name() })?;
            if !projection.admits(w.prompt_len, o, capacity) {
                break;
            }
            projection.add(w.prompt_len, 0, o);
            decision.activate.push(w.id);
        }
        Ok(decision)
    }

    // Only reachable if a true output length exceeds the assumed maximum.
    fn evict(&mut self, view: &PolicyView<'_>, required_release: Tokens) -> Result<EvictionDecision> {
        lifo_fallback(view, required_release)
    }
}

/// Memory-constrained admission that scans shortest decode length first and
/// skips requests that do not fit.
#[derive(Debug, Clone, Default)]
pub struct McShortestFirst;

impl McShortestFirst {
    pub fn new() -> Self {
        Self
    }
}

impl Policy for McShortestFirst {
    fn name(&self) -> &'static str {
        "mc-sf"
    }

    fn indexes(&self) -> WaitingIndexes {
        WaitingIndexes {
            by_decode_len: true,
            prompt_lens: true,
            ..WaitingIndexes::NONE
        }
    }

    fn decide(&mut self, view: &PolicyView<'_>, _rng: &mut SimRng) -> Result<ActivationDecision> {
        let capacity = view.kv_capacity();
        let mut projection = active_projection(view, None, self.name())?;
        let candidates = view
            .waiting_by_decode_len()
            .ok_or(Error::OutputsUnknown { policy: self.name() })?;
        let min_prompt = view.min_waiting_prompt().unwrap_or(0);
        let mut rejections = Rejections::default();
        let mut decision = ActivationDecision::default();
        for w in candidates {
            let o = w.decode_len.expect("ordered by known decode length");
            // Candidates come in ascending o, so once the shortest prompt
            // fails at this o nothing later can fit.
            if rejections.dominated(min_prompt, o) {
                break;
            }
            if rejections.dominated(w.prompt_len, o) {
                continue;
            }
            if projection.admits(w.prompt_len, o, capacity) {
                projection.add(w.prompt_len, 0, o);
                decision.activate.push(w.id);
            } else {
                rejections.record(w.prompt_len, o);
            }
        }
        Ok(decision)
    }

    fn evict(&mut self, view: &PolicyView<'_>, required_release: Tokens) -> Result<EvictionDecision> {
        lifo_fallback(view, required_release)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;

    fn decide(p: &mut dyn Policy, s: &crate::state::SimState) -> Result<Vec<u64>> {
        p.decide(&PolicyView::new(s), &mut SimRng::new(0, 1)).map(|d| d.activate)
    }

    #[test]
    fn mc_admits_at_exact_peak() {
        let s = state_with(13, 1, vec![req(1, 10, 3)], vec![]);
        assert_eq!(decide(&mut MemoryConstrained::new(None), &s).unwrap(), vec![1]);
        let s = state_with(12, 1, vec![req(1, 10, 3)], vec![]);
        assert!(decide(&mut MemoryConstrained::new(None), &s).unwrap().is_empty());
    }

    #[test]
    fn mc_empty_waiting() {
        let s = state_with(12, 1, vec![], vec![]);
        assert!(decide(&mut MemoryConstrained::new(None), &s).unwrap().is_empty());
    }

    #[test]
    fn mc_accounts_for_active_growth() {
        // Active (l=10, g=1, o=3) projects [12, 13]; a fresh (l=5, o=2)
        // would add [6, 7] for a peak of 20.
        let s = state_with(20, 2, vec![req(2, 5, 2)], vec![(req(1, 10, 3), 1)]);
        assert_eq!(decide(&mut MemoryConstrained::new(None), &s).unwrap(), vec![2]);
        let s = state_with(19, 2, vec![req(2, 5, 2)], vec![(req(1, 10, 3), 1)]);
        assert!(decide(&mut MemoryConstrained::new(None), &s).unwrap().is_empty());
    }

    #[test]
    fn mc_stops_at_first_rejection() {
        let s = state_with(24, 1, vec![req(1, 20, 5), req(2, 1, 1)], vec![]);
        assert!(decide(&mut MemoryConstrained::new(None), &s).unwrap().is_empty());
    }

    #[test]
    fn mc_unknown_uses_assumed_length() {
        let s = state_with(25, 1, vec![req(1, 10, 1).with_output_known(false)], vec![]);
        assert!(matches!(
            decide(&mut MemoryConstrained::new(None), &s),
            Err(Error::OutputsUnknown { .. })
        ));
        // Assumed 20 tokens: peak 30 > 25.
        assert!(decide(&mut MemoryConstrained::new(Some(20)), &s).unwrap().is_empty());
        assert_eq!(decide(&mut MemoryConstrained::new(Some(15)), &s).unwrap(), vec![1]);
    }

    #[test]
    fn mcsf_prefers_short_and_skips() {
        // Capacity 35: (10, 60) peaks at 70, (10, 20) peaks at 30.
        let s = state_with(35, 1, vec![req(1, 10, 60), req(2, 10, 20)], vec![]);
        assert_eq!(decide(&mut McShortestFirst::new(), &s).unwrap(), vec![2]);
    }

    #[test]
    fn mcsf_skips_infeasible_head() {
        // Shortest first is (30, 5) which peaks at 35 > 32; the next fits.
        let s = state_with(32, 1, vec![req(1, 30, 5), req(2, 2, 6)], vec![]);
        assert_eq!(decide(&mut McShortestFirst::new(), &s).unwrap(), vec![2]);
    }

    #[test]
    fn mcsf_equal_lengths_is_fifo() {
        let s = state_with(1000, 1, vec![req(3, 5, 4), req(1, 5, 4), req(2, 5, 4)], vec![]);
        assert_eq!(decide(&mut McShortestFirst::new(), &s).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn mcsf_needs_known_lengths() {
        let s = state_with(1000, 1, vec![req(1, 5, 4).with_output_known(false)], vec![]);
        assert!(matches!(
            decide(&mut McShortestFirst::new(), &s),
            Err(Error::OutputsUnknown { .. })
        ));
        let s = state_with(1000, 1, vec![], vec![]);
        assert!(decide(&mut McShortestFirst::new(), &s).unwrap().is_empty());
    }

    #[test]
    fn rejection_frontier() {
        let mut r = Rejections::default();
        r.record(10, 20);
        assert!(r.dominated(10, 20));
        assert!(r.dominated(11, 30));
        assert!(!r.dominated(9, 30));
        r.record(5, 40);
        r.record(4, 10);
        assert!(r.dominated(5, 20));
        assert_eq!(r.failed.len(), 1);
    }
}
