//! Flow-controlled admission: cap how many requests join the active set each
//! slot.
//!
//! With known output lengths every class `k` gets an integer budget `b_k` and
//! is served FIFO within the class. With unknown output lengths a single
//! budget `B_t` is drawn each slot, requests are served FIFO regardless of
//! class, and overflow is resolved by evicting the most recently activated
//! requests first.

use super::{ActivationDecision, BudgetSpec, EvictionDecision, Policy, PolicyView};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::state::WaitingIndexes;
use crate::types::{RequestId, Tokens};

/// Evicts from the end of `active` (activation order, most recent last) until
/// the released footprint covers `required_release`. Stops as soon as it does.
pub fn lifo_evict(active: &[(RequestId, Tokens)], required_release: Tokens) -> Result<EvictionDecision> {
    let mut decision = EvictionDecision::default();
    let mut released = 0;
    for &(id, footprint) in active.iter().rev() {
        if released >= required_release {
            break;
        }
        decision.evict.push(id);
        released += footprint;
    }
    if released < required_release {
        return Err(Error::NothingToEvict {
            required: required_release - released,
        });
    }
    Ok(decision)
}

fn lifo_from_view(view: &PolicyView<'_>, required_release: Tokens) -> Result<EvictionDecision> {
    let active: Vec<_> = view.active().map(|a| (a.id, a.slot_footprint())).collect();
    lifo_evict(&active, required_release)
}

#[derive(Debug, Clone)]
pub struct FlowControlKnown {
    budgets: Vec<u32>,
}

impl FlowControlKnown {
    pub fn new(budgets: Vec<u32>) -> Result<Self> {
        match BudgetSpec::per_class(budgets)? {
            BudgetSpec::PerClass(budgets) => Ok(Self { budgets }),
            BudgetSpec::Scalar { .. } => unreachable!(),
        }
    }
}

impl Policy for FlowControlKnown {
    fn name(&self) -> &'static str {
        "flow-known"
    }

    fn indexes(&self) -> WaitingIndexes {
        WaitingIndexes {
            by_class: true,
            ..WaitingIndexes::NONE
        }
    }

    fn decide(&mut self, view: &PolicyView<'_>, _rng: &mut SimRng) -> Result<ActivationDecision> {
        if !view.all_waiting_outputs_known() {
            return Err(Error::OutputsUnknown { policy: self.name() });
        }
        let classified: usize = (0..self.budgets.len() as u32)
            .map(|k| view.waiting_in_class_len(k))
            .sum();
        if classified != view.waiting_len() {
            let stray = view
                .waiting()
                .find(|w| w.class_id.is_none_or(|k| k as usize >= self.budgets.len()))
                .expect("some waiting request lacks a budgeted class");
            return Err(Error::UnknownClass {
                id: stray.id,
                class: stray.class_id,
            });
        }
        let mut decision = ActivationDecision::default();
        for (k, &b) in self.budgets.iter().enumerate() {
            decision
                .activate
                .extend(view.waiting_in_class(k as u32).take(b as usize).map(|w| w.id));
        }
        Ok(decision)
    }

    // Never reached while the budgeted load stays below capacity; otherwise
    // fall back to the same LIFO rule as the unknown-length variant.
    fn evict(&mut self, view: &PolicyView<'_>, required_release: Tokens) -> Result<EvictionDecision> {
        lifo_from_view(view, required_release)
    }
}

#[derive(Debug, Clone)]
pub struct FlowControlUnknown {
    b: f64,
    cap: u32,
    last: Option<u32>,
}

impl FlowControlUnknown {
    pub fn new(b: f64, cap: Option<u32>) -> Result<Self> {
        match BudgetSpec::scalar(b, cap)? {
            BudgetSpec::Scalar { b, cap } => Ok(Self { b, cap, last: None }),
            BudgetSpec::PerClass(_) => unreachable!(),
        }
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }

    /// `B_t = floor(b) + Bernoulli(b - floor(b))`.
    pub fn draw_budget(&self, rng: &mut SimRng) -> u32 {
        let base = self.b.floor();
        let frac = self.b - base;
        let extra = if frac > 0.0 && rng.bernoulli(frac) { 1 } else { 0 };
        (base as u32 + extra).min(self.cap)
    }
}

impl Policy for FlowControlUnknown {
    fn name(&self) -> &'static str {
        "flow-unknown"
    }

    fn decide(&mut self, view: &PolicyView<'_>, rng: &mut SimRng) -> Result<ActivationDecision> {
        let budget = self.draw_budget(rng);
        self.last = Some(budget);
        Ok(ActivationDecision {
            activate: view.waiting().take(budget as usize).map(|w| w.id).collect(),
        })
    }

    fn evict(&mut self, view: &PolicyView<'_>, required_release: Tokens) -> Result<EvictionDecision> {
        lifo_from_view(view, required_release)
    }

    fn last_budget(&self) -> Option<u32> {
        self.last
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;

    fn rng() -> SimRng {
        SimRng::new(3, 1)
    }

    #[test]
    fn known_takes_first_b_of_class() {
        let waiting = (0..6).map(|i| req(i, 10, 20).with_class(0)).collect();
        let s = state_with(10_000, 1, waiting, vec![]);
        let mut p = FlowControlKnown::new(vec![4]).unwrap();
        let d = p.decide(&PolicyView::new(&s), &mut rng()).unwrap();
        assert_eq!(d.activate, vec![0, 1, 2, 3]);
    }

    #[test]
    fn known_empty_queue() {
        let s = state_with(10_000, 1, vec![], vec![]);
        let mut p = FlowControlKnown::new(vec![4, 4]).unwrap();
        assert!(p.decide(&PolicyView::new(&s), &mut rng()).unwrap().activate.is_empty());
    }

    #[test]
    fn known_budgets_are_per_class() {
        let mut waiting: Vec<_> = (0..2).map(|i| req(i, 10, 20).with_class(0)).collect();
        waiting.extend((2..7).map(|i| req(i, 10, 40).with_class(1)));
        let s = state_with(10_000, 1, waiting, vec![]);
        let mut p = FlowControlKnown::new(vec![4, 4]).unwrap();
        let d = p.decide(&PolicyView::new(&s), &mut rng()).unwrap();
        assert_eq!(d.activate, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn known_rejects_unbudgeted_class() {
        let s = state_with(100, 1, vec![req(9, 1, 1).with_class(5)], vec![]);
        let mut p = FlowControlKnown::new(vec![1]).unwrap();
        let err = p.decide(&PolicyView::new(&s), &mut rng()).unwrap_err();
        assert!(matches!(err, Error::UnknownClass { id: 9, class: Some(5) }));
        let s = state_with(100, 1, vec![req(9, 1, 1)], vec![]);
        assert!(matches!(
            p.decide(&PolicyView::new(&s), &mut rng()),
            Err(Error::UnknownClass { class: None, .. })
        ));
    }

    #[test]
    fn unknown_integral_budget_is_deterministic() {
        let waiting = (0..10).map(|i| req(i, 10, 20).with_output_known(false)).collect();
        let s = state_with(10_000, 1, waiting, vec![]);
        let mut p = FlowControlUnknown::new(4.0, None).unwrap();
        let mut r = rng();
        for _ in 0..20 {
            let d = p.decide(&PolicyView::new(&s), &mut r).unwrap();
            assert_eq!(d.activate, vec![0, 1, 2, 3]);
            assert_eq!(p.last_budget(), Some(4));
        }
    }

    #[test]
    fn unknown_fractional_budget_mean() {
        let p = FlowControlUnknown::new(2.5, Some(3)).unwrap();
        let mut r = rng();
        let n = 100_000;
        let mut sum = 0u64;
        for _ in 0..n {
            let bt = p.draw_budget(&mut r);
            assert!(bt == 2 || bt == 3);
            sum += bt as u64;
        }
        let mean = sum as f64 / n as f64;
        let se = (0.25f64 / n as f64).sqrt();
        assert!((mean - 2.5).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn unknown_empty_queue() {
        let s = state_with(100, 1, vec![], vec![]);
        let mut p = FlowControlUnknown::new(7.0, None).unwrap();
        assert!(p.decide(&PolicyView::new(&s), &mut rng()).unwrap().activate.is_empty());
    }

    #[test]
    fn lifo_examples() {
        let active = [(1, 30), (2, 20), (3, 10)];
        assert_eq!(lifo_evict(&active, 25).unwrap().evict, vec![3, 2]);
        assert_eq!(lifo_evict(&[(1, 40), (2, 10)], 5).unwrap().evict, vec![2]);
        assert!(lifo_evict(&active, 0).unwrap().evict.is_empty());
        assert!(matches!(lifo_evict(&[], 3), Err(Error::NothingToEvict { .. })));
    }

    #[test]
    fn lifo_uses_slot_footprint() {
        // Footprints l + g + 1: 30, 20, 10.
        let s = state_with(
            1000,
            1,
            vec![],
            vec![(req(1, 20, 50), 9), (req(2, 15, 50), 4), (req(3, 9, 50), 0)],
        );
        let mut p = FlowControlUnknown::new(1.0, None).unwrap();
        assert_eq!(p.evict(&PolicyView::new(&s), 25).unwrap().evict, vec![3, 2]);
    }
}
