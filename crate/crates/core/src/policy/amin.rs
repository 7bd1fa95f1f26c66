use std::collections::HashMap;

use super::mc::Rejections;
use super::{ActivationDecision, EvictionDecision, Policy, PolicyView};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::state::WaitingIndexes;
use crate::types::{Projection, RequestId, Tokens};

/// Optimistic admission for unknown output lengths.
///
/// Every request starts with a predicted output length of `o_min` and is
/// admitted greedily whenever the projection under the predictions fits.
/// On overflow requests are evicted in ascending order of prediction (most
/// recently activated first on ties), and an evicted request's prediction
/// grows to `max(2 * prediction, generated + 1)`.
#[derive(Debug, Clone)]
pub struct Amin {
    o_min: Tokens,
    predictions: HashMap<RequestId, Tokens>,
}

impl Amin {
    pub fn new(o_min: Tokens) -> Result<Self> {
        if o_min == 0 {
            return Err(Error::Config("o_min must be at least 1".into()));
        }
        Ok(Self {
            o_min,
            predictions: HashMap::new(),
        })
    }

    pub fn prediction(&self, id: RequestId) -> Tokens {
        self.predictions.get(&id).copied().unwrap_or(self.o_min)
    }

    pub fn updated_prediction(old: Tokens, generated: Tokens) -> Tokens {
        (2 * old).max(generated + 1)
    }
}

impl Policy for Amin {
    fn name(&self) -> &'static str {
        "amin"
    }

    fn indexes(&self) -> WaitingIndexes {
        WaitingIndexes {
            prompt_lens: true,
            ..WaitingIndexes::NONE
        }
    }

    fn decide(&mut self, view: &PolicyView<'_>, _rng: &mut SimRng) -> Result<ActivationDecision> {
        let capacity = view.kv_capacity();
        let mut projection = Projection::new();
        for a in view.active() {
            let predicted = self.prediction(a.id).max(a.generated + 1);
            projection.add(a.prompt_len, a.generated, predicted);
        }
        let min_prompt = view.min_waiting_prompt().unwrap_or(0);
        let mut rejections = Rejections::default();
        let mut decision = ActivationDecision::default();
        for w in view.waiting() {
            // Every waiting prediction is at least o_min.
            if rejections.dominated(min_prompt, self.o_min) {
                break;
            }
            let predicted = self.prediction(w.id);
            if rejections.dominated(w.prompt_len, predicted) {
                continue;
            }
            if projection.admits(w.prompt_len, predicted, capacity) {
                projection.add(w.prompt_len, 0, predicted);
                decision.activate.push(w.id);
            } else {
                rejections.record(w.prompt_len, predicted);
            }
        }
        Ok(decision)
    }

    fn evict(&mut self, view: &PolicyView<'_>, required_release: Tokens) -> Result<EvictionDecision> {
        let mut order: Vec<_> = view
            .active()
            .enumerate()
            .map(|(pos, a)| (self.prediction(a.id), std::cmp::Reverse(pos), a))
            .collect();
        order.sort_by_key(|&(p, pos, _)| (p, pos));
        let mut decision = EvictionDecision::default();
        let mut released = 0;
        for (predicted, _, a) in order {
            if released >= required_release {
                break;
            }
            released += a.slot_footprint();
            decision.evict.push(a.id);
            self.predictions
                .insert(a.id, Self::updated_prediction(predicted, a.generated));
        }
        if released < required_release {
            return Err(Error::NothingToEvict {
                required: required_release - released,
            });
        }
        Ok(decision)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;

    #[test]
    fn fresh_request_admitted_if_first_token_fits() {
        let s = state_with(11, 1, vec![req(1, 10, 50).with_output_known(false)], vec![]);
        let mut p = Amin::new(1).unwrap();
        let d = p.decide(&PolicyView::new(&s), &mut SimRng::new(0, 1)).unwrap();
        assert_eq!(d.activate, vec![1]);
        let s = state_with(10, 1, vec![req(1, 10, 50).with_output_known(false)], vec![]);
        let d = p.decide(&PolicyView::new(&s), &mut SimRng::new(0, 1)).unwrap();
        assert!(d.activate.is_empty());
    }

    #[test]
    fn evicts_smallest_prediction_first() {
        let s = state_with(
            1000,
            5,
            vec![],
            vec![(req(1, 10, 90), 0), (req(2, 10, 90), 0), (req(3, 10, 90), 0)],
        );
        let mut p = Amin::new(1).unwrap();
        p.predictions.insert(1, 5);
        p.predictions.insert(2, 2);
        p.predictions.insert(3, 9);
        let d = p.evict(&PolicyView::new(&s), 1).unwrap();
        assert_eq!(d.evict, vec![2]);
        assert_eq!(p.prediction(2), 4);
    }

    #[test]
    fn prediction_update_rule() {
        assert_eq!(Amin::updated_prediction(5, 7), 10);
        assert_eq!(Amin::updated_prediction(3, 9), 10);
        let s = state_with(1000, 9, vec![], vec![(req(1, 10, 90), 7)]);
        let mut p = Amin::new(5).unwrap();
        p.evict(&PolicyView::new(&s), 1).unwrap();
        assert_eq!(p.prediction(1), 10);
    }

    #[test]
    fn skips_requests_with_grown_predictions() {
        // Request 1 was evicted before and now predicts 40 tokens; request 2
        // is fresh and fits.
        let s = state_with(
            40,
            1,
            vec![
                req(1, 10, 50).with_output_known(false),
                req(2, 10, 50).with_output_known(false),
            ],
            vec![],
        );
        let mut p = Amin::new(2).unwrap();
        p.predictions.insert(1, 40);
        let d = p.decide(&PolicyView::new(&s), &mut SimRng::new(0, 1)).unwrap();
        assert_eq!(d.activate, vec![2]);
    }
}
