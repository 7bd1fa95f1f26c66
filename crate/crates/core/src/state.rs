//! Simulator state: the request table, the waiting queue and the active set.
//!
//! The waiting queue is ordered by `(arrival_slot, id)`. Evicted requests go
//! back in at their original arrival position, ahead of later arrivals. The
//! active set is kept in activation order, most recent last.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Phase, Request, RequestId, RequestState, Slot, Tokens};

/// A request together with its lifecycle state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub request: Request,
    pub state: RequestState,
}

type QueueKey = (Slot, RequestId);

/// Secondary indexes over the waiting queue. Queries on a disabled index
/// fall back to a scan of the queue, so they only affect speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaitingIndexes {
    pub by_class: bool,
    pub by_decode_len: bool,
    pub prompt_lens: bool,
}

impl WaitingIndexes {
    pub const ALL: Self = Self {
        by_class: true,
        by_decode_len: true,
        prompt_lens: true,
    };
    pub const NONE: Self = Self {
        by_class: false,
        by_decode_len: false,
        prompt_lens: false,
    };
}

impl Default for WaitingIndexes {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone)]
pub struct SimState {
    clock: Slot,
    kv_capacity: Tokens,
    rng_seed: u64,
    entries: Vec<Entry>,
    index: HashMap<RequestId, usize>,
    waiting: BTreeMap<QueueKey, usize>,
    indexes: WaitingIndexes,
    waiting_by_class: BTreeMap<u32, BTreeSet<QueueKey>>,
    // Always maintained; feeds the per-class queue series.
    class_counts: HashMap<u32, usize>,
    unknown_len_count: usize,
    // Only requests whose decode length is visible to policies.
    waiting_by_len: BTreeSet<(Tokens, Slot, RequestId)>,
    waiting_prompts: BTreeMap<Tokens, usize>,
    active: Vec<usize>,
    usage: Tokens,
}

impl SimState {
    pub fn new(kv_capacity: Tokens, rng_seed: u64) -> Self {
        Self::with_indexes(kv_capacity, rng_seed, WaitingIndexes::ALL)
    }

    pub fn with_indexes(kv_capacity: Tokens, rng_seed: u64, indexes: WaitingIndexes) -> Self {
        Self {
            indexes,
            clock: 0,
            kv_capacity,
            rng_seed,
            entries: Vec::new(),
            index: HashMap::new(),
            waiting: BTreeMap::new(),
            waiting_by_class: BTreeMap::new(),
            class_counts: HashMap::new(),
            unknown_len_count: 0,
            waiting_by_len: BTreeSet::new(),
            waiting_prompts: BTreeMap::new(),
            active: Vec::new(),
            usage: 0,
        }
    }

    pub fn clock(&self) -> Slot {
        self.clock
    }

    pub(crate) fn advance_clock(&mut self) -> Slot {
        self.clock += 1;
        self.clock
    }

    pub fn kv_capacity(&self) -> Tokens {
        self.kv_capacity
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Resident KV usage: `sum over active of (prompt_len + generated)`.
    pub fn usage(&self) -> Tokens {
        self.usage
    }

    /// Usage at the end of the current slot if every active request decodes
    /// one more token.
    pub fn projected_usage(&self) -> Tokens {
        self.usage + self.active.len() as Tokens
    }

    pub fn entry(&self, id: RequestId) -> Option<&Entry> {
        self.index.get(&id).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn waiting_len(&self) -> usize {
        self.waiting.len()
    }

    pub fn active_len(&self) -> usize {
        self.active.len()
    }

    pub fn indexes(&self) -> WaitingIndexes {
        self.indexes
    }

    /// Turns indexes on or off. Only allowed while nothing is waiting.
    pub fn set_indexes(&mut self, indexes: WaitingIndexes) -> Result<()> {
        if !self.waiting.is_empty() {
            return Err(Error::Config("indexes can only change while the queue is empty".into()));
        }
        self.indexes = indexes;
        Ok(())
    }

    pub fn waiting_in_class_len(&self, class: u32) -> usize {
        self.class_counts.get(&class).copied().unwrap_or(0)
    }

    /// Waiting requests in FIFO order.
    pub fn waiting(&self) -> impl DoubleEndedIterator<Item = &Entry> + '_ {
        self.waiting.values().map(move |&i| &self.entries[i])
    }

    pub fn waiting_in_class(&self, class: u32) -> Box<dyn Iterator<Item = &Entry> + '_> {
        if self.indexes.by_class {
            Box::new(
                self.waiting_by_class
                    .get(&class)
                    .into_iter()
                    .flat_map(move |set| set.iter().map(move |(_, id)| &self.entries[self.index[id]])),
            )
        } else {
            Box::new(self.waiting().filter(move |e| e.request.class_id == Some(class)))
        }
    }

    /// Waiting requests with visible decode lengths, shortest first, ties by
    /// arrival then id.
    pub fn waiting_by_decode_len(&self) -> Box<dyn Iterator<Item = &Entry> + '_> {
        if self.indexes.by_decode_len {
            Box::new(
                self.waiting_by_len
                    .iter()
                    .map(move |(_, _, id)| &self.entries[self.index[id]]),
            )
        } else {
            let mut known: Vec<&Entry> = self.waiting().filter(|e| e.request.output_known).collect();
            known.sort_by_key(|e| (e.request.decode_len, e.request.arrival_slot, e.request.id));
            Box::new(known.into_iter())
        }
    }

    /// Number of waiting requests whose decode length is visible.
    pub fn waiting_known_len(&self) -> usize {
        self.waiting.len() - self.unknown_len_count
    }

    pub fn min_waiting_prompt(&self) -> Option<Tokens> {
        if self.indexes.prompt_lens {
            self.waiting_prompts.keys().next().copied()
        } else {
            self.waiting().map(|e| e.request.prompt_len).min()
        }
    }

    /// Active requests in activation order, most recent last.
    pub fn active(&self) -> impl DoubleEndedIterator<Item = &Entry> + ExactSizeIterator + '_ {
        self.active.iter().map(move |&i| &self.entries[i])
    }

    pub fn is_waiting(&self, id: RequestId) -> bool {
        self.entry(id).is_some_and(|e| e.state.phase == Phase::Waiting)
    }

    pub fn is_active(&self, id: RequestId) -> bool {
        self.entry(id).is_some_and(|e| e.state.phase == Phase::Active)
    }

    /// Adds a newly arrived request to the waiting queue.
    pub fn enqueue(&mut self, request: Request) -> Result<()> {
        if self.index.contains_key(&request.id) {
            return Err(Error::DuplicateRequest(request.id));
        }
        let idx = self.entries.len();
        self.index.insert(request.id, idx);
        self.entries.push(Entry {
            request,
            state: RequestState::waiting(),
        });
        self.insert_waiting(idx);
        Ok(())
    }

    /// Places a request directly in the active set with `generated` tokens
    /// already produced. Used to build scenarios for tests and projections.
    pub fn admit_resident(
        &mut self,
        request: Request,
        generated: Tokens,
        activation_slot: Slot,
    ) -> Result<()> {
        if generated >= request.decode_len {
            return Err(Error::InvalidLength(format!(
                "resident request {} already has {generated} of {} tokens",
                request.id, request.decode_len
            )));
        }
        if self.index.contains_key(&request.id) {
            return Err(Error::DuplicateRequest(request.id));
        }
        let idx = self.entries.len();
        self.index.insert(request.id, idx);
        self.usage += request.prompt_len + generated;
        self.entries.push(Entry {
            request,
            state: RequestState {
                phase: Phase::Active,
                generated,
                activation_slot: Some(activation_slot),
                completion_slot: None,
                evict_count: 0,
            },
        });
        self.active.push(idx);
        Ok(())
    }

    /// Moves a waiting request into the active set at the current slot.
    pub(crate) fn activate(&mut self, id: RequestId) -> Result<&Entry> {
        let idx = *self
            .index
            .get(&id)
            .ok_or_else(|| Error::PolicyBug(format!("activated unknown request {id}")))?;
        if self.entries[idx].state.phase != Phase::Waiting {
            return Err(Error::PolicyBug(format!("activated request {id} which is not waiting")));
        }
        self.remove_waiting(idx);
        let clock = self.clock;
        let entry = &mut self.entries[idx];
        entry.state.phase = Phase::Active;
        entry.state.generated = 0;
        entry.state.activation_slot = Some(clock);
        self.usage += entry.request.prompt_len;
        self.active.push(idx);
        Ok(&self.entries[idx])
    }

    /// Evicts active requests; returns the tokens each had generated.
    pub(crate) fn evict(&mut self, ids: &[RequestId]) -> Result<Vec<Tokens>> {
        let mut positions = Vec::with_capacity(ids.len());
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::PolicyBug(format!("evicted request {} twice", w[0])));
        }
        for &id in ids {
            let idx = *self
                .index
                .get(&id)
                .ok_or_else(|| Error::PolicyBug(format!("evicted unknown request {id}")))?;
            if self.entries[idx].state.phase != Phase::Active {
                return Err(Error::PolicyBug(format!("evicted request {id} which is not active")));
            }
            positions.push(idx);
        }
        let mut wasted = Vec::with_capacity(ids.len());
        for idx in positions {
            let entry = &mut self.entries[idx];
            wasted.push(entry.state.generated);
            self.usage -= entry.request.prompt_len + entry.state.generated;
            entry.state.phase = Phase::Waiting;
            entry.state.generated = 0;
            entry.state.activation_slot = None;
            entry.state.evict_count += 1;
            self.insert_waiting(idx);
        }
        let entries = &self.entries;
        self.active.retain(|&i| entries[i].state.phase == Phase::Active);
        Ok(wasted)
    }

    /// Every active request produces one token.
    pub(crate) fn decode_all(&mut self) {
        for &idx in &self.active {
            self.entries[idx].state.generated += 1;
        }
        self.usage += self.active.len() as Tokens;
    }

    /// Removes requests that reached their decode length and releases their
    /// memory. Returns the ids in activation order.
    pub(crate) fn complete_finished(&mut self) -> Vec<RequestId> {
        let clock = self.clock;
        let mut done = Vec::new();
        let entries = &mut self.entries;
        let usage = &mut self.usage;
        self.active.retain(|&idx| {
            let e = &mut entries[idx];
            if e.state.generated >= e.request.decode_len {
                e.state.phase = Phase::Completed;
                e.state.completion_slot = Some(clock);
                *usage -= e.request.prompt_len + e.state.generated;
                done.push(e.request.id);
                false
            } else {
                true
            }
        });
        done
    }

    fn insert_waiting(&mut self, idx: usize) {
        let r = &self.entries[idx].request;
        let key = (r.arrival_slot, r.id);
        self.waiting.insert(key, idx);
        if let Some(class) = r.class_id {
            *self.class_counts.entry(class).or_insert(0) += 1;
        }
        if !r.output_known {
            self.unknown_len_count += 1;
        }
        if let (true, Some(class)) = (self.indexes.by_class, r.class_id) {
            self.waiting_by_class.entry(class).or_default().insert(key);
        }
        if self.indexes.by_decode_len && r.output_known {
            self.waiting_by_len.insert((r.decode_len, r.arrival_slot, r.id));
        }
        if self.indexes.prompt_lens {
            *self.waiting_prompts.entry(r.prompt_len).or_insert(0) += 1;
        }
    }

    fn remove_waiting(&mut self, idx: usize) {
        let r = &self.entries[idx].request;
        let key = (r.arrival_slot, r.id);
        self.waiting.remove(&key);
        if let Some(class) = r.class_id {
            if let Some(c) = self.class_counts.get_mut(&class) {
                *c -= 1;
            }
        }
        if !r.output_known {
            self.unknown_len_count -= 1;
        }
        if let (true, Some(class)) = (self.indexes.by_class, r.class_id) {
            if let Some(set) = self.waiting_by_class.get_mut(&class) {
                set.remove(&key);
            }
        }
        if self.indexes.by_decode_len && r.output_known {
            self.waiting_by_len.remove(&(r.decode_len, r.arrival_slot, r.id));
        }
        if self.indexes.prompt_lens {
            if let Some(count) = self.waiting_prompts.get_mut(&r.prompt_len) {
                *count -= 1;
                if *count == 0 {
                    self.waiting_prompts.remove(&r.prompt_len);
                }
            }
        }
    }

    /// Serializable view of the state.
    pub fn snapshot(&self) -> SimSnapshot {
        SimSnapshot {
            clock: self.clock,
            kv_capacity: self.kv_capacity,
            rng_seed: self.rng_seed,
            usage: self.usage,
            waiting: self.waiting.keys().map(|&(_, id)| id).collect(),
            active: self.active().map(|e| e.request.id).collect(),
            requests: self.entries.clone(),
        }
    }
}

/// Plain-data copy of a [`SimState`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSnapshot {
    pub clock: Slot,
    pub kv_capacity: Tokens,
    pub rng_seed: u64,
    pub usage: Tokens,
    pub waiting: Vec<RequestId>,
    pub active: Vec<RequestId>,
    pub requests: Vec<Entry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: u64, l: u64, o: u64, t: u64) -> Request {
        Request::new(id, l, o, t).unwrap()
    }

    #[test]
    fn empty_usage_is_zero() {
        let s = SimState::new(100, 0);
        assert_eq!(s.usage(), 0);
        assert_eq!(s.projected_usage(), 0);
    }

    #[test]
    fn usage_through_activation_slot() {
        let mut s = SimState::new(100, 0);
        s.advance_clock();
        s.enqueue(req(1, 10, 3, 1)).unwrap();
        s.activate(1).unwrap();
        s.decode_all();
        assert_eq!(s.usage(), 11);
        assert!(s.complete_finished().is_empty());
        s.advance_clock();
        s.decode_all();
        s.advance_clock();
        s.decode_all();
        assert_eq!(s.usage(), 13);
        assert_eq!(s.complete_finished(), vec![1]);
        assert_eq!(s.usage(), 0);
        assert_eq!(s.entry(1).unwrap().state.completion_slot, Some(3));
    }

    #[test]
    fn eviction_reinserts_by_arrival() {
        let mut s = SimState::new(100, 0);
        s.advance_clock();
        s.enqueue(req(1, 5, 9, 1)).unwrap();
        s.advance_clock();
        s.enqueue(req(2, 5, 9, 2)).unwrap();
        s.activate(1).unwrap();
        s.decode_all();
        s.decode_all();
        s.enqueue(req(3, 5, 9, 2)).unwrap();
        let wasted = s.evict(&[1]).unwrap();
        assert_eq!(wasted, vec![2]);
        let order: Vec<u64> = s.waiting().map(|e| e.request.id).collect();
        assert_eq!(order, vec![1, 2, 3]);
        let e = s.entry(1).unwrap();
        assert_eq!(e.state.generated, 0);
        assert_eq!(e.state.evict_count, 1);
        assert_eq!(s.usage(), 0);
    }

    #[test]
    fn activation_of_non_waiting_is_a_bug() {
        let mut s = SimState::new(100, 0);
        s.advance_clock();
        s.enqueue(req(1, 5, 2, 1)).unwrap();
        s.activate(1).unwrap();
        assert!(matches!(s.activate(1), Err(Error::PolicyBug(_))));
        assert!(matches!(s.activate(9), Err(Error::PolicyBug(_))));
        assert!(matches!(s.evict(&[9]), Err(Error::PolicyBug(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut s = SimState::new(100, 0);
        s.enqueue(req(1, 5, 2, 1)).unwrap();
        assert!(matches!(s.enqueue(req(1, 5, 2, 1)), Err(Error::DuplicateRequest(1))));
    }

    #[test]
    fn indexes_follow_waiting_queue() {
        for idx in [WaitingIndexes::ALL, WaitingIndexes::NONE] {
            check_indexes(SimState::with_indexes(100, 0, idx));
        }
    }

    fn check_indexes(mut s: SimState) {
        s.advance_clock();
        s.enqueue(req(1, 7, 60, 1).with_class(2)).unwrap();
        s.enqueue(req(2, 3, 20, 1).with_class(0)).unwrap();
        s.enqueue(req(3, 9, 5, 1).with_output_known(false)).unwrap();
        assert_eq!(s.waiting_in_class_len(2), 1);
        assert_eq!(s.waiting_known_len(), 2);
        assert_eq!(s.min_waiting_prompt(), Some(3));
        let by_len: Vec<u64> = s.waiting_by_decode_len().map(|e| e.request.id).collect();
        assert_eq!(by_len, vec![2, 1]);
        s.activate(2).unwrap();
        assert_eq!(s.min_waiting_prompt(), Some(7));
        assert_eq!(s.waiting_in_class_len(0), 0);
    }
}
