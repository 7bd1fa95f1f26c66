//! Arrival streams.
//!
//! Synthetic workloads draw, for every slot and class, an independent
//! Poisson number of arrivals. Trace workloads consume records in file order,
//! with the number consumed per slot drawn from a Poisson law; timestamps in
//! the source data are ignored.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{SimRng, ARRIVAL_STREAM};
use crate::trace::{ingest_trace, TraceFormat, TraceRecord};
use crate::types::{Rate, Request, RequestClass, RequestId, Slot, Tokens};

/// One synthetic request class and its arrival rate per slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub prompt_len: Tokens,
    pub decode_len: Tokens,
    pub rate: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    Synthetic {
        classes: Vec<ClassSpec>,
        horizon: Slot,
        #[serde(default = "default_true")]
        output_known: bool,
    },
    Trace {
        path: PathBuf,
        #[serde(default)]
        format: TraceFormat,
        rate: Rate,
        horizon: Slot,
        #[serde(default)]
        output_known: bool,
    },
}

fn default_true() -> bool {
    true
}

impl WorkloadSpec {
    pub fn horizon(&self) -> Slot {
        match self {
            WorkloadSpec::Synthetic { horizon, .. } | WorkloadSpec::Trace { horizon, .. } => *horizon,
        }
    }

    pub fn output_known(&self) -> bool {
        match self {
            WorkloadSpec::Synthetic { output_known, .. } | WorkloadSpec::Trace { output_known, .. } => {
                *output_known
            }
        }
    }

    /// Request classes, with ids equal to their position.
    pub fn classes(&self) -> Result<Vec<RequestClass>> {
        match self {
            WorkloadSpec::Synthetic { classes, .. } => classes
                .iter()
                .enumerate()
                .map(|(k, c)| RequestClass::new(k as u32, c.prompt_len, c.decode_len))
                .collect(),
            WorkloadSpec::Trace { .. } => Ok(Vec::new()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon() == 0 {
            return Err(Error::Config("workload horizon must be at least 1".into()));
        }
        match self {
            WorkloadSpec::Synthetic { classes, .. } => {
                if classes.is_empty() {
                    return Err(Error::EmptyClasses);
                }
                self.classes()?;
                if let Some(k) = classes.iter().position(|c| c.rate.is_zero()) {
                    return Err(Error::InvalidRate(format!("class {k} has rate 0")));
                }
            }
            WorkloadSpec::Trace { rate, .. } => {
                if rate.is_zero() {
                    return Err(Error::InvalidRate("trace rate is 0".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrivalSummary {
    pub total: u64,
    /// Arrivals per class (synthetic workloads only).
    pub per_class: Vec<u64>,
    /// First slot that wanted a record after the trace ran out.
    pub trace_exhausted_at: Option<Slot>,
    pub records_used: usize,
}

/// Arrivals for slots `1..=horizon`; `slots[t - 1]` holds slot `t`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrivalStream {
    pub slots: Vec<Vec<Request>>,
    pub summary: ArrivalSummary,
}

impl ArrivalStream {
    pub fn horizon(&self) -> Slot {
        self.slots.len() as Slot
    }

    /// Builds a stream from explicit requests, bucketing by arrival slot.
    pub fn from_requests(requests: Vec<Request>, horizon: Slot) -> Result<Self> {
        let mut slots = vec![Vec::new(); horizon as usize];
        let mut summary = ArrivalSummary::default();
        for r in requests {
            if r.arrival_slot == 0 || r.arrival_slot > horizon {
                return Err(Error::Config(format!(
                    "request {} arrives at slot {} outside 1..={horizon}",
                    r.id, r.arrival_slot
                )));
            }
            summary.total += 1;
            if let Some(k) = r.class_id {
                let k = k as usize;
                if summary.per_class.len() <= k {
                    summary.per_class.resize(k + 1, 0);
                }
                summary.per_class[k] += 1;
            }
            slots[r.arrival_slot as usize - 1].push(r);
        }
        for slot in &mut slots {
            slot.sort_by_key(|r| r.id);
        }
        Ok(Self { slots, summary })
    }
}

/// Generates the arrival stream for `spec`. Trace files are read from disk.
pub fn generate_arrivals(spec: &WorkloadSpec, seed: u64) -> Result<ArrivalStream> {
    spec.validate()?;
    match spec {
        WorkloadSpec::Synthetic {
            classes,
            horizon,
            output_known,
        } => Ok(synthetic_arrivals(classes, *horizon, *output_known, seed)),
        WorkloadSpec::Trace {
            path,
            format,
            rate,
            horizon,
            output_known,
        } => {
            let ingest = ingest_trace(path, *format)?;
            Ok(replay_trace(&ingest.records, *rate, *horizon, *output_known, seed))
        }
    }
}

fn synthetic_arrivals(classes: &[ClassSpec], horizon: Slot, output_known: bool, seed: u64) -> ArrivalStream {
    let mut rng = SimRng::new(seed, ARRIVAL_STREAM);
    let rates: Vec<f64> = classes.iter().map(|c| c.rate.as_f64()).collect();
    let mut next_id: RequestId = 0;
    let mut summary = ArrivalSummary {
        per_class: vec![0; classes.len()],
        ..Default::default()
    };
    let mut slots = Vec::with_capacity(horizon as usize);
    for t in 1..=horizon {
        let mut arrivals = Vec::new();
        for (k, class) in classes.iter().enumerate() {
            let n = rng.poisson(rates[k]);
            for _ in 0..n {
                arrivals.push(Request {
                    id: next_id,
                    prompt_len: class.prompt_len,
                    decode_len: class.decode_len,
                    arrival_slot: t,
                    class_id: Some(k as u32),
                    output_known,
                });
                next_id += 1;
            }
            summary.per_class[k] += n;
            summary.total += n;
        }
        slots.push(arrivals);
    }
    ArrivalStream { slots, summary }
}

/// Replays trace records in order, `Poisson(rate)` of them per slot.
pub fn replay_trace(
    records: &[TraceRecord],
    rate: Rate,
    horizon: Slot,
    output_known: bool,
    seed: u64,
) -> ArrivalStream {
    let mut rng = SimRng::new(seed, ARRIVAL_STREAM);
    let mean = rate.as_f64();
    let mut cursor = 0usize;
    let mut summary = ArrivalSummary::default();
    let mut slots = Vec::with_capacity(horizon as usize);
    for t in 1..=horizon {
        let mut arrivals = Vec::new();
        if summary.trace_exhausted_at.is_none() {
            let n = rng.poisson(mean) as usize;
            let take = n.min(records.len() - cursor);
            for r in &records[cursor..cursor + take] {
                arrivals.push(Request {
                    id: cursor as RequestId,
                    prompt_len: r.prompt_tokens,
                    decode_len: r.output_tokens,
                    arrival_slot: t,
                    class_id: None,
                    output_known,
                });
                cursor += 1;
            }
            if take < n {
                summary.trace_exhausted_at = Some(t);
            }
        }
        summary.total += arrivals.len() as u64;
        slots.push(arrivals);
    }
    summary.records_used = cursor;
    ArrivalStream { slots, summary }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_class(rate: Rate, horizon: Slot) -> WorkloadSpec {
        WorkloadSpec::Synthetic {
            classes: vec![ClassSpec {
                prompt_len: 10,
                decode_len: 20,
                rate,
            }],
            horizon,
            output_known: true,
        }
    }

    #[test]
    fn zero_rate_is_rejected() {
        assert!(matches!(
            generate_arrivals(&single_class(Rate::integer(0), 10), 1),
            Err(Error::InvalidRate(_))
        ));
    }

    #[test]
    fn empty_class_list_is_rejected() {
        let spec = WorkloadSpec::Synthetic {
            classes: vec![],
            horizon: 10,
            output_known: true,
        };
        assert!(matches!(generate_arrivals(&spec, 1), Err(Error::EmptyClasses)));
    }

    #[test]
    fn poisson_mean_per_slot() {
        let stream = generate_arrivals(&single_class(Rate::integer(2), 10_000), 42).unwrap();
        let mean = stream.summary.total as f64 / 10_000.0;
        let se = (2.0f64 / 10_000.0).sqrt();
        assert!((mean - 2.0).abs() < 2.5 * se, "mean {mean}");
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = single_class(Rate::new(5, 3).unwrap(), 500);
        assert_eq!(generate_arrivals(&spec, 9).unwrap(), generate_arrivals(&spec, 9).unwrap());
        assert_ne!(generate_arrivals(&spec, 9).unwrap(), generate_arrivals(&spec, 10).unwrap());
    }

    #[test]
    fn ids_are_sequential_and_slots_match() {
        let stream = generate_arrivals(&single_class(Rate::integer(3), 50), 1).unwrap();
        let mut expected = 0;
        for (i, slot) in stream.slots.iter().enumerate() {
            for r in slot {
                assert_eq!(r.id, expected);
                assert_eq!(r.arrival_slot, i as u64 + 1);
                expected += 1;
            }
        }
    }

    #[test]
    fn trace_exhausts_in_first_slot() {
        let records: Vec<TraceRecord> = (0..3)
            .map(|i| TraceRecord {
                record_id: i,
                prompt_tokens: 5 + i,
                output_tokens: 7 + i,
            })
            .collect();
        let stream = replay_trace(&records, Rate::integer(200), 5, false, 3);
        assert_eq!(stream.slots[0].len(), 3);
        let lens: Vec<_> = stream.slots[0].iter().map(|r| (r.prompt_len, r.decode_len)).collect();
        assert_eq!(lens, vec![(5, 7), (6, 8), (7, 9)]);
        assert!(stream.slots[1..].iter().all(|s| s.is_empty()));
        assert_eq!(stream.summary.trace_exhausted_at, Some(1));
        assert!(!stream.slots[0][0].output_known);
    }

    #[test]
    fn from_requests_buckets() {
        let reqs = vec![
            Request::new(2, 1, 1, 2).unwrap(),
            Request::new(1, 1, 1, 2).unwrap(),
            Request::new(0, 1, 1, 1).unwrap(),
        ];
        let s = ArrivalStream::from_requests(reqs, 3).unwrap();
        assert_eq!(s.slots[1].iter().map(|r| r.id).collect::<Vec<_>>(), vec![1, 2]);
        assert!(ArrivalStream::from_requests(vec![Request::new(0, 1, 1, 4).unwrap()], 3).is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = single_class(Rate::new(5, 3).unwrap(), 100);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<WorkloadSpec>(&json).unwrap(), spec);
    }
}
