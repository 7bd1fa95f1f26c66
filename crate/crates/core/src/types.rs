//! Domain types shared by every module: requests, their lifecycle, and the
//! token accounting used for KV-cache memory.
//!
//! Time is slotted. A request activated in slot `s` decodes its first token in
//! slot `s`, so its footprint in that slot is `l + 1`; in its `q`-th slot of
//! residence the footprint is `l + q`, and memory is released at the end of the
//! slot in which the last token is produced.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// KV-cache memory, counted in tokens.
pub type Tokens = u64;
/// Slot index. The first slot of a run is 1.
pub type Slot = u64;
pub type RequestId = u64;

/// Total token-slots a request occupies from activation to completion when it
/// runs uninterrupted: `sum_{j=1..o} (l + j) = l*o + (o + o^2)/2`.
pub fn workload_tokens(prompt_len: Tokens, decode_len: Tokens) -> Result<Tokens> {
    if prompt_len == 0 || decode_len == 0 {
        return Err(Error::InvalidLength(format!(
            "workload needs positive lengths, got prompt={prompt_len} decode={decode_len}"
        )));
    }
    // o + o^2 = o(o+1) is always even.
    Ok(prompt_len * decode_len + decode_len * (decode_len + 1) / 2)
}

/// Arrival rate in expected requests per slot, kept as an exact fraction so
/// load comparisons against the capacity are free of rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rate(Ratio<u64>);

impl Rate {
    pub fn new(numer: u64, denom: u64) -> Result<Self> {
        if denom == 0 {
            return Err(Error::InvalidRate("zero denominator".into()));
        }
        Ok(Rate(Ratio::new(numer, denom)))
    }

    pub fn integer(value: u64) -> Self {
        Rate(Ratio::from_integer(value))
    }

    /// Converts a float by finding the closest small fraction. Decimal inputs
    /// like `2.5` or `0.125` convert exactly.
    pub fn from_f64(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidRate(format!("{value} is not a finite non-negative rate")));
        }
        let mut scale = 1u64;
        for _ in 0..10 {
            let scaled = value * scale as f64;
            if (scaled - scaled.round()).abs() < 1e-9 * scale as f64 && scaled < u64::MAX as f64 / 4.0 {
                return Ok(Rate(Ratio::new(scaled.round() as u64, scale)));
            }
            scale *= 10;
        }
        Ratio::<i64>::approximate_float(value)
            .and_then(|r| Some(Rate(Ratio::new(u64::try_from(*r.numer()).ok()?, u64::try_from(*r.denom()).ok()?))))
            .ok_or_else(|| Error::InvalidRate(format!("cannot represent {value} as a fraction")))
    }

    pub fn ratio(&self) -> Ratio<u64> {
        self.0
    }

    pub fn to_i128(&self) -> Ratio<i128> {
        Ratio::new(*self.0.numer() as i128, *self.0.denom() as i128)
    }

    pub fn as_f64(&self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    pub fn is_zero(&self) -> bool {
        *self.0.numer() == 0
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self.0.denom() == 1 {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl FromStr for Rate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse::<u64>().map_err(|e| Error::InvalidRate(format!("{s}: {e}")))?;
            let d = d.trim().parse::<u64>().map_err(|e| Error::InvalidRate(format!("{s}: {e}")))?;
            Rate::new(n, d)
        } else {
            let v = s.parse::<f64>().map_err(|e| Error::InvalidRate(format!("{s}: {e}")))?;
            Rate::from_f64(v)
        }
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Float(f64),
            Text(String),
        }
        let parsed = match Raw::deserialize(deserializer)? {
            Raw::Int(v) => Ok(Rate::integer(v)),
            Raw::Float(v) => Rate::from_f64(v),
            Raw::Text(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// A request type with fixed prompt and decode lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RequestClass {
    pub class_id: u32,
    pub prompt_len: Tokens,
    pub decode_len: Tokens,
}

impl RequestClass {
    pub fn new(class_id: u32, prompt_len: Tokens, decode_len: Tokens) -> Result<Self> {
        if prompt_len == 0 || decode_len == 0 {
            return Err(Error::InvalidLength(format!(
                "class {class_id} needs positive lengths, got ({prompt_len}, {decode_len})"
            )));
        }
        Ok(Self {
            class_id,
            prompt_len,
            decode_len,
        })
    }

    pub fn workload(&self) -> Tokens {
        self.prompt_len * self.decode_len + self.decode_len * (self.decode_len + 1) / 2
    }
}

/// One prompt as it arrives at the scheduler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub prompt_len: Tokens,
    pub decode_len: Tokens,
    pub arrival_slot: Slot,
    pub class_id: Option<u32>,
    /// Whether schedulers may look at `decode_len`.
    pub output_known: bool,
}

impl Request {
    pub fn new(
        id: RequestId,
        prompt_len: Tokens,
        decode_len: Tokens,
        arrival_slot: Slot,
    ) -> Result<Self> {
        if prompt_len == 0 || decode_len == 0 {
            return Err(Error::InvalidLength(format!(
                "request {id} needs positive lengths, got ({prompt_len}, {decode_len})"
            )));
        }
        if arrival_slot == 0 {
            return Err(Error::InvalidLength(format!("request {id} arrives at slot 0")));
        }
        Ok(Self {
            id,
            prompt_len,
            decode_len,
            arrival_slot,
            class_id: None,
            output_known: true,
        })
    }

    pub fn with_class(mut self, class_id: u32) -> Self {
        self.class_id = Some(class_id);
        self
    }

    pub fn with_output_known(mut self, known: bool) -> Self {
        self.output_known = known;
        self
    }

    pub fn workload(&self) -> Tokens {
        self.prompt_len * self.decode_len + self.decode_len * (self.decode_len + 1) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Waiting,
    Active,
    Completed,
}

/// Lifecycle of a request inside the simulator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestState {
    pub phase: Phase,
    /// Output tokens produced since the last activation.
    pub generated: Tokens,
    pub activation_slot: Option<Slot>,
    pub completion_slot: Option<Slot>,
    pub evict_count: u32,
}

impl RequestState {
    pub fn waiting() -> Self {
        Self {
            phase: Phase::Waiting,
            generated: 0,
            activation_slot: None,
            completion_slot: None,
            evict_count: 0,
        }
    }
}

/// Forward memory trajectory of a set of resident requests.
///
/// `at(d)` is the peak usage in the `d`-th upcoming slot (`d >= 1`) assuming
/// every request decodes one token per slot and leaves at the end of the slot
/// in which it reaches its (assumed) decode length.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Projection {
    slots: Vec<Tokens>,
}

impl Projection {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a resident request with `generated` tokens so far and `decode_len`
    /// total. Requests already at their decode length contribute nothing.
    pub fn add(&mut self, prompt_len: Tokens, generated: Tokens, decode_len: Tokens) {
        let remaining = decode_len.saturating_sub(generated) as usize;
        if self.slots.len() < remaining {
            self.slots.resize(remaining, 0);
        }
        for (d, slot) in self.slots.iter_mut().take(remaining).enumerate() {
            *slot += prompt_len + generated + d as Tokens + 1;
        }
    }

    /// Whether a fresh request `(prompt_len, decode_len)` activated now keeps
    /// every projected slot within `capacity`.
    pub fn admits(&self, prompt_len: Tokens, decode_len: Tokens, capacity: Tokens) -> bool {
        (1..=decode_len).all(|d| self.at(d) + prompt_len + d <= capacity)
    }

    pub fn at(&self, offset: u64) -> Tokens {
        if offset == 0 {
            return 0;
        }
        self.slots.get(offset as usize - 1).copied().unwrap_or(0)
    }

    pub fn peak(&self) -> Tokens {
        self.slots.iter().copied().max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// `(prompt_len, generated, decode_len)` of one resident request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resident {
    pub prompt_len: Tokens,
    pub generated: Tokens,
    pub decode_len: Tokens,
}

/// Projected usage for each of the next `horizon` slots.
pub fn peak_projection(active: &[Resident], horizon: u64) -> Vec<Tokens> {
    let mut projection = Projection::new();
    for r in active {
        projection.add(r.prompt_len, r.generated, r.decode_len);
    }
    (1..=horizon).map(|d| projection.at(d)).collect()
}
