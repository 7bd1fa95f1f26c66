//! Discrete-time simulation of single-worker LLM inference under a hard
//! KV-cache budget.
//!
//! Time advances in slots. Each slot, waiting requests may be activated,
//! every active request decodes one token, and a request of prompt length
//! `l` holds `l + q` cache tokens in its `q`-th active slot. The total must
//! stay within the capacity `M`; policies decide whom to activate and, on
//! overflow, whom to evict.

pub mod checks;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod stability;
pub mod state;
pub mod trace;
pub mod types;
pub mod workload;

pub use engine::{run, run_stream, Engine, EngineOptions, RunResult, SlotCostModel};
pub use error::{Error, Result};
pub use metrics::{compute_metrics, MetricsReport, Objective};
pub use policy::{Policy, PolicyConfig};
pub use types::{workload_tokens, Rate, Request, RequestClass, RequestId, Slot, Tokens};
pub use workload::{generate_arrivals, ArrivalStream, ClassSpec, WorkloadSpec};
