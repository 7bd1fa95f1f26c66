//! Trace files.
//!
//! Two line-oriented JSON formats are accepted:
//!
//! * `jsonl`: `{"prompt_tokens": 57, "output_tokens": 128, "id": 3}` with `id`
//!   optional;
//! * `raw_pairs`: `{"prompt": "...", "response": "..."}`, where token counts
//!   are whitespace-delimited word counts.
//!
//! Records with a zero-length side are dropped and counted. Malformed lines
//! are skipped and reported with their line number.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{workload_tokens, Tokens};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    #[default]
    Jsonl,
    RawPairs,
}

impl std::str::FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(TraceFormat::Jsonl),
            "raw_pairs" | "raw-pairs" => Ok(TraceFormat::RawPairs),
            other => Err(Error::Config(format!("unknown trace format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub record_id: u64,
    pub prompt_tokens: Tokens,
    pub output_tokens: Tokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedLine {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceIngest {
    pub records: Vec<TraceRecord>,
    pub dropped_zero_length: usize,
    pub malformed: Vec<MalformedLine>,
}

#[derive(Deserialize)]
struct TokenLine {
    prompt_tokens: u64,
    output_tokens: u64,
    #[serde(default)]
    id: Option<u64>,
}

#[derive(Deserialize)]
struct PairLine {
    prompt: String,
    response: String,
}

pub fn ingest_trace(path: impl AsRef<Path>, format: TraceFormat) -> Result<TraceIngest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trace(file, format).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_trace(reader: impl Read, format: TraceFormat) -> Result<TraceIngest> {
    let mut out = TraceIngest::default();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<trace>", e))?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            TraceFormat::Jsonl => serde_json::from_str::<TokenLine>(&line)
                .map(|t| (t.id, t.prompt_tokens, t.output_tokens)),
            TraceFormat::RawPairs => serde_json::from_str::<PairLine>(&line).map(|p| {
                (
                    None,
                    p.prompt.split_whitespace().count() as u64,
                    p.response.split_whitespace().count() as u64,
                )
            }),
        };
        match parsed {
            Ok((_, 0, _)) | Ok((_, _, 0)) => out.dropped_zero_length += 1,
            Ok((id, prompt_tokens, output_tokens)) => out.records.push(TraceRecord {
                record_id: id.unwrap_or(line_no as u64),
                prompt_tokens,
                output_tokens,
            }),
            Err(e) => out.malformed.push(MalformedLine {
                line: line_no,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Writes records in the `jsonl` format.
pub fn write_jsonl(records: &[TraceRecord], mut out: impl std::io::Write) -> Result<()> {
    for r in records {
        let line = serde_json::json!({
            "id": r.record_id,
            "prompt_tokens": r.prompt_tokens,
            "output_tokens": r.output_tokens,
        });
        writeln!(out, "{line}").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub min: Tokens,
    pub max: Tokens,
    pub mean: f64,
    pub p50: Tokens,
    pub p90: Tokens,
    pub p95: Tokens,
    pub p99: Tokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthSummary {
    pub count: usize,
    pub prompt: LengthStats,
    pub output: LengthStats,
    /// Average of `workload_tokens(l, o)` over the records.
    pub mean_workload: f64,
    pub total_workload: u128,
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest value.
pub fn nearest_rank(sorted: &[Tokens], percent: u32) -> Tokens {
    let n = sorted.len();
    let rank = (percent as usize * n).div_ceil(100).max(1);
    sorted[rank - 1]
}

fn stats(mut values: Vec<Tokens>) -> LengthStats {
    values.sort_unstable();
    let sum: u128 = values.iter().map(|&v| v as u128).sum();
    LengthStats {
        min: values[0],
        max: values[values.len() - 1],
        mean: sum as f64 / values.len() as f64,
        p50: nearest_rank(&values, 50),
        p90: nearest_rank(&values, 90),
        p95: nearest_rank(&values, 95),
        p99: nearest_rank(&values, 99),
    }
}

pub fn sample_lengths_summary(records: &[TraceRecord]) -> Result<LengthSummary> {
    if records.is_empty() {
        return Err(Error::Empty("trace has no records"));
    }
    let mut total: u128 = 0;
    for r in records {
        total += workload_tokens(r.prompt_tokens, r.output_tokens)? as u128;
    }
    Ok(LengthSummary {
        count: records.len(),
        prompt: stats(records.iter().map(|r| r.prompt_tokens).collect()),
        output: stats(records.iter().map(|r| r.output_tokens).collect()),
        mean_workload: total as f64 / records.len() as f64,
        total_workload: total,
    })
}
