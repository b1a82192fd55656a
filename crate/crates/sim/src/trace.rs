// SPDX-License-Identifier: Apache-2.0

//! Simulation traces as newline-delimited JSON. The last line is a footer
//! with the record count and a SHA-256 chain over all earlier lines, so a
//! truncated or edited log is detected on replay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use venue_act_core::actors::{EpochEvidence, InfoClass, TimePolicy};
use venue_act_core::crypto::hash;

use crate::channel::ChannelModel;
use crate::scenario::{Protocol, SimParams};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Evidence {
    /// Matched epochs of one visit, venue protocol.
    Epochs {
        epoch_length: u64,
        epochs: Vec<EpochEvidence>,
    },
    /// `(max signal, seconds)` per matched identifier or contact, baselines.
    Durations { hearings: Vec<(f64, u64)> },
}

impl Evidence {
    pub fn is_empty(&self) -> bool {
        match self {
            Evidence::Epochs { epochs, .. } => epochs.is_empty(),
            Evidence::Durations { hearings } => hearings.is_empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Header {
        version: u32,
        name: String,
        protocol: Protocol,
        seed: u64,
        horizon: i64,
        params: SimParams,
        channel: ChannelModel,
        users: Vec<String>,
        venues: Vec<String>,
        policies: BTreeMap<String, TimePolicy>,
    },
    /// The user stood at `position` in `place` during `[start, end)`.
    /// `stay` numbers the user's successive stays at places.
    Presence {
        user: String,
        place: String,
        venue: bool,
        stay: u32,
        position: [f64; 2],
        start: i64,
        end: i64,
    },
    /// The user's phone was broadcasting during `[start, end)`.
    Sensing {
        user: String,
        venue: Option<String>,
        start: i64,
        end: i64,
    },
    /// First transmission of an identifier.
    Broadcast {
        time: i64,
        user: String,
        payload: String,
        venue: Option<String>,
        visit: Option<u32>,
    },
    Receipt {
        time: i64,
        user: String,
        venue: String,
        visit: u32,
        leave_time: i64,
        arrival_time: Option<i64>,
    },
    ReceiptRefused {
        time: i64,
        user: String,
        venue: String,
        reason: String,
    },
    Anomaly {
        time: i64,
        venue: String,
        kind: String,
        emitter: u64,
    },
    Digest {
        time: i64,
        venue: String,
        start: i64,
        end: i64,
        bits: u64,
        hashes: u32,
    },
    Infection {
        time: i64,
        user: String,
        test_center: String,
        start: i64,
        end: i64,
        accepted_by_app: bool,
    },
    Report {
        time: i64,
        user: String,
        venue: String,
        leave_time: i64,
        outcome: String,
        record_id: Option<u64>,
    },
    KeyPublished {
        time: i64,
        user: String,
        day: u32,
        key: String,
    },
    MohTrace {
        time: i64,
        reporter: String,
        contacts: Vec<String>,
        rejected: usize,
    },
    /// Identifiers of `infected` reached `user`, with what matched locally.
    Delivery {
        time: i64,
        user: String,
        infected: String,
        venue: Option<String>,
        record_id: Option<u64>,
        record_leave_time: Option<i64>,
        visit_leave_time: Option<i64>,
        evidence: Evidence,
    },
    Notification {
        time: i64,
        user: String,
        infected: String,
    },
    AdversaryCapture {
        time: i64,
        adversary: String,
        action: String,
        place: String,
        payload: String,
    },
    Observations {
        actor: String,
        counts: BTreeMap<InfoClass, u64>,
    },
    Footer {
        records: u64,
        chain: String,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace has no footer; it is truncated")]
    MissingFooter,
    #[error("footer claims {claimed} records but {found} precede it")]
    CountMismatch { claimed: u64, found: u64 },
    #[error("hash chain mismatch; the trace was modified")]
    ChainMismatch,
    #[error("trace does not start with a header")]
    MissingHeader,
    #[error("records follow the footer")]
    TrailingRecords,
}

fn chain_step(prev: &[u8; 32], line: &str) -> [u8; 32] {
    let mut buf = Vec::with_capacity(32 + line.len());
    buf.extend_from_slice(prev);
    buf.extend_from_slice(line.as_bytes());
    hash(&buf).0
}

/// A complete trace: all records including header and footer.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub records: Vec<TraceRecord>,
}

impl SimulationTrace {
    /// Seals `body` (header first) with a footer.
    pub fn seal(mut body: Vec<TraceRecord>) -> Self {
        let mut chain = [0u8; 32];
        for r in &body {
            chain = chain_step(&chain, &line(r));
        }
        body.push(TraceRecord::Footer {
            records: body.len() as u64,
            chain: hex::encode(chain),
        });
        Self { records: body }
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    /// Parses and verifies a trace.
    pub fn from_ndjson(text: &str) -> Result<Self, TraceError> {
        let mut records = Vec::new();
        let mut chain = [0u8; 32];
        let mut footer = None;
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            if footer.is_some() {
                return Err(TraceError::TrailingRecords);
            }
            let rec: TraceRecord = serde_json::from_str(raw).map_err(|e| TraceError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if let TraceRecord::Footer { records: n, chain: c } = &rec {
                footer = Some((*n, c.clone()));
            } else {
                if records.is_empty() && !matches!(rec, TraceRecord::Header { .. }) {
                    return Err(TraceError::MissingHeader);
                }
                chain = chain_step(&chain, raw);
            }
            records.push(rec);
        }
        let Some((claimed, c)) = footer else {
            return Err(TraceError::MissingFooter);
        };
        let found = records.len() as u64 - 1;
        if claimed != found {
            return Err(TraceError::CountMismatch { claimed, found });
        }
        if c != hex::encode(chain) {
            return Err(TraceError::ChainMismatch);
        }
        Ok(Self { records })
    }

    pub fn header(&self) -> Option<&TraceRecord> {
        self.records.first()
    }

    pub fn protocol(&self) -> Option<Protocol> {
        match self.header() {
            Some(TraceRecord::Header { protocol, .. }) => Some(*protocol),
            _ => None,
        }
    }
}

fn line(r: &TraceRecord) -> String {
    serde_json::to_string(r).expect("trace records serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SimulationTrace {
        SimulationTrace::seal(vec![
            TraceRecord::Header {
                version: TRACE_VERSION,
                name: "t".into(),
                protocol: Protocol::Venue,
                seed: 1,
                horizon: 10,
                params: SimParams::default(),
                channel: ChannelModel::default(),
                users: vec!["a".into()],
                venues: vec![],
                policies: BTreeMap::new(),
            },
            TraceRecord::Notification {
                time: 3,
                user: "a".into(),
                infected: "b".into(),
            },
        ])
    }

    #[test]
    fn round_trip() {
        let t = sample();
        let text = t.to_ndjson();
        assert_eq!(SimulationTrace::from_ndjson(&text).unwrap(), t);
    }

    #[test]
    fn truncation_and_edits_are_detected() {
        let text = sample().to_ndjson();
        let lines: Vec<&str> = text.lines().collect();
        let cut = lines[..2].join("\n");
        assert_eq!(
            SimulationTrace::from_ndjson(&cut),
            Err(TraceError::MissingFooter)
        );
        let edited = text.replace("\"time\":3", "\"time\":4");
        assert_eq!(
            SimulationTrace::from_ndjson(&edited),
            Err(TraceError::ChainMismatch)
        );
        let dropped = format!("{}\n{}\n", lines[0], lines[2]);
        assert!(matches!(
            SimulationTrace::from_ndjson(&dropped),
            Err(TraceError::CountMismatch { .. })
        ));
    }
}
