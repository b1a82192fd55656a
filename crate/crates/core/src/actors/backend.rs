// SPDX-License-Identifier: Apache-2.0

//! Back-end server: validates reports, publishes records and answers
//! presence-proved trace queries.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::authority::HealthAuthority;
use super::messages::{BackendRecord, RejectionCode, ReportBundle, TraceQuery, VenueNotice};
use super::observe::{InfoClass, ObservationLog};
use super::ProtocolError;
use crate::crypto::{self, CommitmentValue, PublicKey};
use crate::schedule::{ephid_digest, reconstruct_stay, SchedulingParams, StayShape};

const DAY: i64 = 86_400;

/// Which published records a presence proof unlocks, as a predicate over
/// `(record leave time, query leave time)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "hours")]
pub enum TimePolicy {
    SameDate,
    WithinHours(u32),
}

impl Default for TimePolicy {
    fn default() -> Self {
        TimePolicy::SameDate
    }
}

impl TimePolicy {
    pub fn admits(&self, record_time: i64, query_time: i64) -> bool {
        match *self {
            TimePolicy::SameDate => record_time.div_euclid(DAY) == query_time.div_euclid(DAY),
            TimePolicy::WithinHours(h) => (record_time - query_time).abs() <= h as i64 * 3_600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub params: SchedulingParams,
    /// Overlap in seconds tolerated between two reports of one rid at
    /// different venues.
    pub exclusion_tolerance: i64,
    pub retention: i64,
    pub default_policy: TimePolicy,
    /// With arrival times in receipts, stays shorter than this unlock nothing.
    pub min_trace_stay: i64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            params: SchedulingParams::default(),
            exclusion_tolerance: 0,
            retention: 14 * DAY,
            default_policy: TimePolicy::SameDate,
            min_trace_stay: 5 * 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Presence {
    venue_id: String,
    start: i64,
    end: i64,
}

#[derive(Debug)]
pub struct BackendServer {
    ha_public_key: PublicKey,
    config: BackendConfig,
    policies: BTreeMap<String, TimePolicy>,
    records: Vec<BackendRecord>,
    accepted_nonces: BTreeMap<CommitmentValue, u64>,
    presence_by_rid: BTreeMap<CommitmentValue, Vec<Presence>>,
    next_record: u64,
    notices: Vec<VenueNotice>,
    observations: ObservationLog,
}

impl BackendServer {
    pub fn new(ha_public_key: PublicKey, config: BackendConfig) -> Self {
        Self {
            ha_public_key,
            config,
            policies: BTreeMap::new(),
            records: Vec::new(),
            accepted_nonces: BTreeMap::new(),
            presence_by_rid: BTreeMap::new(),
            next_record: 0,
            notices: Vec::new(),
            observations: ObservationLog::default(),
        }
    }

    pub fn set_policy(&mut self, venue_id: &str, policy: TimePolicy) {
        self.policies.insert(venue_id.to_owned(), policy);
    }

    pub fn policy(&self, venue_id: &str) -> TimePolicy {
        self.policies
            .get(venue_id)
            .copied()
            .unwrap_or(self.config.default_policy)
    }

    pub fn records(&self) -> &[BackendRecord] {
        &self.records
    }

    /// Guaranteed presence interval of a reported stay.
    ///
    /// Without arrival times only `epochs - 1` full epochs are certain to
    /// precede the leave time, so the interval is
    /// `[leave - (epochs - 1) L, leave]`.
    fn presence_interval(&self, bundle: &ReportBundle, epochs: usize) -> (i64, i64) {
        let leave = bundle.receipt.leave_time;
        match bundle.receipt.arrival_time {
            Some(a) => (a, leave),
            None => (
                leave - (epochs as i64 - 1) * self.config.params.epoch_length as i64,
                leave,
            ),
        }
    }

    /// Runs the report checks in order:
    /// (a) infection certificate and nonce opening,
    /// (b) identifier reconstruction and receipt signature,
    /// (c) membership in the venue's digests,
    /// then the one-venue-at-a-time rule, then (d) publication and
    /// (e) venue notification.
    pub fn process_report(
        &mut self,
        bundle: &ReportBundle,
        ha: &mut HealthAuthority,
    ) -> Result<BackendRecord, RejectionCode> {
        let params = self.config.params;
        self.observations.saw(InfoClass::RidValue, 1);
        self.observations.saw(InfoClass::Nonce, 1);
        self.observations.saw(InfoClass::NonceOpening, 1);
        self.observations.saw(InfoClass::LeaveTime, 1);
        self.observations.saw(InfoClass::VenueId, 1);
        self.observations
            .saw(InfoClass::WindowKey, bundle.window_keys.len() as u64);

        // (a)
        let cert = &bundle.certificate;
        if !cert.verify(&self.ha_public_key) || !cert.period.contains(bundle.receipt.leave_time) {
            return Err(RejectionCode::BadCertificate);
        }
        if bundle.nonce_opening.message != cert.rid.0
            || !crypto::verify_opening(
                &bundle.nonce,
                &bundle.nonce_opening.message,
                &bundle.nonce_opening.blinding,
            )
        {
            return Err(RejectionCode::BadOpening);
        }

        // (b)
        let receipt = &bundle.receipt;
        if receipt.venue_id != bundle.venue_id
            || receipt.nonce != bundle.nonce
            || !receipt.verify(&self.ha_public_key)
        {
            return Err(RejectionCode::BadReceipt);
        }
        let ids = reconstruct_stay(
            &bundle.window_keys,
            &bundle.venue_id,
            bundle.last_window_epochs,
            &params,
        )
        .map_err(|_| RejectionCode::BadReceipt)?;
        if ephid_digest(&ids) != receipt.ephid_digest {
            return Err(RejectionCode::BadReceipt);
        }
        if let Some(arrival) = receipt.arrival_time {
            let stay = (receipt.leave_time - arrival).max(0) as u64;
            let expected = stay.div_ceil(params.epoch_length).max(1) as usize;
            if expected != ids.len() {
                return Err(RejectionCode::BadReceipt);
            }
        }
        self.observations.saw(InfoClass::EphId, ids.len() as u64);

        if let Some(&existing) = self.accepted_nonces.get(&bundle.nonce) {
            if let Some(rec) = self.records.iter().find(|r| r.record_id == existing) {
                return Ok(rec.clone());
            }
        }

        // (c)
        let shape = StayShape {
            windows: bundle.window_keys.len() as u32,
            last_window_epochs: bundle.last_window_epochs,
        };
        let claim_start = receipt.leave_time
            - (shape.epoch_count(&params) as i64) * params.epoch_length as i64;
        let matched = ha
            .match_ids(&bundle.venue_id, claim_start, receipt.leave_time, &ids)
            .map_err(|_| RejectionCode::UnmatchedIdentifiers)?;
        if !matched.iter().all(|m| *m) {
            return Err(RejectionCode::UnmatchedIdentifiers);
        }

        let (start, end) = self.presence_interval(bundle, ids.len());
        let tolerance = self.config.exclusion_tolerance;
        let clash = self
            .presence_by_rid
            .get(&cert.rid)
            .into_iter()
            .flatten()
            .any(|p| {
                p.venue_id != bundle.venue_id && {
                    let overlap = p.end.min(end) - p.start.max(start);
                    overlap > tolerance
                }
            });
        if clash {
            return Err(RejectionCode::OverlappingPresence);
        }

        // (d)
        let record = BackendRecord {
            record_id: self.next_record,
            venue_id: bundle.venue_id.clone(),
            leave_time: receipt.leave_time,
            ephids: ids,
        };
        self.next_record += 1;
        self.records.push(record.clone());
        self.accepted_nonces.insert(bundle.nonce, record.record_id);
        self.presence_by_rid
            .entry(cert.rid)
            .or_default()
            .push(Presence {
                venue_id: bundle.venue_id.clone(),
                start,
                end,
            });

        // (e)
        self.notices.push(VenueNotice {
            venue_id: record.venue_id.clone(),
            leave_time: record.leave_time,
            record_id: record.record_id,
        });
        Ok(record)
    }

    pub fn take_notices(&mut self) -> Vec<VenueNotice> {
        std::mem::take(&mut self.notices)
    }

    /// Verifies the presence proof and returns the venue's records that
    /// satisfy its time policy.
    pub fn answer_trace(
        &mut self,
        query: &TraceQuery,
        now: i64,
    ) -> Result<Vec<BackendRecord>, ProtocolError> {
        self.observations.saw(InfoClass::Nonce, 1);
        self.observations.saw(InfoClass::LeaveTime, 1);
        self.observations.saw(InfoClass::EphIdDigest, 1);
        self.observations.saw(InfoClass::VenueId, 1);
        let receipt = &query.receipt;
        if receipt.venue_id != query.venue_id || !receipt.verify(&self.ha_public_key) {
            return Err(ProtocolError::InvalidReceipt);
        }
        let horizon = now - self.config.retention;
        self.records.retain(|r| r.leave_time >= horizon);
        if let Some(arrival) = receipt.arrival_time {
            if receipt.leave_time - arrival < self.config.min_trace_stay {
                return Ok(Vec::new());
            }
        }
        let policy = self.policy(&query.venue_id);
        Ok(self
            .records
            .iter()
            .filter(|r| r.venue_id == query.venue_id && policy.admits(r.leave_time, receipt.leave_time))
            .cloned()
            .collect())
    }

    /// Rids with at least one accepted report.
    pub fn reported_rids(&self) -> BTreeSet<CommitmentValue> {
        self.presence_by_rid.keys().copied().collect()
    }

    pub fn observations(&self) -> &ObservationLog {
        &self.observations
    }
}

pub fn backend_answer_trace(
    backend: &mut BackendServer,
    query: &TraceQuery,
    now: i64,
) -> Result<Vec<BackendRecord>, ProtocolError> {
    backend.answer_trace(query, now)
}
