// SPDX-License-Identifier: Apache-2.0

//! User app: venue sessions, leave receipts, reporting and local risk
//! evaluation.

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::messages::{
    BackendRecord, CertificateRequest, DepartureMessage, InfectionCertificate, LeaveReceipt,
    ReportBundle, TraceQuery,
};
use super::observe::{InfoClass, ObservationLog};
use super::ProtocolError;
use crate::crypto::{commit, Certificate, Commitment, CommitmentValue, PublicKey};
use crate::schedule::{
    derive_window_ephids, ephid_digest, EphemeralId, EpochIndex, SchedulingParams, StayShape,
    WindowKey,
};

/// Signal level of a reference transmitter at 2 m under free-space loss with
/// -59 dBm at 1 m.
pub fn default_proximity_dbm() -> f64 {
    -59.0 - 10.0 * 2.0 * 2f64.log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPolicy {
    /// Minimum close-contact time in seconds.
    pub exposure_threshold: u64,
    /// Minimum received signal counted as close proximity.
    pub proximity_threshold_dbm: f64,
}

impl Default for RiskPolicy {
    fn default() -> Self {
        Self {
            exposure_threshold: 15 * 60,
            proximity_threshold_dbm: default_proximity_dbm(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hearing {
    pub signal_dbm: f64,
    pub first_heard: i64,
    pub duration: u64,
}

/// One epoch of a venue stay: the identifier broadcast and everything heard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub index: EpochIndex,
    pub start: i64,
    pub own_ephid: EphemeralId,
    pub heard: BTreeMap<EphemeralId, Hearing>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub venue_id: String,
    pub entry_time: i64,
    pub nonce: Commitment,
    pub window_keys: Vec<WindowKey>,
    pub records: Vec<EpochRecord>,
    pub receipt: Option<LeaveReceipt>,
}

impl Visit {
    pub fn own_ephids(&self) -> Vec<EphemeralId> {
        self.records.iter().map(|r| r.own_ephid).collect()
    }

    pub fn shape(&self, params: &SchedulingParams) -> StayShape {
        StayShape::from_epoch_count(self.records.len(), params)
    }

    pub fn has_valid_receipt(&self) -> bool {
        self.receipt.is_some()
    }
}

#[derive(Debug)]
struct Session {
    venue_id: String,
    venue_certificate: Certificate,
    entry_time: i64,
    nonce: Commitment,
    window_keys: Vec<WindowKey>,
    window_ephids: Vec<EphemeralId>,
    records: Vec<EpochRecord>,
    departure: Option<DepartureMessage>,
}

impl Session {
    fn current(&self) -> &EpochRecord {
        self.records.last().expect("session has an open epoch")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryOutcome {
    Sensing,
    Declined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEvidence {
    pub index: EpochIndex,
    pub signal_dbm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskScore {
    pub matched_epochs: usize,
    pub close_epochs: usize,
    pub at_risk: bool,
    pub evidence: Vec<EpochEvidence>,
}

/// At risk iff the epochs in which a retrieved identifier was heard at or
/// above the proximity threshold add up to the exposure threshold. Each
/// `(window, epoch)` counts once however many matches it holds.
pub fn evaluate_risk(
    records: &[EpochRecord],
    retrieved: &[EphemeralId],
    policy: &RiskPolicy,
    params: &SchedulingParams,
) -> RiskScore {
    let wanted: std::collections::BTreeSet<&EphemeralId> = retrieved.iter().collect();
    let evidence: Vec<EpochEvidence> = records
        .iter()
        .filter_map(|rec| {
            rec.heard
                .iter()
                .filter(|(id, _)| wanted.contains(id))
                .map(|(_, h)| h.signal_dbm)
                .reduce(f64::max)
                .map(|signal_dbm| EpochEvidence {
                    index: rec.index,
                    signal_dbm,
                })
        })
        .collect();
    score_evidence(evidence, policy, params)
}

pub fn score_evidence(
    evidence: Vec<EpochEvidence>,
    policy: &RiskPolicy,
    params: &SchedulingParams,
) -> RiskScore {
    let close_epochs = evidence
        .iter()
        .filter(|e| e.signal_dbm >= policy.proximity_threshold_dbm)
        .count();
    RiskScore {
        matched_epochs: evidence.len(),
        close_epochs,
        at_risk: close_epochs > 0
            && close_epochs as u64 * params.epoch_length >= policy.exposure_threshold,
        evidence,
    }
}

#[derive(Debug)]
pub struct UserApp {
    true_id: String,
    rid: Commitment,
    presented_rid: CommitmentValue,
    params: SchedulingParams,
    ha_public_key: PublicKey,
    arrival_time_extension: bool,
    session: Option<Session>,
    visits: Vec<Visit>,
    discarded: usize,
    certificate: Option<InfectionCertificate>,
    observations: ObservationLog,
}

impl UserApp {
    pub fn new<R: RngCore + CryptoRng>(
        true_id: &str,
        params: SchedulingParams,
        ha_public_key: PublicKey,
        rng: &mut R,
    ) -> Self {
        let rid = commit(true_id.as_bytes(), rng);
        Self {
            true_id: true_id.to_owned(),
            presented_rid: rid.value(),
            rid,
            params,
            ha_public_key,
            arrival_time_extension: false,
            session: None,
            visits: Vec::new(),
            discarded: 0,
            certificate: None,
            observations: ObservationLog::default(),
        }
    }

    pub fn with_arrival_time_extension(mut self, enabled: bool) -> Self {
        self.arrival_time_extension = enabled;
        self
    }

    pub fn true_id(&self) -> &str {
        &self.true_id
    }

    pub fn rid(&self) -> CommitmentValue {
        self.rid.value()
    }

    /// Makes later visits commit to `rid` instead of the user's own. This is
    /// how a colluding user impersonates another.
    pub fn present_rid(&mut self, rid: CommitmentValue) {
        self.presented_rid = rid;
    }

    pub fn params(&self) -> &SchedulingParams {
        &self.params
    }

    pub fn is_sensing(&self) -> bool {
        matches!(&self.session, Some(s) if s.departure.is_none())
    }

    pub fn current_venue(&self) -> Option<&str> {
        self.session.as_ref().map(|s| s.venue_id.as_str())
    }

    /// Starts a session if the user consents: window 1 key, fresh per-visit
    /// nonce, epoch (1, 1) active.
    pub fn enter_venue<R: RngCore + CryptoRng>(
        &mut self,
        venue_id: &str,
        venue_certificate: Certificate,
        now: i64,
        consent: bool,
        rng: &mut R,
    ) -> Result<EntryOutcome, ProtocolError> {
        if let Some(s) = &self.session {
            return Err(ProtocolError::AlreadyInSession(s.venue_id.clone()));
        }
        if !consent {
            return Ok(EntryOutcome::Declined);
        }
        let key = WindowKey::generate(1, venue_id, rng);
        let window_ephids = derive_window_ephids(&key, &self.params);
        let nonce = commit(&self.presented_rid.0, rng);
        let first = EpochRecord {
            index: EpochIndex {
                window: 1,
                epoch: 1,
            },
            start: now,
            own_ephid: window_ephids[0],
            heard: BTreeMap::new(),
        };
        self.session = Some(Session {
            venue_id: venue_id.to_owned(),
            venue_certificate,
            entry_time: now,
            nonce,
            window_keys: vec![key],
            window_ephids,
            records: vec![first],
            departure: None,
        });
        Ok(EntryOutcome::Sensing)
    }

    /// Identifier to broadcast right now, if sensing.
    pub fn current_broadcast(&self) -> Option<EphemeralId> {
        self.session
            .as_ref()
            .filter(|s| s.departure.is_none())
            .map(|s| s.current().own_ephid)
    }

    pub fn current_epoch(&self) -> Option<EpochIndex> {
        self.session.as_ref().map(|s| s.current().index)
    }

    /// Advances the session to the epoch containing `now`, opening one record
    /// per elapsed epoch and a fresh window key at each rollover.
    pub fn epoch_tick<R: RngCore + CryptoRng>(
        &mut self,
        now: i64,
        rng: &mut R,
    ) -> Result<EphemeralId, ProtocolError> {
        let params = self.params;
        let session = match &mut self.session {
            Some(s) if s.departure.is_none() => s,
            _ => return Err(ProtocolError::NotSensing),
        };
        let target = params
            .epoch_of(now - session.entry_time)
            .map_err(|_| ProtocolError::NotSensing)?;
        while session.current().index.ordinal(&params) < target.ordinal(&params) {
            let cur = session.current().index;
            let next = if cur.epoch as usize == params.per_window() {
                let key = WindowKey::generate(cur.window + 1, session.venue_id.clone(), rng);
                session.window_ephids = derive_window_ephids(&key, &params);
                session.window_keys.push(key);
                EpochIndex {
                    window: cur.window + 1,
                    epoch: 1,
                }
            } else {
                EpochIndex {
                    window: cur.window,
                    epoch: cur.epoch + 1,
                }
            };
            let start = session.entry_time + (next.ordinal(&params) as i64) * params.epoch_length as i64;
            session.records.push(EpochRecord {
                index: next,
                start,
                own_ephid: session.window_ephids[next.epoch as usize - 1],
                heard: BTreeMap::new(),
            });
        }
        Ok(session.current().own_ephid)
    }

    /// Records a received identifier in the open epoch.
    pub fn hear(
        &mut self,
        ephid: EphemeralId,
        signal_dbm: f64,
        now: i64,
        duration: u64,
    ) -> Result<(), ProtocolError> {
        let session = match &mut self.session {
            Some(s) if s.departure.is_none() => s,
            _ => return Err(ProtocolError::NotSensing),
        };
        let rec = session.records.last_mut().expect("open epoch");
        if rec.own_ephid == ephid {
            return Ok(());
        }
        self.observations.saw(InfoClass::EphId, 1);
        rec.heard
            .entry(ephid)
            .and_modify(|h| {
                h.signal_dbm = h.signal_dbm.max(signal_dbm);
                h.duration += duration;
            })
            .or_insert(Hearing {
                signal_dbm,
                first_heard: now,
                duration,
            });
        Ok(())
    }

    /// Stops broadcasting and produces the departure notice for the venue.
    /// Epochs that would open exactly at `now` are not part of the stay.
    pub fn begin_leave(&mut self, now: i64) -> Result<DepartureMessage, ProtocolError> {
        let session = match &mut self.session {
            Some(s) if s.departure.is_none() => s,
            _ => return Err(ProtocolError::NotSensing),
        };
        while session.records.len() > 1 && session.current().start >= now {
            session.records.pop();
        }
        let keep_windows = session.current().index.window as usize;
        session.window_keys.truncate(keep_windows);
        let own: Vec<EphemeralId> = session.records.iter().map(|r| r.own_ephid).collect();
        let msg = DepartureMessage {
            nonce: session.nonce.value(),
            leave_time: now,
            ephid_digest: ephid_digest(&own),
            arrival_time: self.arrival_time_extension.then_some(session.entry_time),
        };
        session.departure = Some(msg.clone());
        Ok(msg)
    }

    /// Accepts the venue's answer to the departure notice. A receipt that
    /// fails verification discards the visit. The session ends either way.
    pub fn complete_leave(
        &mut self,
        answer: Result<LeaveReceipt, ProtocolError>,
    ) -> Result<&Visit, ProtocolError> {
        let session = match self.session.take() {
            Some(s) if s.departure.is_some() => s,
            other => {
                self.session = other;
                return Err(ProtocolError::NotSensing);
            }
        };
        let sent = session.departure.clone().expect("checked");
        let verdict = answer.and_then(|receipt| {
            let matches = receipt.nonce == sent.nonce
                && receipt.leave_time == sent.leave_time
                && receipt.ephid_digest == sent.ephid_digest
                && (receipt.arrival_time.is_none() || receipt.arrival_time == sent.arrival_time)
                && receipt.venue_id == session.venue_id
                && receipt.venue_certificate == session.venue_certificate;
            if matches && receipt.verify(&self.ha_public_key) {
                Ok(receipt)
            } else {
                Err(ProtocolError::InvalidReceipt)
            }
        });
        match verdict {
            Ok(receipt) => {
                self.visits.push(Visit {
                    venue_id: session.venue_id,
                    entry_time: session.entry_time,
                    nonce: session.nonce,
                    window_keys: session.window_keys,
                    records: session.records,
                    receipt: Some(receipt),
                });
                Ok(self.visits.last().unwrap())
            }
            Err(e) => {
                self.discarded += 1;
                Err(e)
            }
        }
    }

    /// Visits with a verified receipt, in order.
    pub fn visits(&self) -> &[Visit] {
        &self.visits
    }

    pub fn discarded_visits(&self) -> usize {
        self.discarded
    }

    /// Hands a completed visit to another (colluding) user.
    pub fn export_visit(&self, index: usize) -> Option<Visit> {
        self.visits.get(index).cloned()
    }

    pub fn adopt_visit(&mut self, visit: Visit) {
        self.visits.push(visit);
    }

    /// Opens `rid` to the test center.
    pub fn certificate_request(&self) -> CertificateRequest {
        CertificateRequest {
            rid: self.rid.value(),
            opening: self.rid.reveal(),
        }
    }

    pub fn store_certificate(&mut self, cert: InfectionCertificate) -> Result<(), ProtocolError> {
        if cert.rid != self.rid.value() || !cert.verify(&self.ha_public_key) {
            return Err(ProtocolError::InvalidCertificate);
        }
        self.certificate = Some(cert);
        Ok(())
    }

    pub fn certificate(&self) -> Option<&InfectionCertificate> {
        self.certificate.as_ref()
    }

    /// One bundle per verified visit whose leave time falls in the
    /// contagious period.
    pub fn build_reports(&self, certificate: &InfectionCertificate) -> Vec<ReportBundle> {
        self.visits
            .iter()
            .filter_map(|v| {
                let receipt = v.receipt.as_ref()?;
                if !certificate.period.contains(receipt.leave_time) {
                    return None;
                }
                let shape = v.shape(&self.params);
                Some(ReportBundle {
                    certificate: certificate.clone(),
                    nonce: v.nonce.value(),
                    nonce_opening: v.nonce.reveal(),
                    receipt: receipt.clone(),
                    venue_id: v.venue_id.clone(),
                    last_window_epochs: shape.last_window_epochs,
                    window_keys: v.window_keys.iter().map(|k| k.key).collect(),
                })
            })
            .collect()
    }

    /// Indexes into [`visits`](Self::visits) paired with the presence proof
    /// for each.
    pub fn trace_queries(&self) -> Vec<(usize, TraceQuery)> {
        self.visits
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                v.receipt.as_ref().map(|r| {
                    (
                        i,
                        TraceQuery {
                            venue_id: v.venue_id.clone(),
                            receipt: r.clone(),
                        },
                    )
                })
            })
            .collect()
    }

    /// Scores each retrieved record against the heard records of one visit.
    pub fn evaluate_visit(
        &mut self,
        visit: usize,
        retrieved: &[BackendRecord],
        policy: &RiskPolicy,
    ) -> Vec<RiskScore> {
        let Some(v) = self.visits.get(visit) else {
            return Vec::new();
        };
        let scores = retrieved
            .iter()
            .map(|rec| evaluate_risk(&v.records, &rec.ephids, policy, &self.params))
            .collect();
        self.observations.saw(
            InfoClass::EphId,
            retrieved.iter().map(|r| r.ephids.len() as u64).sum(),
        );
        scores
    }

    pub fn observations(&self) -> &ObservationLog {
        &self.observations
    }
}
