// SPDX-License-Identifier: Apache-2.0

//! Venue actor: captures on-premise broadcasts, monitors them for anomalies,
//! signs leave receipts and ships periodic Bloom digests to the authority.

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::authority::HealthAuthority;
use super::messages::{DepartureMessage, LeaveReceipt, VenueNotice};
use super::observe::{InfoClass, ObservationLog};
use super::ProtocolError;
use crate::bloom::{build_filter, BloomError, VenueBloomDigest};
use crate::crypto::{Certificate, SigningKeyPair};
use crate::schedule::EphemeralId;

pub const DEFAULT_CLOCK_TOLERANCE: i64 = 60;
pub const DEFAULT_RETENTION: i64 = 14 * 86_400;

/// Radio-layer handle the venue's sensors attach to a transmission. Used only
/// for on-premise monitoring; never forwarded to any other actor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EmitterId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyPolicy {
    /// Distinct identifiers one emitter may send per rate bucket.
    pub max_ids_per_bucket: usize,
    /// Bucket length in seconds, normally the epoch length.
    pub bucket_length: i64,
    /// Reference-power reading above which a transmitter is flagged.
    pub max_signal_dbm: f64,
}

impl Default for AnomalyPolicy {
    fn default() -> Self {
        Self {
            max_ids_per_bucket: 2,
            bucket_length: 180,
            max_signal_dbm: -45.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Flooding,
    SignalTooStrong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub kind: AnomalyKind,
    pub emitter: EmitterId,
    pub time: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VenueConfig {
    pub clock_tolerance: i64,
    pub retention: i64,
    pub anomaly: AnomalyPolicy,
    pub arrival_time_extension: bool,
}

impl Default for VenueConfig {
    fn default() -> Self {
        Self {
            clock_tolerance: DEFAULT_CLOCK_TOLERANCE,
            retention: DEFAULT_RETENTION,
            anomaly: AnomalyPolicy::default(),
            arrival_time_extension: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Heard {
    first_seen: i64,
    last_seen: i64,
}

#[derive(Debug)]
pub struct Venue {
    keys: SigningKeyPair,
    certificate: Certificate,
    config: VenueConfig,
    heard: BTreeMap<EphemeralId, Heard>,
    bucket: i64,
    bucket_ids: BTreeMap<EmitterId, BTreeSet<EphemeralId>>,
    flagged: BTreeSet<(EmitterId, AnomalyKind)>,
    anomalies: Vec<Anomaly>,
    digest_cursor: i64,
    notices: Vec<VenueNotice>,
    observations: ObservationLog,
}

impl Venue {
    /// Generates the venue key pair and has it certified by the authority.
    /// Digests start covering from `opened_at`.
    pub fn new<R: RngCore + CryptoRng>(
        id: &str,
        config: VenueConfig,
        opened_at: i64,
        ha: &mut HealthAuthority,
        rng: &mut R,
    ) -> Self {
        let keys = SigningKeyPair::generate(id, rng);
        let certificate = ha.certify(keys.public_key(), id);
        Self::with_certificate(keys, certificate, config, opened_at)
    }

    /// A venue holding whatever certificate it was given, including none
    /// that chains to the authority.
    pub fn with_certificate(
        keys: SigningKeyPair,
        certificate: Certificate,
        config: VenueConfig,
        opened_at: i64,
    ) -> Self {
        Self {
            keys,
            certificate,
            config,
            heard: BTreeMap::new(),
            bucket: i64::MIN,
            bucket_ids: BTreeMap::new(),
            flagged: BTreeSet::new(),
            anomalies: Vec::new(),
            digest_cursor: opened_at,
            notices: Vec::new(),
            observations: ObservationLog::default(),
        }
    }

    pub fn id(&self) -> &str {
        self.keys.holder_id()
    }

    pub fn certificate(&self) -> &Certificate {
        &self.certificate
    }

    pub fn config(&self) -> &VenueConfig {
        &self.config
    }

    /// Stores an on-premise broadcast and runs the flooding and signal
    /// checks. Returns any anomaly raised by this observation.
    pub fn record_broadcast(
        &mut self,
        ephid: EphemeralId,
        signal_dbm: f64,
        emitter: EmitterId,
        now: i64,
    ) -> Vec<Anomaly> {
        self.observations.saw(InfoClass::EphId, 1);
        let entry = self.heard.entry(ephid).or_insert(Heard {
            first_seen: now,
            last_seen: now,
        });
        entry.first_seen = entry.first_seen.min(now);
        entry.last_seen = entry.last_seen.max(now);

        let policy = self.config.anomaly;
        let bucket = now.div_euclid(policy.bucket_length.max(1));
        if bucket != self.bucket {
            self.bucket = bucket;
            self.bucket_ids.clear();
            self.flagged.clear();
        }
        let mut raised = Vec::new();
        let ids = self.bucket_ids.entry(emitter).or_default();
        ids.insert(ephid);
        if ids.len() > policy.max_ids_per_bucket
            && self.flagged.insert((emitter, AnomalyKind::Flooding))
        {
            raised.push(Anomaly {
                kind: AnomalyKind::Flooding,
                emitter,
                time: now,
            });
        }
        if signal_dbm > policy.max_signal_dbm
            && self.flagged.insert((emitter, AnomalyKind::SignalTooStrong))
        {
            raised.push(Anomaly {
                kind: AnomalyKind::SignalTooStrong,
                emitter,
                time: now,
            });
        }
        self.anomalies.extend(raised.iter().cloned());
        raised
    }

    pub fn has_heard(&self, ephid: &EphemeralId) -> bool {
        self.heard.contains_key(ephid)
    }

    pub fn heard_count(&self) -> usize {
        self.heard.len()
    }

    pub fn anomalies(&self) -> &[Anomaly] {
        &self.anomalies
    }

    /// Signs `nonce || time || digest` if the claimed departure time agrees
    /// with the venue clock within tolerance.
    pub fn issue_receipt(
        &mut self,
        msg: &DepartureMessage,
        now: i64,
    ) -> Result<LeaveReceipt, ProtocolError> {
        self.observations.saw(InfoClass::Nonce, 1);
        self.observations.saw(InfoClass::LeaveTime, 1);
        self.observations.saw(InfoClass::EphIdDigest, 1);
        if (msg.leave_time - now).abs() > self.config.clock_tolerance {
            return Err(ProtocolError::ClockSkew {
                claimed: msg.leave_time,
                venue_clock: now,
            });
        }
        let arrival_time = if self.config.arrival_time_extension {
            self.observations.saw(InfoClass::ArrivalTime, 1);
            match msg.arrival_time {
                Some(a) if a <= msg.leave_time => Some(a),
                _ => return Err(ProtocolError::MissingArrivalTime),
            }
        } else {
            None
        };
        let signature = self.keys.sign(&LeaveReceipt::payload(
            &msg.nonce,
            msg.leave_time,
            &msg.ephid_digest,
            arrival_time,
        ));
        Ok(LeaveReceipt {
            venue_id: self.id().to_owned(),
            nonce: msg.nonce,
            leave_time: msg.leave_time,
            arrival_time,
            ephid_digest: msg.ephid_digest,
            venue_signature: signature,
            venue_certificate: self.certificate.clone(),
        })
    }

    /// Digest of identifiers heard in `[previous cursor, now)`. Identifiers
    /// last heard before `now - retention` are evicted first.
    pub fn emit_digest(&mut self, now: i64, fpr: f64) -> Result<VenueBloomDigest, BloomError> {
        let horizon = now - self.config.retention;
        self.heard.retain(|_, h| h.last_seen >= horizon);
        let start = self.digest_cursor;
        let ids: Vec<&EphemeralId> = self
            .heard
            .iter()
            .filter(|(_, h)| h.first_seen < now && h.last_seen >= start)
            .map(|(id, _)| id)
            .collect();
        let filter = build_filter(ids, fpr)?;
        self.digest_cursor = now;
        Ok(VenueBloomDigest {
            venue_id: self.id().to_owned(),
            period_start: start,
            period_end: now,
            filter,
        })
    }

    pub fn digest_cursor(&self) -> i64 {
        self.digest_cursor
    }

    pub fn receive_notice(&mut self, notice: VenueNotice) {
        self.observations.saw(InfoClass::LeaveTime, 1);
        self.notices.push(notice);
    }

    pub fn notices(&self) -> &[VenueNotice] {
        &self.notices
    }

    pub fn observations(&self) -> &ObservationLog {
        &self.observations
    }
}
