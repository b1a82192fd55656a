// SPDX-License-Identifier: Apache-2.0

//! Messages exchanged between actors and their signed payload layouts.

use serde::{Deserialize, Serialize};

use crate::crypto::{
    self, Certificate, CommitmentValue, Digest, Opening, PublicKey, Signature,
};
use crate::schedule::EphemeralId;
use crate::wire::{decode_list, encode_list, Decoder, Encoder, Wire, WireError};

/// Departure notice a user sends to the venue over the unilaterally secure
/// channel. Carries no sender handle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepartureMessage {
    pub nonce: CommitmentValue,
    pub leave_time: i64,
    pub ephid_digest: Digest,
    /// Present only when the arrival-time extension is enabled.
    pub arrival_time: Option<i64>,
}

/// Venue-signed proof of presence.
///
/// Signed payload: `lp(nonce) || lp(leave_time) || lp(ephid_digest)`, followed
/// by `lp(arrival_time)` when the arrival-time extension is in use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaveReceipt {
    pub venue_id: String,
    pub nonce: CommitmentValue,
    pub leave_time: i64,
    pub arrival_time: Option<i64>,
    pub ephid_digest: Digest,
    pub venue_signature: Signature,
    pub venue_certificate: Certificate,
}

impl LeaveReceipt {
    pub fn payload(
        nonce: &CommitmentValue,
        leave_time: i64,
        ephid_digest: &Digest,
        arrival_time: Option<i64>,
    ) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.bytes(&nonce.0).i64(leave_time).bytes(&ephid_digest.0);
        if let Some(arrival) = arrival_time {
            enc.i64(arrival);
        }
        enc.finish()
    }

    pub fn signed_payload(&self) -> Vec<u8> {
        Self::payload(
            &self.nonce,
            self.leave_time,
            &self.ephid_digest,
            self.arrival_time,
        )
    }

    /// Checks the certificate chain to the health authority, that the
    /// certificate names this receipt's venue, and the venue signature.
    pub fn verify(&self, ha_public_key: &PublicKey) -> bool {
        self.venue_certificate.verify(ha_public_key)
            && self.venue_certificate.subject_id == self.venue_id
            && crypto::verify(
                &self.signed_payload(),
                &self.venue_signature,
                &self.venue_certificate.subject_public_key,
            )
    }
}

impl Wire for LeaveReceipt {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.venue_id);
        self.nonce.encode(enc);
        enc.i64(self.leave_time);
        enc.bool(self.arrival_time.is_some());
        if let Some(a) = self.arrival_time {
            enc.i64(a);
        }
        self.ephid_digest.encode(enc);
        self.venue_signature.encode(enc);
        self.venue_certificate.encode(enc);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        let venue_id = dec.string()?;
        let nonce = CommitmentValue::decode(dec)?;
        let leave_time = dec.i64()?;
        let arrival_time = if dec.bool()? { Some(dec.i64()?) } else { None };
        Ok(Self {
            venue_id,
            nonce,
            leave_time,
            arrival_time,
            ephid_digest: Digest::decode(dec)?,
            venue_signature: Signature::decode(dec)?,
            venue_certificate: Certificate::decode(dec)?,
        })
    }
}

/// Half-open contagious interval `[start, end)` in simulation seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContagiousPeriod {
    pub start: i64,
    pub end: i64,
}

impl ContagiousPeriod {
    pub fn contains(&self, t: i64) -> bool {
        self.start <= t && t < self.end
    }
}

/// Test-center signed statement that `rid` is contagious over `period`.
///
/// Signed payload: `lp(period.start) || lp(period.end) || lp(rid)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfectionCertificate {
    pub period: ContagiousPeriod,
    pub rid: CommitmentValue,
    pub test_center_signature: Signature,
    pub test_center_certificate: Certificate,
}

impl InfectionCertificate {
    pub fn payload(period: &ContagiousPeriod, rid: &CommitmentValue) -> Vec<u8> {
        Encoder::new()
            .i64(period.start)
            .i64(period.end)
            .bytes(&rid.0)
            .finish()
    }

    pub fn verify(&self, ha_public_key: &PublicKey) -> bool {
        self.test_center_certificate.verify(ha_public_key)
            && crypto::verify(
                &Self::payload(&self.period, &self.rid),
                &self.test_center_signature,
                &self.test_center_certificate.subject_public_key,
            )
    }
}

impl Wire for InfectionCertificate {
    fn encode(&self, enc: &mut Encoder) {
        enc.i64(self.period.start).i64(self.period.end);
        self.rid.encode(enc);
        self.test_center_signature.encode(enc);
        self.test_center_certificate.encode(enc);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self {
            period: ContagiousPeriod {
                start: dec.i64()?,
                end: dec.i64()?,
            },
            rid: CommitmentValue::decode(dec)?,
            test_center_signature: Signature::decode(dec)?,
            test_center_certificate: Certificate::decode(dec)?,
        })
    }
}

/// What a user hands the test center: her `rid` and its opening.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertificateRequest {
    pub rid: CommitmentValue,
    pub opening: Opening,
}

/// Per-venue upload of an infected user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub certificate: InfectionCertificate,
    pub nonce: CommitmentValue,
    pub nonce_opening: Opening,
    pub receipt: LeaveReceipt,
    pub venue_id: String,
    /// Epochs in the last window (`y`).
    pub last_window_epochs: u32,
    #[serde(with = "key_list")]
    pub window_keys: Vec<[u8; 32]>,
}

mod key_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(keys: &[[u8; 32]], ser: S) -> Result<S::Ok, S::Error> {
        keys.iter().map(hex::encode).collect::<Vec<_>>().serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<[u8; 32]>, D::Error> {
        Vec::<String>::deserialize(de)?
            .into_iter()
            .map(|s| {
                hex::decode(&s)
                    .ok()
                    .and_then(|v| v.try_into().ok())
                    .ok_or_else(|| serde::de::Error::custom("bad window key"))
            })
            .collect()
    }
}

struct RawKey([u8; 32]);

impl Wire for RawKey {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self(dec.array()?))
    }
}

impl Wire for ReportBundle {
    fn encode(&self, enc: &mut Encoder) {
        self.certificate.encode(enc);
        self.nonce.encode(enc);
        self.nonce_opening.encode(enc);
        self.receipt.encode(enc);
        enc.str(&self.venue_id).u32(self.last_window_epochs);
        let keys: Vec<RawKey> = self.window_keys.iter().map(|k| RawKey(*k)).collect();
        encode_list(enc, &keys);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self {
            certificate: InfectionCertificate::decode(dec)?,
            nonce: CommitmentValue::decode(dec)?,
            nonce_opening: Opening::decode(dec)?,
            receipt: LeaveReceipt::decode(dec)?,
            venue_id: dec.string()?,
            last_window_epochs: dec.u32()?,
            window_keys: decode_list::<RawKey>(dec)?.into_iter().map(|k| k.0).collect(),
        })
    }
}

/// Published `(id_v, time; EphID list)` record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendRecord {
    pub record_id: u64,
    pub venue_id: String,
    pub leave_time: i64,
    pub ephids: Vec<EphemeralId>,
}

impl Wire for BackendRecord {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.record_id).str(&self.venue_id).i64(self.leave_time);
        encode_list(enc, &self.ephids);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self {
            record_id: dec.u64()?,
            venue_id: dec.string()?,
            leave_time: dec.i64()?,
            ephids: decode_list(dec)?,
        })
    }
}

/// Presence proof sent by a user asking for a venue's records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceQuery {
    pub venue_id: String,
    pub receipt: LeaveReceipt,
}

impl Wire for TraceQuery {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.venue_id);
        self.receipt.encode(enc);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self {
            venue_id: dec.string()?,
            receipt: LeaveReceipt::decode(dec)?,
        })
    }
}

/// Step-(e) notice to a venue that an infected visitor was reported.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VenueNotice {
    pub venue_id: String,
    pub leave_time: i64,
    pub record_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectionCode {
    BadCertificate,
    BadOpening,
    BadReceipt,
    UnmatchedIdentifiers,
    OverlappingPresence,
}

impl RejectionCode {
    pub const ALL: [RejectionCode; 5] = [
        RejectionCode::BadCertificate,
        RejectionCode::BadOpening,
        RejectionCode::BadReceipt,
        RejectionCode::UnmatchedIdentifiers,
        RejectionCode::OverlappingPresence,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RejectionCode::BadCertificate => "bad-certificate",
            RejectionCode::BadOpening => "bad-opening",
            RejectionCode::BadReceipt => "bad-receipt",
            RejectionCode::UnmatchedIdentifiers => "unmatched-identifiers",
            RejectionCode::OverlappingPresence => "overlapping-presence",
        }
    }
}

impl std::fmt::Display for RejectionCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
