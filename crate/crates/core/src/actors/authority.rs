// SPDX-License-Identifier: Apache-2.0

//! Health authority (root of trust, digest store) and test centers.

use rand::{CryptoRng, RngCore};

use super::messages::{CertificateRequest, ContagiousPeriod, InfectionCertificate};
use super::observe::{InfoClass, ObservationLog};
use super::ProtocolError;
use crate::bloom::{BloomError, HaDigestStore, VenueBloomDigest};
use crate::crypto::{self, Certificate, PublicKey, SigningKeyPair};
use crate::schedule::EphemeralId;

pub const HA_ID: &str = "health-authority";

#[derive(Debug)]
pub struct HealthAuthority {
    keys: SigningKeyPair,
    digests: HaDigestStore,
    retention: i64,
    observations: ObservationLog,
}

impl HealthAuthority {
    pub fn new<R: RngCore + CryptoRng>(retention: i64, rng: &mut R) -> Self {
        Self {
            keys: SigningKeyPair::generate(HA_ID, rng),
            digests: HaDigestStore::new(),
            retention,
            observations: ObservationLog::default(),
        }
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.public_key()
    }

    pub fn certify(&mut self, subject_public_key: PublicKey, subject_id: &str) -> Certificate {
        self.observations.saw(InfoClass::VenueId, 1);
        Certificate::issue(&self.keys, subject_public_key, subject_id)
    }

    pub fn store_digest(&mut self, digest: VenueBloomDigest, now: i64) {
        self.observations.saw(InfoClass::VenueId, 1);
        self.digests.store(digest);
        self.digests.prune(now, self.retention);
    }

    pub fn covers(&self, venue_id: &str, start: i64, end: i64) -> bool {
        self.digests.covers(venue_id, start, end)
    }

    /// The back-end sends the identifiers in the clear; the authority answers
    /// one boolean per identifier.
    pub fn match_ids(
        &mut self,
        venue_id: &str,
        start: i64,
        end: i64,
        ids: &[EphemeralId],
    ) -> Result<Vec<bool>, BloomError> {
        self.observations.saw(InfoClass::EphId, ids.len() as u64);
        self.observations.saw(InfoClass::VenueId, 1);
        self.digests.match_batch(venue_id, start, end, ids)
    }

    pub fn digest_store(&self) -> &HaDigestStore {
        &self.digests
    }

    pub fn observations(&self) -> &ObservationLog {
        &self.observations
    }
}

#[derive(Debug)]
pub struct TestCenter {
    keys: SigningKeyPair,
    certificate: Certificate,
    observations: ObservationLog,
}

impl TestCenter {
    pub fn new<R: RngCore + CryptoRng>(
        id: &str,
        ha: &mut HealthAuthority,
        rng: &mut R,
    ) -> Self {
        let keys = SigningKeyPair::generate(id, rng);
        let certificate = ha.certify(keys.public_key(), id);
        Self {
            keys,
            certificate,
            observations: ObservationLog::default(),
        }
    }

    pub fn id(&self) -> &str {
        self.keys.holder_id()
    }

    pub fn certificate(&self) -> &Certificate {
        &self.certificate
    }

    /// Signs `period || rid` if `rid` opens to the identity the center
    /// established at the physical test.
    pub fn certify(
        &mut self,
        request: &CertificateRequest,
        tested_true_id: &str,
        period: ContagiousPeriod,
    ) -> Result<InfectionCertificate, ProtocolError> {
        self.observations.saw(InfoClass::TrueId, 1);
        self.observations.saw(InfoClass::RidValue, 1);
        self.observations.saw(InfoClass::RidOpening, 1);
        if request.opening.message != tested_true_id.as_bytes()
            || !crypto::verify_opening(
                &request.rid,
                &request.opening.message,
                &request.opening.blinding,
            )
        {
            return Err(ProtocolError::OpeningRejected);
        }
        let signature = self
            .keys
            .sign(&InfectionCertificate::payload(&period, &request.rid));
        Ok(InfectionCertificate {
            period,
            rid: request.rid,
            test_center_signature: signature,
            test_center_certificate: self.certificate.clone(),
        })
    }

    pub fn observations(&self) -> &ObservationLog {
        &self.observations
    }
}

pub fn testcenter_certify(
    center: &mut TestCenter,
    request: &CertificateRequest,
    tested_true_id: &str,
    period: ContagiousPeriod,
) -> Result<InfectionCertificate, ProtocolError> {
    center.certify(request, tested_true_id, period)
}
