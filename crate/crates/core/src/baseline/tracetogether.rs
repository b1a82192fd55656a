// SPDX-License-Identifier: Apache-2.0

//! Centralised temporary-id scheme: the health ministry encrypts each user's
//! pseudonym with the interval index under a symmetric key, users swap those
//! tokens and a diagnosed user uploads the whole contact log.

use std::collections::{BTreeMap, BTreeSet};

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::duration_at_risk;
use crate::actors::{InfoClass, ObservationLog, RiskPolicy};
use crate::wire;

/// Interval between temporary id rotations, in seconds.
pub const DEFAULT_TID_INTERVAL: i64 = 15 * 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pseudonym(#[serde(with = "wire::hex_array")] pub [u8; 16]);

/// Broadcast token: `nonce(12) || AEAD(pseudonym || be64(interval))`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TempId(#[serde(with = "wire::hex_vec")] pub Vec<u8>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactTriple {
    pub own: TempId,
    pub peer: TempId,
    pub signal_dbm: f64,
    /// Seconds spent in contact; auxiliary data stored with each triple.
    pub duration: u64,
    pub time: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtContact {
    pub phone: String,
    pub pseudonym: Pseudonym,
    pub close_duration: u64,
    pub at_risk: bool,
    /// `(signal, seconds)` of every triple naming this peer.
    pub hearings: Vec<(f64, u64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TtTraceResult {
    pub contacts: Vec<TtContact>,
    /// Contact edges the ministry learns: (uploader, peer).
    pub edges: BTreeSet<(Pseudonym, Pseudonym)>,
    /// Tokens that failed authentication.
    pub rejected: usize,
}

pub struct MohServer {
    cipher: ChaCha20Poly1305,
    registry: BTreeMap<Pseudonym, String>,
    observations: ObservationLog,
}

impl std::fmt::Debug for MohServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MohServer")
            .field("registered", &self.registry.len())
            .finish_non_exhaustive()
    }
}

impl MohServer {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        Self {
            cipher: ChaCha20Poly1305::new(Key::from_slice(&key)),
            registry: BTreeMap::new(),
            observations: ObservationLog::default(),
        }
    }

    pub fn register<R: RngCore + CryptoRng>(&mut self, phone: &str, rng: &mut R) -> Pseudonym {
        self.observations.saw(InfoClass::PhoneNumber, 1);
        loop {
            let mut p = [0u8; 16];
            rng.fill_bytes(&mut p);
            let p = Pseudonym(p);
            if !self.registry.contains_key(&p) {
                self.registry.insert(p, phone.to_owned());
                return p;
            }
        }
    }

    pub fn issue_tid<R: RngCore + CryptoRng>(
        &self,
        pseudonym: &Pseudonym,
        interval: u64,
        rng: &mut R,
    ) -> TempId {
        let mut nonce = [0u8; 12];
        rng.fill_bytes(&mut nonce);
        let mut pt = Vec::with_capacity(24);
        pt.extend_from_slice(&pseudonym.0);
        pt.extend_from_slice(&interval.to_be_bytes());
        let ct = self
            .cipher
            .encrypt(Nonce::from_slice(&nonce), pt.as_slice())
            .expect("in-memory encryption does not fail");
        let mut out = nonce.to_vec();
        out.extend_from_slice(&ct);
        TempId(out)
    }

    /// Authenticates and opens a token.
    pub fn decrypt(&self, tid: &TempId) -> Option<(Pseudonym, u64)> {
        if tid.0.len() < 12 {
            return None;
        }
        let (nonce, ct) = tid.0.split_at(12);
        let pt = self.cipher.decrypt(Nonce::from_slice(nonce), ct).ok()?;
        if pt.len() != 24 {
            return None;
        }
        let mut p = [0u8; 16];
        p.copy_from_slice(&pt[..16]);
        let interval = u64::from_be_bytes(pt[16..].try_into().ok()?);
        Some((Pseudonym(p), interval))
    }

    pub fn phone_of(&self, p: &Pseudonym) -> Option<&str> {
        self.registry.get(p).map(String::as_str)
    }

    /// Decrypts an uploaded contact log, maps peers to phone numbers and
    /// applies the duration rule.
    pub fn trace(&mut self, triples: &[ContactTriple], policy: &RiskPolicy) -> TtTraceResult {
        let mut per_peer: BTreeMap<Pseudonym, Vec<(f64, u64)>> = BTreeMap::new();
        let mut result = TtTraceResult::default();
        for t in triples {
            let (Some((own, _)), Some((peer, _))) = (self.decrypt(&t.own), self.decrypt(&t.peer)) else {
                result.rejected += 1;
                continue;
            };
            self.observations.saw(InfoClass::Pseudonym, 2);
            self.observations.saw(InfoClass::ContactEdge, 1);
            result.edges.insert((own, peer));
            per_peer.entry(peer).or_default().push((t.signal_dbm, t.duration));
        }
        for (peer, hearings) in per_peer {
            let Some(phone) = self.registry.get(&peer).cloned() else {
                continue;
            };
            self.observations.saw(InfoClass::PhoneNumber, 1);
            let (close_duration, at_risk) = duration_at_risk(hearings.iter().copied(), policy);
            result.contacts.push(TtContact {
                phone,
                pseudonym: peer,
                close_duration,
                at_risk,
                hearings,
            });
        }
        result
    }

    pub fn observations(&self) -> &ObservationLog {
        &self.observations
    }
}

#[derive(Debug, Clone)]
pub struct TtUser {
    pub pseudonym: Pseudonym,
    current: Option<(u64, TempId)>,
    triples: Vec<ContactTriple>,
    index: BTreeMap<(TempId, TempId), usize>,
}

impl TtUser {
    pub fn new(pseudonym: Pseudonym) -> Self {
        Self {
            pseudonym,
            current: None,
            triples: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Token for the interval containing `time`, fetched from the ministry
    /// on rollover.
    pub fn tid_at<R: RngCore + CryptoRng>(&mut self, moh: &MohServer, time: i64, rng: &mut R) -> TempId {
        let interval = time.div_euclid(DEFAULT_TID_INTERVAL).max(0) as u64;
        match &self.current {
            Some((i, tid)) if *i == interval => tid.clone(),
            _ => {
                let tid = moh.issue_tid(&self.pseudonym, interval, rng);
                self.current = Some((interval, tid.clone()));
                tid
            }
        }
    }

    /// Stores a contact. Repeated sightings of the same token pair extend
    /// one triple.
    pub fn record(&mut self, own: TempId, peer: TempId, signal_dbm: f64, duration: u64, time: i64) {
        if let Some(&i) = self.index.get(&(own.clone(), peer.clone())) {
            let t = &mut self.triples[i];
            t.signal_dbm = t.signal_dbm.max(signal_dbm);
            t.duration += duration;
            return;
        }
        self.index.insert((own.clone(), peer.clone()), self.triples.len());
        self.triples.push(ContactTriple {
            own,
            peer,
            signal_dbm,
            duration,
            time,
        });
    }

    pub fn triples(&self) -> &[ContactTriple] {
        &self.triples
    }
}

pub fn tt_register<R: RngCore + CryptoRng>(moh: &mut MohServer, phone: &str, rng: &mut R) -> Pseudonym {
    moh.register(phone, rng)
}

pub fn tt_issue_tid<R: RngCore + CryptoRng>(
    moh: &MohServer,
    pseudonym: &Pseudonym,
    interval: u64,
    rng: &mut R,
) -> TempId {
    moh.issue_tid(pseudonym, interval, rng)
}

pub fn tt_trace(moh: &mut MohServer, triples: &[ContactTriple], policy: &RiskPolicy) -> TtTraceResult {
    moh.trace(triples, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn tid_round_trips_and_rejects_tamper() {
        let mut r = ChaCha20Rng::seed_from_u64(41);
        let mut moh = MohServer::new(&mut r);
        let p = moh.register("+10000000001", &mut r);
        let tid = moh.issue_tid(&p, 77, &mut r);
        assert_eq!(moh.decrypt(&tid), Some((p, 77)));
        let mut bad = tid.clone();
        bad.0[20] ^= 1;
        assert_eq!(moh.decrypt(&bad), None);
        assert_eq!(moh.decrypt(&TempId(vec![0; 5])), None);
    }

    #[test]
    fn trace_names_close_contacts() {
        let mut r = ChaCha20Rng::seed_from_u64(42);
        let mut moh = MohServer::new(&mut r);
        let a = moh.register("+1A", &mut r);
        let b = moh.register("+1B", &mut r);
        let c = moh.register("+1C", &mut r);
        let mut ua = TtUser::new(a);
        let mut ub = TtUser::new(b);
        let mut uc = TtUser::new(c);
        let policy = RiskPolicy::default();
        let own = ua.tid_at(&moh, 0, &mut r);
        let tb = ub.tid_at(&moh, 0, &mut r);
        let tc = uc.tid_at(&moh, 0, &mut r);
        ua.record(own.clone(), tb, -55.0, 1_200, 0);
        ua.record(own.clone(), tc, -80.0, 1_200, 0);
        ua.record(own, TempId(vec![9; 40]), -50.0, 1_200, 0);
        let res = moh.trace(ua.triples(), &policy);
        assert_eq!(res.rejected, 1);
        assert_eq!(res.edges.len(), 2);
        let risky: Vec<_> = res.contacts.iter().filter(|c| c.at_risk).map(|c| c.phone.as_str()).collect();
        assert_eq!(risky, vec!["+1B"]);
    }

    #[test]
    fn tokens_unlinkable_across_intervals() {
        let mut r = ChaCha20Rng::seed_from_u64(43);
        let moh = MohServer::new(&mut r);
        let mut u = TtUser::new(Pseudonym([1; 16]));
        let t0 = u.tid_at(&moh, 0, &mut r);
        let t0b = u.tid_at(&moh, 899, &mut r);
        let t1 = u.tid_at(&moh, 900, &mut r);
        assert_eq!(t0, t0b);
        assert_ne!(t0, t1);
    }
}
