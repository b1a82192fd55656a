// SPDX-License-Identifier: Apache-2.0

//! Hash, PRF, PRG, Pedersen commitments and signatures.
//!
//! * hash: SHA-256
//! * PRF: HMAC-SHA-256
//! * PRG: SHA-256 in counter mode, block `j` is `SHA-256(seed || be32(j))`
//! * commitment: Pedersen over the Ristretto group
//! * signatures: Ed25519 (deterministic), verified in strict mode

use std::fmt;
use std::sync::OnceLock;

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256, Sha512};
use thiserror::Error;

use crate::schedule::{EphemeralId, EPHID_LEN};
use crate::wire::{self, Decoder, Encoder, Wire, WireError};

pub const DIGEST_LEN: usize = 32;
pub const MIN_PRF_KEY_LEN: usize = 16;

const PEDERSEN_H_DOMAIN: &[u8] = b"venue-act/pedersen/H";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("parameter error: {0}")]
    Parameter(String),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Digest(#[serde(with = "wire::hex_array")] pub [u8; DIGEST_LEN]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", hex::encode(self.0))
    }
}

impl Wire for Digest {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self(dec.array()?))
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Keyed pseudorandom function. Keys shorter than 16 bytes are refused.
pub fn prf(key: &[u8], label: &[u8]) -> Result<Digest, CryptoError> {
    if key.len() < MIN_PRF_KEY_LEN {
        return Err(CryptoError::Parameter(format!(
            "prf key must be at least {MIN_PRF_KEY_LEN} bytes, got {}",
            key.len()
        )));
    }
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(label);
    Ok(Digest(mac.finalize().into_bytes().into()))
}

/// Expands `seed` into `count` identifiers. The output is a prefix-stable
/// stream: expanding to `k` identifiers yields the first `k` of any longer
/// expansion.
pub fn prg_expand(
    seed: &Digest,
    count: usize,
    id_length: usize,
) -> Result<Vec<EphemeralId>, CryptoError> {
    if count == 0 {
        return Err(CryptoError::Parameter("prg count must be positive".into()));
    }
    if id_length != EPHID_LEN {
        return Err(CryptoError::Parameter(format!(
            "identifier length must be {EPHID_LEN} bytes, got {id_length}"
        )));
    }
    let blocks = (count * id_length).div_ceil(DIGEST_LEN);
    let mut stream = Vec::with_capacity(blocks * DIGEST_LEN);
    for counter in 0..blocks as u32 {
        let mut h = Sha256::new();
        h.update(seed.0);
        h.update(counter.to_be_bytes());
        stream.extend_from_slice(&h.finalize());
    }
    Ok(stream
        .chunks_exact(id_length)
        .take(count)
        .map(|c| EphemeralId(c.try_into().unwrap()))
        .collect())
}

// --- Pedersen commitments ---------------------------------------------------

fn generator_h() -> RistrettoPoint {
    static H: OnceLock<RistrettoPoint> = OnceLock::new();
    *H.get_or_init(|| RistrettoPoint::hash_from_bytes::<Sha512>(PEDERSEN_H_DOMAIN))
}

fn message_scalar(message: &[u8]) -> Scalar {
    Scalar::hash_from_bytes::<Sha512>(message)
}

/// Public part of a commitment: a compressed Ristretto point.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CommitmentValue(#[serde(with = "wire::hex_array")] pub [u8; 32]);

impl fmt::Debug for CommitmentValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CommitmentValue({})", hex::encode(&self.0[..8]))
    }
}

impl Wire for CommitmentValue {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self(dec.array()?))
    }
}

/// The opening of a commitment, disclosed only through [`Commitment::reveal`].
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Opening {
    #[serde(with = "wire::hex_vec")]
    pub message: Vec<u8>,
    #[serde(with = "wire::hex_array")]
    pub blinding: [u8; 32],
}

impl fmt::Debug for Opening {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Opening").finish_non_exhaustive()
    }
}

impl Wire for Opening {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.message).bytes(&self.blinding);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self {
            message: dec.bytes()?.to_vec(),
            blinding: dec.array()?,
        })
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Commitment {
    value: CommitmentValue,
    opening: Opening,
}

impl fmt::Debug for Commitment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Commitment").field(&self.value).finish()
    }
}

impl Commitment {
    pub fn value(&self) -> CommitmentValue {
        self.value
    }

    pub fn reveal(&self) -> Opening {
        self.opening.clone()
    }
}

/// Commits to a non-empty message with a fresh uniformly random blinding.
pub fn commit<R: RngCore + CryptoRng>(message: &[u8], rng: &mut R) -> Commitment {
    debug_assert!(!message.is_empty(), "commitment message must be non-empty");
    let blinding = Scalar::random(rng);
    let point = RISTRETTO_BASEPOINT_POINT * message_scalar(message) + generator_h() * blinding;
    Commitment {
        value: CommitmentValue(point.compress().to_bytes()),
        opening: Opening {
            message: message.to_vec(),
            blinding: blinding.to_bytes(),
        },
    }
}

/// True iff `(message, blinding)` recomputes `value`. Malformed points and
/// non-canonical scalars simply fail.
pub fn verify_opening(value: &CommitmentValue, message: &[u8], blinding: &[u8; 32]) -> bool {
    if CompressedRistretto(value.0).decompress().is_none() {
        return false;
    }
    let Some(blinding) = Option::<Scalar>::from(Scalar::from_canonical_bytes(*blinding)) else {
        return false;
    };
    let point = RISTRETTO_BASEPOINT_POINT * message_scalar(message) + generator_h() * blinding;
    point.compress().to_bytes() == value.0
}

// --- Signatures -------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PublicKey(#[serde(with = "wire::hex_array")] pub [u8; 32]);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(&self.0[..8]))
    }
}

impl Wire for PublicKey {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self(dec.array()?))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature(#[serde(with = "wire::hex_array")] pub [u8; 64]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex::encode(&self.0[..8]))
    }
}

impl Wire for Signature {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self(dec.array()?))
    }
}

/// A signing key bound to the identifier of its holder (venue or test
/// center id, or the health authority's own name).
#[derive(Clone)]
pub struct SigningKeyPair {
    secret: SigningKey,
    public_key: PublicKey,
    holder_id: String,
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeyPair")
            .field("public_key", &self.public_key)
            .field("holder_id", &self.holder_id)
            .finish_non_exhaustive()
    }
}

impl SigningKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(holder_id: impl Into<String>, rng: &mut R) -> Self {
        let secret = SigningKey::generate(rng);
        let public_key = PublicKey(secret.verifying_key().to_bytes());
        Self {
            secret,
            public_key,
            holder_id: holder_id.into(),
        }
    }

    pub fn public_key(&self) -> PublicKey {
        self.public_key
    }

    pub fn holder_id(&self) -> &str {
        &self.holder_id
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.secret.sign(message).to_bytes())
    }
}

pub fn sign(message: &[u8], key: &SigningKeyPair) -> Signature {
    key.sign(message)
}

pub fn verify(message: &[u8], signature: &Signature, public_key: &PublicKey) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&public_key.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    vk.verify_strict(message, &sig).is_ok()
}

/// Issuer-signed binding of a public key to a subject identifier.
///
/// Signed payload: `lp(subject_public_key) || lp(subject_id)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub subject_public_key: PublicKey,
    pub subject_id: String,
    pub issuer_signature: Signature,
}

impl Certificate {
    pub fn payload(subject_public_key: &PublicKey, subject_id: &str) -> Vec<u8> {
        Encoder::new()
            .bytes(&subject_public_key.0)
            .str(subject_id)
            .finish()
    }

    pub fn issue(issuer: &SigningKeyPair, subject_public_key: PublicKey, subject_id: &str) -> Self {
        let issuer_signature = issuer.sign(&Self::payload(&subject_public_key, subject_id));
        Self {
            subject_public_key,
            subject_id: subject_id.to_owned(),
            issuer_signature,
        }
    }

    pub fn verify(&self, issuer: &PublicKey) -> bool {
        verify(
            &Self::payload(&self.subject_public_key, &self.subject_id),
            &self.issuer_signature,
            issuer,
        )
    }
}

impl Wire for Certificate {
    fn encode(&self, enc: &mut Encoder) {
        self.subject_public_key.encode(enc);
        enc.str(&self.subject_id);
        self.issuer_signature.encode(enc);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self {
            subject_public_key: PublicKey::decode(dec)?,
            subject_id: dec.string()?,
            issuer_signature: Signature::decode(dec)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::collections::HashSet;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    // Reference values below were produced with Python's hashlib/hmac.

    #[test]
    fn hash_empty_vector() {
        assert_eq!(
            hex::encode(hash(b"").0),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn hash_is_deterministic_and_sensitive_to_suffix() {
        let mut r = rng();
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let len = r.gen_range(0..64);
            let x: Vec<u8> = (0..len).map(|_| r.gen()).collect();
            assert_eq!(hash(&x), hash(&x));
            let mut y = x.clone();
            y.push(0);
            assert_ne!(hash(&x), hash(&y));
            seen.insert(hash(&y));
        }
    }

    #[test]
    fn prf_reference_vector() {
        let key: Vec<u8> = (0u8..32).collect();
        let out = prf(&key, b"broadcast keyvenue-A").unwrap();
        assert_eq!(hex::encode(out.0), PRF_VECTOR);
    }

    const PRF_VECTOR: &str = "9b04a6da3b2813eeeea6d89aa32afc40087c869aa889a59cc4580e799d2c0e45";

    #[test]
    fn prf_rejects_short_keys() {
        assert!(matches!(prf(&[0u8; 15], b"x"), Err(CryptoError::Parameter(_))));
        assert!(prf(&[0u8; 16], b"x").is_ok());
    }

    #[test]
    fn prf_venue_labels_differ() {
        let mut r = rng();
        for _ in 0..1_000 {
            let k: [u8; 32] = r.gen();
            assert_ne!(
                prf(&k, b"broadcast key||venueA").unwrap(),
                prf(&k, b"broadcast key||venueB").unwrap()
            );
        }
    }

    #[test]
    fn prg_reference_vector() {
        let seed = hash(b"seed");
        let ids = prg_expand(&seed, 3, 16).unwrap();
        let got: Vec<String> = ids.iter().map(|i| hex::encode(i.0)).collect();
        assert_eq!(got, PRG_VECTOR);
    }

    const PRG_VECTOR: [&str; 3] = [
        "2ef3f9e1cdd4e5857b213c14535c4a2f",
        "f06aedb7e9ff7023916be5301a72b06b",
        "5a0a2acf09fd086532911be969b2fbc4",
    ];

    #[test]
    fn prg_contract() {
        let seed = hash(b"s");
        assert_eq!(prg_expand(&seed, 40, 16).unwrap().len(), 40);
        assert_eq!(
            prg_expand(&seed, 1, 16).unwrap()[..],
            prg_expand(&seed, 2, 16).unwrap()[..1]
        );
        assert!(prg_expand(&seed, 0, 16).is_err());
        assert!(prg_expand(&seed, 4, 8).is_err());
    }

    #[test]
    fn prg_identifiers_pairwise_distinct() {
        let mut r = rng();
        for _ in 0..1_000 {
            let seed = Digest(r.gen());
            let ids = prg_expand(&seed, 40, 16).unwrap();
            let set: HashSet<_> = ids.iter().collect();
            assert_eq!(set.len(), 40);
        }
    }

    #[test]
    fn commitment_round_trip_and_hiding() {
        let mut r = rng();
        let a = commit(b"alice", &mut r);
        let b = commit(b"alice", &mut r);
        let op = a.reveal();
        assert!(verify_opening(&a.value(), &op.message, &op.blinding));
        assert_ne!(a.value(), b.value());
    }

    #[test]
    fn commitment_rejects_malformed_inputs() {
        let mut r = rng();
        let c = commit(b"m", &mut r);
        let op = c.reveal();
        assert!(!verify_opening(&CommitmentValue([0xff; 32]), b"m", &op.blinding));
        // Non-canonical scalar encoding.
        assert!(!verify_opening(&c.value(), b"m", &[0xff; 32]));
    }

    #[test]
    fn signature_basics() {
        let mut r = rng();
        let kp = SigningKeyPair::generate("venue-A", &mut r);
        let other = SigningKeyPair::generate("venue-B", &mut r);
        let sig = sign(b"msg", &kp);
        assert!(verify(b"msg", &sig, &kp.public_key()));
        assert!(!verify(b"msg\x01", &sig, &kp.public_key()));
        assert!(!verify(b"msg", &sig, &other.public_key()));
        assert!(!verify(b"msg", &sig, &PublicKey([0xff; 32])));
        // Deterministic scheme.
        assert_eq!(sig, sign(b"msg", &kp));
    }

    #[test]
    fn certificate_chain() {
        let mut r = rng();
        let ha = SigningKeyPair::generate("HA", &mut r);
        let venue = SigningKeyPair::generate("cafe", &mut r);
        let cert = Certificate::issue(&ha, venue.public_key(), "cafe");
        assert!(cert.verify(&ha.public_key()));
        let mut tampered = cert.clone();
        tampered.subject_id = "bar".into();
        assert!(!tampered.verify(&ha.public_key()));
        let self_signed = Certificate::issue(&venue, venue.public_key(), "cafe");
        assert!(!self_signed.verify(&ha.public_key()));
        assert_eq!(Certificate::from_bytes(&cert.to_bytes()).unwrap(), cert);
    }
}
