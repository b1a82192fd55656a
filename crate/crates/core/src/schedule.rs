// SPDX-License-Identifier: Apache-2.0

//! Epoch/window discretization and identifier derivation.
//!
//! A venue stay is cut into windows of `W` seconds, each split into `n = W/L`
//! epochs of `L` seconds. Every window has its own random key, expanded into
//! the window's `n` identifiers through a PRF label bound to the venue id.
//! Intervals are half-open and anchored at the user's entry time.

use std::fmt;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Digest};
use crate::wire::{self, Decoder, Encoder, Wire, WireError};

pub const EPHID_LEN: usize = 16;
pub const BROADCAST_LABEL: &[u8] = b"broadcast key";

pub const DEFAULT_EPOCH_LENGTH: u64 = 180;
pub const DEFAULT_WINDOW_LENGTH: u64 = 7_200;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("epoch length must be positive")]
    ZeroEpoch,
    #[error("window length {window} is not a positive multiple of epoch length {epoch}")]
    WindowNotMultiple { window: u64, epoch: u64 },
    #[error("time {0} is negative")]
    NegativeTime(i64),
    #[error("stay shape invalid: {0}")]
    BadShape(String),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EphemeralId(#[serde(with = "wire::hex_array")] pub [u8; EPHID_LEN]);

impl fmt::Debug for EphemeralId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EphID({})", hex::encode(self.0))
    }
}

impl Wire for EphemeralId {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self(dec.array()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulingParams {
    /// Epoch length `L` in seconds.
    pub epoch_length: u64,
    /// Window length `W` in seconds.
    pub window_length: u64,
}

impl Default for SchedulingParams {
    fn default() -> Self {
        Self {
            epoch_length: DEFAULT_EPOCH_LENGTH,
            window_length: DEFAULT_WINDOW_LENGTH,
        }
    }
}

impl SchedulingParams {
    pub fn new(epoch_length: u64, window_length: u64) -> Result<Self, ScheduleError> {
        let p = Self {
            epoch_length,
            window_length,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.epoch_length == 0 {
            return Err(ScheduleError::ZeroEpoch);
        }
        if self.window_length == 0 || self.window_length % self.epoch_length != 0 {
            return Err(ScheduleError::WindowNotMultiple {
                window: self.window_length,
                epoch: self.epoch_length,
            });
        }
        Ok(())
    }

    /// Identifiers per window.
    pub fn per_window(&self) -> usize {
        (self.window_length / self.epoch_length) as usize
    }

    /// 1-based `(window, epoch)` for an offset from entry.
    pub fn epoch_of(&self, elapsed: i64) -> Result<EpochIndex, ScheduleError> {
        epoch_of(elapsed, self)
    }
}

/// 1-based position of an epoch within a stay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EpochIndex {
    pub window: u32,
    pub epoch: u32,
}

impl EpochIndex {
    /// 0-based sequence number of the epoch across the whole stay.
    pub fn ordinal(&self, params: &SchedulingParams) -> usize {
        (self.window as usize - 1) * params.per_window() + (self.epoch as usize - 1)
    }
}

pub fn epoch_of(elapsed: i64, params: &SchedulingParams) -> Result<EpochIndex, ScheduleError> {
    if elapsed < 0 {
        return Err(ScheduleError::NegativeTime(elapsed));
    }
    let t = elapsed as u64;
    Ok(EpochIndex {
        window: (t / params.window_length + 1) as u32,
        epoch: ((t % params.window_length) / params.epoch_length + 1) as u32,
    })
}

/// Per-window secret of one venue stay.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowKey {
    #[serde(with = "wire::hex_array")]
    pub key: [u8; 32],
    pub window_index: u32,
    pub venue_id: String,
}

impl fmt::Debug for WindowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WindowKey")
            .field("window_index", &self.window_index)
            .field("venue_id", &self.venue_id)
            .finish_non_exhaustive()
    }
}

impl WindowKey {
    pub fn generate<R: RngCore + CryptoRng>(
        window_index: u32,
        venue_id: impl Into<String>,
        rng: &mut R,
    ) -> Self {
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        Self {
            key,
            window_index,
            venue_id: venue_id.into(),
        }
    }
}

fn venue_label(venue_id: &str) -> Vec<u8> {
    let mut label = BROADCAST_LABEL.to_vec();
    label.extend_from_slice(venue_id.as_bytes());
    label
}

/// `n` identifiers of one window: `PRG(PRF(key, "broadcast key" || venue_id))`.
pub fn derive_window_ephids(wk: &WindowKey, params: &SchedulingParams) -> Vec<EphemeralId> {
    derive_with_label(&wk.key, &venue_label(&wk.venue_id), params.per_window())
}

fn derive_with_label(key: &[u8; 32], label: &[u8], count: usize) -> Vec<EphemeralId> {
    let seed = crypto::prf(key, label).expect("32-byte key satisfies prf minimum");
    crypto::prg_expand(&seed, count, EPHID_LEN).expect("count and length are valid")
}

/// Number of full-or-partial windows `x` and epochs in the last window `y`
/// for a stay that broadcast `epochs` identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StayShape {
    pub windows: u32,
    pub last_window_epochs: u32,
}

impl StayShape {
    pub fn from_epoch_count(epochs: usize, params: &SchedulingParams) -> Self {
        assert!(epochs >= 1, "a stay broadcasts at least one epoch");
        let n = params.per_window();
        Self {
            windows: ((epochs - 1) / n + 1) as u32,
            last_window_epochs: ((epochs - 1) % n + 1) as u32,
        }
    }

    pub fn epoch_count(&self, params: &SchedulingParams) -> usize {
        (self.windows as usize - 1) * params.per_window() + self.last_window_epochs as usize
    }
}

/// Reconstructs `EphID_{1,1} .. EphID_{x,y}` of a stay from its window keys
/// (`x = keys.len()`), the venue id and `y`.
pub fn reconstruct_stay(
    keys: &[[u8; 32]],
    venue_id: &str,
    last_window_epochs: u32,
    params: &SchedulingParams,
) -> Result<Vec<EphemeralId>, ScheduleError> {
    let n = params.per_window();
    if keys.is_empty() {
        return Err(ScheduleError::BadShape("no window keys".into()));
    }
    if last_window_epochs == 0 || last_window_epochs as usize > n {
        return Err(ScheduleError::BadShape(format!(
            "last window epochs {last_window_epochs} outside 1..={n}"
        )));
    }
    let label = venue_label(venue_id);
    let mut ids = Vec::with_capacity(keys.len() * n);
    for (i, key) in keys.iter().enumerate() {
        let mut window = derive_with_label(key, &label, n);
        if i + 1 == keys.len() {
            window.truncate(last_window_epochs as usize);
        }
        ids.extend(window);
    }
    Ok(ids)
}

/// `H(EphID_1 || ... || EphID_k)`, the digest carried in leave receipts.
pub fn ephid_digest(ids: &[EphemeralId]) -> Digest {
    let mut buf = Vec::with_capacity(ids.len() * EPHID_LEN);
    for id in ids {
        buf.extend_from_slice(&id.0);
    }
    crypto::hash(&buf)
}

// --- DP-3T daily key chain --------------------------------------------------

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailyKey {
    #[serde(with = "wire::hex_array")]
    pub key: [u8; 32],
    pub day_index: u32,
}

impl fmt::Debug for DailyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DailyKey")
            .field("day_index", &self.day_index)
            .finish_non_exhaustive()
    }
}

impl DailyKey {
    pub fn generate<R: RngCore + CryptoRng>(day_index: u32, rng: &mut R) -> Self {
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        Self { key, day_index }
    }
}

/// `SK_{x} = H(SK_{x-1})`.
pub fn dp3t_next_daily_key(k: &DailyKey) -> DailyKey {
    DailyKey {
        key: crypto::hash(&k.key).0,
        day_index: k.day_index + 1,
    }
}

/// `PRG(PRF(SK_x, "broadcast key"))`, with no venue binding.
pub fn dp3t_derive_ephids(k: &DailyKey, count: usize) -> Vec<EphemeralId> {
    derive_with_label(&k.key, BROADCAST_LABEL, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::collections::HashSet;

    fn key(venue: &str, rng: &mut ChaCha20Rng) -> WindowKey {
        WindowKey::generate(1, venue, rng)
    }

    #[test]
    fn default_params_give_forty_per_window() {
        let p = SchedulingParams::default();
        assert_eq!(p.per_window(), 40);
        let mut r = ChaCha20Rng::seed_from_u64(1);
        assert_eq!(derive_window_ephids(&key("A", &mut r), &p).len(), 40);
    }

    #[test]
    fn params_validation() {
        assert_eq!(SchedulingParams::new(0, 10), Err(ScheduleError::ZeroEpoch));
        assert!(matches!(
            SchedulingParams::new(180, 7000),
            Err(ScheduleError::WindowNotMultiple { .. })
        ));
        assert!(SchedulingParams::new(60, 600).is_ok());
    }

    #[test]
    fn epoch_boundaries() {
        let p = SchedulingParams::default();
        let at = |t| epoch_of(t, &p).map(|e| (e.window, e.epoch));
        assert_eq!(at(0), Ok((1, 1)));
        assert_eq!(at(179), Ok((1, 1)));
        assert_eq!(at(180), Ok((1, 2)));
        assert_eq!(at(7199), Ok((1, 40)));
        assert_eq!(at(7200), Ok((2, 1)));
        assert_eq!(at(-1), Err(ScheduleError::NegativeTime(-1)));
    }

    #[test]
    fn epoch_function_is_monotone_and_contiguous() {
        let p = SchedulingParams::new(60, 600).unwrap();
        let mut prev = epoch_of(0, &p).unwrap().ordinal(&p);
        assert_eq!(prev, 0);
        for t in 1..5_000 {
            let o = epoch_of(t, &p).unwrap().ordinal(&p);
            assert!(o == prev || o == prev + 1);
            prev = o;
        }
    }

    #[test]
    fn venue_binding_disjoint() {
        let p = SchedulingParams::default();
        let mut r = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..1_000 {
            let a = key("A", &mut r);
            let mut b = a.clone();
            b.venue_id = "B".into();
            let sa: HashSet<_> = derive_window_ephids(&a, &p).into_iter().collect();
            assert!(derive_window_ephids(&b, &p).iter().all(|id| !sa.contains(id)));
        }
    }

    #[test]
    fn reconstruction_matches_windows() {
        let p = SchedulingParams::new(60, 300).unwrap();
        let mut r = ChaCha20Rng::seed_from_u64(3);
        let keys: Vec<_> = (1..=3).map(|w| WindowKey::generate(w, "V", &mut r)).collect();
        let mut expected = Vec::new();
        for k in &keys {
            expected.extend(derive_window_ephids(k, &p));
        }
        expected.truncate(2 * 5 + 2);
        let raw: Vec<_> = keys.iter().map(|k| k.key).collect();
        assert_eq!(reconstruct_stay(&raw, "V", 2, &p).unwrap(), expected);
        assert!(reconstruct_stay(&raw, "V", 0, &p).is_err());
        assert!(reconstruct_stay(&raw, "V", 6, &p).is_err());
        assert!(reconstruct_stay(&[], "V", 1, &p).is_err());
    }

    #[test]
    fn stay_shape_round_trip() {
        let p = SchedulingParams::default();
        for epochs in 1..200 {
            let s = StayShape::from_epoch_count(epochs, &p);
            assert_eq!(s.epoch_count(&p), epochs);
            assert!(s.last_window_epochs >= 1 && s.last_window_epochs <= 40);
        }
        assert_eq!(
            StayShape::from_epoch_count(41, &p),
            StayShape {
                windows: 2,
                last_window_epochs: 1
            }
        );
    }

    #[test]
    fn daily_chain() {
        let mut r = ChaCha20Rng::seed_from_u64(4);
        let k0 = DailyKey::generate(0, &mut r);
        let k2 = dp3t_next_daily_key(&dp3t_next_daily_key(&k0));
        assert_eq!(k2.key, crypto::hash(&crypto::hash(&k0.key).0).0);
        assert_eq!(k2.day_index, 2);

        let mut chain = vec![k0];
        for _ in 1..14 {
            let next = dp3t_next_daily_key(chain.last().unwrap());
            assert!(next.day_index > chain.last().unwrap().day_index);
            chain.push(next);
        }
        let distinct: HashSet<_> = chain.iter().map(|k| k.key).collect();
        assert_eq!(distinct.len(), 14);
    }

    #[test]
    fn dp3t_derivation() {
        let mut r = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..200 {
            let k = DailyKey::generate(0, &mut r);
            let ids = dp3t_derive_ephids(&k, 96);
            assert_eq!(ids.len(), 96);
            assert_eq!(ids, dp3t_derive_ephids(&k, 96));
            let wk = WindowKey {
                key: k.key,
                window_index: 1,
                venue_id: "cafe".into(),
            };
            let bound: HashSet<_> = derive_window_ephids(&wk, &SchedulingParams::default())
                .into_iter()
                .collect();
            assert!(ids.iter().all(|id| !bound.contains(id)));
        }
    }
}
