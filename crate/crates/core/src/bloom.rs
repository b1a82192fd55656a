// SPDX-License-Identifier: Apache-2.0

//! Bloom filters over ephemeral identifiers, the periodic venue digests built
//! from them, and the health authority's digest store used to check reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::schedule::EphemeralId;
use crate::wire::{Decoder, Encoder, Wire, WireError};

pub const PROTOCOL_FPR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum BloomError {
    #[error("target false-positive rate {0} outside (0, 1)")]
    BadRate(f64),
    #[error("no digest for venue {venue_id} covering [{start}, {end}]")]
    UnknownVenuePeriod {
        venue_id: String,
        start: i64,
        end: i64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BloomFilter {
    bits: Vec<u8>,
    m: u64,
    k: u32,
    capacity: u64,
    target_fpr: f64,
}

fn probe_seed(id: &EphemeralId) -> (u64, u64) {
    let mut h = Sha256::new();
    h.update(b"bloom");
    h.update(id.0);
    let out = h.finalize();
    let h1 = u64::from_le_bytes(out[..8].try_into().unwrap());
    let h2 = u64::from_le_bytes(out[8..16].try_into().unwrap()) | 1;
    (h1, h2)
}

impl BloomFilter {
    /// Sized for `capacity` elements at `target_fpr`:
    /// `m = ceil(-n ln p / ln^2 2)`, `k = max(1, round(m/n ln 2))`.
    pub fn with_capacity(capacity: u64, target_fpr: f64) -> Result<Self, BloomError> {
        if !(target_fpr > 0.0 && target_fpr < 1.0) {
            return Err(BloomError::BadRate(target_fpr));
        }
        if capacity == 0 {
            return Ok(Self {
                bits: Vec::new(),
                m: 0,
                k: 0,
                capacity: 0,
                target_fpr,
            });
        }
        let ln2 = std::f64::consts::LN_2;
        let n = capacity as f64;
        let m = (-n * target_fpr.ln() / (ln2 * ln2)).ceil().max(1.0) as u64;
        let k = ((m as f64 / n) * ln2).round().max(1.0) as u32;
        Ok(Self {
            bits: vec![0; m.div_ceil(8) as usize],
            m,
            k,
            capacity,
            target_fpr,
        })
    }

    pub fn bit_len(&self) -> u64 {
        self.m
    }

    pub fn hash_count(&self) -> u32 {
        self.k
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn target_fpr(&self) -> f64 {
        self.target_fpr
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    fn positions(&self, id: &EphemeralId) -> impl Iterator<Item = u64> + '_ {
        let (h1, h2) = probe_seed(id);
        (0..self.k as u64).map(move |i| h1.wrapping_add(i.wrapping_mul(h2)) % self.m)
    }

    /// No-op on an empty (zero-capacity) filter.
    pub fn insert(&mut self, id: &EphemeralId) {
        if self.m == 0 {
            return;
        }
        let pos: Vec<u64> = self.positions(id).collect();
        for p in pos {
            self.bits[(p / 8) as usize] |= 1 << (p % 8);
        }
    }

    pub fn contains(&self, id: &EphemeralId) -> bool {
        self.m != 0
            && self
                .positions(id)
                .all(|p| self.bits[(p / 8) as usize] & (1 << (p % 8)) != 0)
    }

    /// Expected false-positive rate for `inserted` elements.
    pub fn analytic_fpr(&self, inserted: u64) -> f64 {
        if self.m == 0 {
            return 0.0;
        }
        let k = self.k as f64;
        (1.0 - (-k * inserted as f64 / self.m as f64).exp()).powf(k)
    }
}

/// Builds a filter holding every distinct id. An empty set yields the empty
/// filter, which rejects everything.
pub fn build_filter<'a, I>(ids: I, target_fpr: f64) -> Result<BloomFilter, BloomError>
where
    I: IntoIterator<Item = &'a EphemeralId>,
{
    let distinct: BTreeSet<&EphemeralId> = ids.into_iter().collect();
    let mut f = BloomFilter::with_capacity(distinct.len() as u64, target_fpr)?;
    for id in distinct {
        f.insert(id);
    }
    Ok(f)
}

pub fn contains(filter: &BloomFilter, id: &EphemeralId) -> bool {
    filter.contains(id)
}

/// One venue's filter for the half-open period `[period_start, period_end)`.
///
/// Wire layout: `venue_id, period_start, period_end, m, k, capacity,
/// target_fpr (IEEE-754 bits), bits`. Bit `i` of the array is bit `i % 8`
/// (least significant first) of byte `i / 8`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VenueBloomDigest {
    pub venue_id: String,
    pub period_start: i64,
    pub period_end: i64,
    pub filter: BloomFilter,
}

impl VenueBloomDigest {
    fn overlaps(&self, start: i64, end: i64) -> bool {
        self.period_start <= end && self.period_end > start
    }
}

impl Wire for VenueBloomDigest {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.venue_id)
            .i64(self.period_start)
            .i64(self.period_end)
            .u64(self.filter.m)
            .u32(self.filter.k)
            .u64(self.filter.capacity)
            .f64(self.filter.target_fpr)
            .bytes(&self.filter.bits);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        let venue_id = dec.string()?;
        let period_start = dec.i64()?;
        let period_end = dec.i64()?;
        let m = dec.u64()?;
        let k = dec.u32()?;
        let capacity = dec.u64()?;
        let target_fpr = dec.f64()?;
        let bits = dec.bytes()?.to_vec();
        if bits.len() as u64 != m.div_ceil(8) {
            return Err(WireError::Invalid("bit array length disagrees with m"));
        }
        Ok(Self {
            venue_id,
            period_start,
            period_end,
            filter: BloomFilter {
                bits,
                m,
                k,
                capacity,
                target_fpr,
            },
        })
    }
}

/// Digests received from venues, keyed by venue id.
#[derive(Debug, Clone, Default)]
pub struct HaDigestStore {
    by_venue: BTreeMap<String, Vec<VenueBloomDigest>>,
}

impl HaDigestStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store(&mut self, digest: VenueBloomDigest) {
        self.by_venue
            .entry(digest.venue_id.clone())
            .or_default()
            .push(digest);
    }

    /// Drops digests whose period ended before `now - retention`.
    pub fn prune(&mut self, now: i64, retention: i64) {
        for list in self.by_venue.values_mut() {
            list.retain(|d| d.period_end > now - retention);
        }
    }

    pub fn digests(&self, venue_id: &str) -> &[VenueBloomDigest] {
        self.by_venue.get(venue_id).map_or(&[], Vec::as_slice)
    }

    /// True if the stored digests of `venue_id` reach the end of the period.
    pub fn covers(&self, venue_id: &str, start: i64, end: i64) -> bool {
        let mut overlapping = self
            .digests(venue_id)
            .iter()
            .filter(|d| d.overlaps(start, end))
            .peekable();
        overlapping.peek().is_some() && overlapping.any(|d| d.period_end >= end)
    }

    /// Per-identifier membership against every digest of `venue_id` that
    /// overlaps `[start, end]`.
    pub fn match_batch(
        &self,
        venue_id: &str,
        start: i64,
        end: i64,
        ids: &[EphemeralId],
    ) -> Result<Vec<bool>, BloomError> {
        if !self.covers(venue_id, start, end) {
            return Err(BloomError::UnknownVenuePeriod {
                venue_id: venue_id.to_owned(),
                start,
                end,
            });
        }
        let relevant: Vec<&VenueBloomDigest> = self
            .digests(venue_id)
            .iter()
            .filter(|d| d.overlaps(start, end))
            .collect();
        Ok(ids
            .iter()
            .map(|id| relevant.iter().any(|d| d.filter.contains(id)))
            .collect())
    }
}

pub fn match_batch(
    ha_filters: &HaDigestStore,
    venue_id: &str,
    start: i64,
    end: i64,
    ids: &[EphemeralId],
) -> Result<Vec<bool>, BloomError> {
    ha_filters.match_batch(venue_id, start, end, ids)
}
