// SPDX-License-Identifier: Apache-2.0

//! Low-cost decentralised scheme: a hash-chained daily key expanded into the
//! day's identifiers, broadcast everywhere in a shuffled order.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::schedule::{dp3t_derive_ephids, dp3t_next_daily_key, DailyKey, EphemeralId};
use crate::wire;

pub const DEFAULT_EPOCHS_PER_DAY: usize = 96;
const DAY: i64 = 86_400;

pub fn day_of(time: i64) -> u32 {
    time.div_euclid(DAY).max(0) as u32
}

/// What a bystander keeps for each identifier it heard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeardAggregate {
    pub ephid: EphemeralId,
    pub signal_dbm: f64,
    pub duration: u64,
    /// Coarse time indication: the day the identifier was first heard.
    pub day: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedKey {
    pub day: u32,
    #[serde(with = "wire::hex_array")]
    pub key: [u8; 32],
}

impl PublishedKey {
    /// Every identifier derivable from this key for days `day..=up_to_day`.
    pub fn derive_through(&self, up_to_day: u32, epochs_per_day: usize) -> Vec<(u32, Vec<EphemeralId>)> {
        let mut k = DailyKey {
            key: self.key,
            day_index: self.day,
        };
        let mut out = Vec::new();
        while k.day_index <= up_to_day {
            out.push((k.day_index, dp3t_derive_ephids(&k, epochs_per_day)));
            k = dp3t_next_daily_key(&k);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dp3tMatch {
    pub published_index: usize,
    pub hearings: Vec<HeardAggregate>,
}

#[derive(Debug)]
pub struct Dp3tUser {
    epochs_per_day: usize,
    keys: BTreeMap<u32, DailyKey>,
    schedule_day: Option<u32>,
    schedule: Vec<EphemeralId>,
    heard: BTreeMap<EphemeralId, HeardAggregate>,
}

impl Dp3tUser {
    pub fn new<R: RngCore + CryptoRng>(epochs_per_day: usize, first_day: u32, rng: &mut R) -> Self {
        let mut keys = BTreeMap::new();
        keys.insert(first_day, DailyKey::generate(first_day, rng));
        Self {
            epochs_per_day,
            keys,
            schedule_day: None,
            schedule: Vec::new(),
            heard: BTreeMap::new(),
        }
    }

    pub fn epochs_per_day(&self) -> usize {
        self.epochs_per_day
    }

    /// Daily key for `day`, extending the hash chain forward as needed.
    pub fn key_for_day(&mut self, day: u32) -> DailyKey {
        let (&last_day, last) = self
            .keys
            .range(..=day)
            .next_back()
            .unwrap_or_else(|| self.keys.iter().next().expect("at least one key"));
        if last_day >= day {
            return last.clone();
        }
        let mut k = last.clone();
        while k.day_index < day {
            k = dp3t_next_daily_key(&k);
            self.keys.insert(k.day_index, k.clone());
        }
        k
    }

    /// Epoch length in seconds.
    pub fn epoch_length(&self) -> i64 {
        DAY / self.epochs_per_day as i64
    }

    /// Identifier broadcast at `time`. Each day's identifiers go out in a
    /// random order.
    pub fn ephid_at<R: RngCore + CryptoRng>(&mut self, time: i64, rng: &mut R) -> EphemeralId {
        let day = day_of(time);
        if self.schedule_day != Some(day) {
            let key = self.key_for_day(day);
            let mut ids = dp3t_derive_ephids(&key, self.epochs_per_day);
            ids.shuffle(rng);
            self.schedule = ids;
            self.schedule_day = Some(day);
        }
        let slot = (time.rem_euclid(DAY) / self.epoch_length()) as usize;
        self.schedule[slot.min(self.epochs_per_day - 1)]
    }

    pub fn hear(&mut self, ephid: EphemeralId, signal_dbm: f64, time: i64, duration: u64) {
        self.heard
            .entry(ephid)
            .and_modify(|h| {
                h.signal_dbm = h.signal_dbm.max(signal_dbm);
                h.duration += duration;
            })
            .or_insert(HeardAggregate {
                ephid,
                signal_dbm,
                duration,
                day: day_of(time),
            });
    }

    pub fn heard(&self) -> impl Iterator<Item = &HeardAggregate> {
        self.heard.values()
    }

    /// Releases the key of the first infectious day, then switches to a fresh
    /// unlinked key from `today` on.
    pub fn report<R: RngCore + CryptoRng>(
        &mut self,
        first_infectious_day: u32,
        today: u32,
        rng: &mut R,
    ) -> PublishedKey {
        let first_known = *self.keys.keys().next().expect("at least one key");
        let day = first_infectious_day.max(first_known);
        let key = self.key_for_day(day);
        self.keys.retain(|d, _| *d < today);
        self.keys.insert(today, DailyKey::generate(today, rng));
        self.schedule_day = None;
        PublishedKey {
            day,
            key: key.key,
        }
    }

    /// Stored hearings whose identifier is in `ids`.
    pub fn match_against(&self, ids: &BTreeSet<EphemeralId>) -> Vec<HeardAggregate> {
        self.heard
            .values()
            .filter(|h| ids.contains(&h.ephid))
            .copied()
            .collect()
    }

    /// Recomputes identifiers from each published key through `up_to_day`
    /// and intersects them with local storage.
    pub fn match_published(&self, published: &[PublishedKey], up_to_day: u32) -> Vec<Dp3tMatch> {
        published
            .iter()
            .enumerate()
            .filter_map(|(i, pk)| {
                let ids: BTreeSet<EphemeralId> = pk
                    .derive_through(up_to_day, self.epochs_per_day)
                    .into_iter()
                    .flat_map(|(_, ids)| ids)
                    .collect();
                let hearings = self.match_against(&ids);
                (!hearings.is_empty()).then_some(Dp3tMatch {
                    published_index: i,
                    hearings,
                })
            })
            .collect()
    }
}

/// Back-end of the decentralised scheme: a public list of daily keys.
#[derive(Debug, Default)]
pub struct Dp3tBackend {
    published: Vec<PublishedKey>,
}

impl Dp3tBackend {
    pub fn publish(&mut self, key: PublishedKey) {
        self.published.push(key);
    }

    pub fn published(&self) -> &[PublishedKey] {
        &self.published
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn co_present_users_match_after_report() {
        let mut r = ChaCha20Rng::seed_from_u64(31);
        let mut alice = Dp3tUser::new(96, 0, &mut r);
        let mut bob = Dp3tUser::new(96, 0, &mut r);
        let t = 2 * DAY + 3_600;
        let id = alice.ephid_at(t, &mut r);
        bob.hear(id, -60.0, t, 600);
        let pk = alice.report(0, 3, &mut r);
        let m = bob.match_published(&[pk], 3);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].hearings[0].ephid, id);
    }

    #[test]
    fn rotation_after_report_is_unlinked() {
        let mut r = ChaCha20Rng::seed_from_u64(32);
        let mut alice = Dp3tUser::new(96, 0, &mut r);
        let before = alice.key_for_day(3);
        let pk = alice.report(1, 3, &mut r);
        let after = alice.key_for_day(3);
        assert_ne!(before.key, after.key);
        let derived: BTreeSet<_> = pk
            .derive_through(5, 96)
            .into_iter()
            .flat_map(|(_, ids)| ids)
            .collect();
        let mut bystander = Dp3tUser::new(96, 0, &mut r);
        let new_id = alice.ephid_at(3 * DAY + 10, &mut r);
        assert!(!derived.contains(&new_id));
        bystander.hear(new_id, -50.0, 3 * DAY + 10, 10);
        assert!(bystander.match_published(&[pk], 5).is_empty());
    }

    #[test]
    fn key_releases_following_days() {
        let mut r = ChaCha20Rng::seed_from_u64(33);
        let mut alice = Dp3tUser::new(96, 0, &mut r);
        let day1: BTreeSet<_> = (0..96).map(|s| alice.ephid_at(DAY + s * 900, &mut r)).collect();
        let day2: BTreeSet<_> = (0..96).map(|s| alice.ephid_at(2 * DAY + s * 900, &mut r)).collect();
        assert_eq!(day1.len(), 96);
        let pk = alice.report(1, 5, &mut r);
        let derived = pk.derive_through(2, 96);
        assert_eq!(derived.len(), 2);
        assert_eq!(derived[0].1.iter().copied().collect::<BTreeSet<_>>(), day1);
        assert_eq!(derived[1].1.iter().copied().collect::<BTreeSet<_>>(), day2);
    }
}
