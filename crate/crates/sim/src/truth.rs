// SPDX-License-Identifier: Apache-2.0

//! Ground truth from true positions only. Nothing here looks at what any
//! protocol did.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::channel::ChannelModel;
use crate::trace::TraceRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct Stay {
    pub user: String,
    pub place: String,
    pub venue: bool,
    pub stay: u32,
    pub position: [f64; 2],
    pub start: i64,
    pub end: i64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfectionWindow {
    pub start: i64,
    pub end: i64,
    pub reported_at: i64,
}

/// One exposure of `contact` to `infected` during a single pair of stays.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Exposure {
    pub contact: String,
    pub infected: String,
    pub place: String,
    pub venue: bool,
    pub seconds: u64,
}

#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub exposures: Vec<Exposure>,
    /// `(contact, infected)` exposed on premises.
    pub on_premise: BTreeSet<(String, String)>,
    /// `(contact, infected)` exposed only off premises.
    pub off_premise: BTreeSet<(String, String)>,
}

impl GroundTruth {
    pub fn exposed(&self) -> BTreeSet<(String, String)> {
        self.on_premise.union(&self.off_premise).cloned().collect()
    }
}

pub fn stays(records: &[TraceRecord]) -> Vec<Stay> {
    records
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Presence {
                user,
                place,
                venue,
                stay,
                position,
                start,
                end,
            } => Some(Stay {
                user: user.clone(),
                place: place.clone(),
                venue: *venue,
                stay: *stay,
                position: *position,
                start: *start,
                end: *end,
            }),
            _ => None,
        })
        .collect()
}

/// Contagious windows by user. The report time is the first report-like
/// record for the user, or the end of the trace.
pub fn infections(records: &[TraceRecord]) -> BTreeMap<String, InfectionWindow> {
    let mut out = BTreeMap::new();
    let mut reported: BTreeMap<String, i64> = BTreeMap::new();
    let mut last = 0;
    for r in records {
        match r {
            TraceRecord::Infection {
                user, start, end, ..
            } => {
                out.entry(user.clone()).or_insert(InfectionWindow {
                    start: *start,
                    end: *end,
                    reported_at: i64::MAX,
                });
            }
            TraceRecord::Report { time, user, .. }
            | TraceRecord::KeyPublished { time, user, .. }
            | TraceRecord::MohTrace {
                time,
                reporter: user,
                ..
            } => {
                reported.entry(user.clone()).or_insert(*time);
            }
            TraceRecord::Header { horizon, .. } => last = *horizon,
            _ => {}
        }
    }
    for (u, w) in out.iter_mut() {
        w.reported_at = reported.get(u).copied().unwrap_or(last);
    }
    out
}

fn overlap(a: (i64, i64), b: (i64, i64)) -> Option<(i64, i64)> {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    (lo < hi).then_some((lo, hi))
}

/// Close contact with an infected user during their contagious window, at
/// most `distance` metres apart, summed per pair of stays; exposed when the
/// sum reaches `threshold` seconds.
pub fn ground_truth(records: &[TraceRecord], distance: f64, threshold: u64) -> GroundTruth {
    let stays = stays(records);
    let infected = infections(records);
    let mut by_place: BTreeMap<&str, Vec<&Stay>> = BTreeMap::new();
    for s in &stays {
        by_place.entry(&s.place).or_default().push(s);
    }
    let mut acc: BTreeMap<(String, String, String, u32, u32), (bool, u64)> = BTreeMap::new();
    for list in by_place.values() {
        for i in list.iter().filter(|s| infected.contains_key(&s.user)) {
            let w = infected[&i.user];
            let Some(iv) = overlap((i.start, i.end), (w.start, w.end)) else {
                continue;
            };
            for j in list.iter().filter(|s| s.user != i.user) {
                let Some((lo, hi)) = overlap(iv, (j.start, j.end)) else {
                    continue;
                };
                if ChannelModel::distance(i.position, j.position) > distance {
                    continue;
                }
                let e = acc
                    .entry((j.user.clone(), i.user.clone(), i.place.clone(), j.stay, i.stay))
                    .or_insert((i.venue, 0));
                e.1 += (hi - lo) as u64;
            }
        }
    }
    let mut truth = GroundTruth::default();
    for ((contact, inf, place, _, _), (venue, seconds)) in acc {
        if seconds == 0 || seconds < threshold {
            continue;
        }
        let pair = (contact.clone(), inf.clone());
        if venue {
            truth.on_premise.insert(pair);
        }
        truth.exposures.push(Exposure {
            contact,
            infected: inf,
            place,
            venue,
            seconds,
        });
    }
    for e in &truth.exposures {
        let pair = (e.contact.clone(), e.infected.clone());
        if !e.venue && !truth.on_premise.contains(&pair) {
            truth.off_premise.insert(pair);
        }
    }
    truth.exposures.sort();
    truth
}

/// Pairs `(a, b)` that were at the same place within `range` metres at any
/// time before `until`, from `a`'s point of view.
pub fn contacts_before(
    records: &[TraceRecord],
    who: &str,
    until: i64,
    range: f64,
) -> BTreeSet<String> {
    let stays = stays(records);
    let mut out = BTreeSet::new();
    for a in stays.iter().filter(|s| s.user == who) {
        for b in stays.iter().filter(|s| s.user != who && s.place == a.place) {
            let Some((lo, _)) = overlap((a.start, a.end), (b.start, b.end)) else {
                continue;
            };
            if lo < until && ChannelModel::distance(a.position, b.position) <= range {
                out.insert(b.user.clone());
            }
        }
    }
    out
}

/// Users `(a, b)` who stood in the same venue on the same calendar day.
pub fn same_venue_same_day(records: &[TraceRecord]) -> BTreeSet<(String, String)> {
    let stays = stays(records);
    let mut days: BTreeMap<(String, i64), BTreeSet<String>> = BTreeMap::new();
    for s in stays.iter().filter(|s| s.venue) {
        let first = s.start.div_euclid(crate::scenario::DAY);
        let last = (s.end - 1).div_euclid(crate::scenario::DAY);
        for d in first..=last {
            days.entry((s.place.clone(), d)).or_default().insert(s.user.clone());
        }
    }
    let mut out = BTreeSet::new();
    for users in days.values() {
        for a in users {
            for b in users {
                if a != b {
                    out.insert((a.clone(), b.clone()));
                }
            }
        }
    }
    out
}

/// Pairs that were ever in range of each other off premises.
pub fn off_premise_contacts(records: &[TraceRecord], range: f64) -> BTreeSet<(String, String)> {
    let stays = stays(records);
    let mut out = BTreeSet::new();
    for a in stays.iter().filter(|s| !s.venue) {
        for b in stays.iter().filter(|s| !s.venue && s.user != a.user && s.place == a.place) {
            if overlap((a.start, a.end), (b.start, b.end)).is_some()
                && ChannelModel::distance(a.position, b.position) <= range
            {
                out.insert((a.user.clone(), b.user.clone()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn presence(user: &str, place: &str, venue: bool, pos: [f64; 2], start: i64, end: i64) -> TraceRecord {
        TraceRecord::Presence {
            user: user.into(),
            place: place.into(),
            venue,
            stay: 1,
            position: pos,
            start,
            end,
        }
    }

    fn infection(user: &str) -> TraceRecord {
        TraceRecord::Infection {
            time: 0,
            user: user.into(),
            test_center: "tc".into(),
            start: 0,
            end: 1_000_000,
            accepted_by_app: true,
        }
    }

    #[test]
    fn eighteen_minutes_at_one_metre_is_an_exposure() {
        let r = vec![
            infection("i"),
            presence("i", "cafe", true, [0.0, 0.0], 0, 1_080),
            presence("j", "cafe", true, [1.0, 0.0], 0, 1_080),
        ];
        let t = ground_truth(&r, 2.0, 900);
        assert!(t.on_premise.contains(&("j".into(), "i".into())));
        assert!(!t.on_premise.contains(&("i".into(), "j".into())));
    }

    #[test]
    fn ten_second_street_encounter_is_not() {
        let r = vec![
            infection("i"),
            presence("i", "street", false, [0.0, 0.0], 0, 10),
            presence("j", "street", false, [1.0, 0.0], 0, 10),
        ];
        assert!(ground_truth(&r, 2.0, 900).exposed().is_empty());
        assert_eq!(off_premise_contacts(&r, 10.0).len(), 2);
    }

    #[test]
    fn twenty_minutes_at_five_metres_is_not() {
        let r = vec![
            infection("i"),
            presence("i", "cafe", true, [0.0, 0.0], 0, 1_200),
            presence("j", "cafe", true, [5.0, 0.0], 0, 1_200),
        ];
        assert!(ground_truth(&r, 2.0, 900).exposed().is_empty());
    }

    #[test]
    fn contact_outside_contagious_window_is_not_counted() {
        let r = vec![
            TraceRecord::Infection {
                time: 0,
                user: "i".into(),
                test_center: "tc".into(),
                start: 1_000,
                end: 2_000,
                accepted_by_app: true,
            },
            presence("i", "cafe", true, [0.0, 0.0], 0, 1_500),
            presence("j", "cafe", true, [1.0, 0.0], 0, 1_500),
        ];
        assert!(ground_truth(&r, 2.0, 900).exposed().is_empty());
        assert_eq!(ground_truth(&r, 2.0, 500).on_premise.len(), 1);
    }
}
