// SPDX-License-Identifier: Apache-2.0

//! Scenario generators: a random population and small hand-built scenarios
//! for specific attacks and rejection paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelModel;
use crate::scenario::{
    AdversaryAction, EventKind, Protocol, Scenario, ScenarioEvent, SimParams, Site, TestCenterSpec,
    UserSpec, VenueSpec, DAY,
};

const HOUR: i64 = 3_600;
const MINUTE: i64 = 60;

/// Builds the event list in any order; `build` sorts it stably by time.
#[derive(Debug, Clone)]
pub struct ScenarioBuilder {
    scenario: Scenario,
}

impl ScenarioBuilder {
    pub fn new(name: &str, horizon: i64, protocol: Protocol) -> Self {
        Self {
            scenario: Scenario {
                name: name.to_owned(),
                horizon,
                protocol,
                params: SimParams::default(),
                channel: ChannelModel::default(),
                venues: Vec::new(),
                test_centers: Vec::new(),
                users: Vec::new(),
                events: Vec::new(),
            },
        }
    }

    pub fn params(mut self, params: SimParams) -> Self {
        self.scenario.params = params;
        self
    }

    pub fn venue(mut self, id: &str) -> Self {
        self.scenario.venues.push(VenueSpec {
            id: id.to_owned(),
            time_policy: None,
            certified: true,
            receiver: [0.0, 0.0],
        });
        self
    }

    pub fn test_center(mut self, id: &str, certified: bool) -> Self {
        self.scenario.test_centers.push(TestCenterSpec {
            id: id.to_owned(),
            certified,
        });
        self
    }

    pub fn users(mut self, ids: &[&str]) -> Self {
        for id in ids {
            self.scenario.users.push(UserSpec {
                id: (*id).to_owned(),
                true_id: None,
                phone: None,
            });
        }
        self
    }

    pub fn event(mut self, time: i64, subject: &str, kind: EventKind) -> Self {
        self.scenario.events.push(ScenarioEvent {
            time,
            subject: subject.to_owned(),
            kind,
        });
        self
    }

    /// Enter at `start`, leave at `end`.
    pub fn visit(self, user: &str, venue: &str, position: [f64; 2], start: i64, end: i64) -> Self {
        self.event(
            start,
            user,
            EventKind::Enter {
                venue: venue.to_owned(),
                position,
                consent: true,
            },
        )
        .event(end, user, EventKind::Leave { clock_offset: 0 })
    }

    /// Off-premise stay from `start` to `end`, then home.
    pub fn walk(self, user: &str, place: &str, position: [f64; 2], start: i64, end: i64) -> Self {
        self.event(
            start,
            user,
            EventKind::Move {
                position,
                place: Some(place.to_owned()),
            },
        )
        .event(end, user, EventKind::GoHome)
    }

    /// Positive test at `at` covering `[start, at)`, report five minutes later.
    pub fn diagnose(self, user: &str, test_center: &str, start: i64, at: i64) -> Self {
        self.event(
            at,
            user,
            EventKind::TestPositive {
                test_center: test_center.to_owned(),
                contagious_start: start,
                contagious_end: at,
            },
        )
        .event(at + 5 * MINUTE, user, EventKind::Report)
    }

    pub fn adversary(self, time: i64, label: &str, action: AdversaryAction) -> Self {
        self.event(time, label, EventKind::AdversaryAction { action })
    }

    pub fn build(mut self) -> Scenario {
        self.scenario.events.sort_by_key(|e| e.time);
        self.scenario
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub name: String,
    pub protocol: Protocol,
    pub users: usize,
    pub venues: usize,
    pub days: u32,
    pub infected: usize,
    /// Side of each venue's square floor in metres.
    pub venue_size: f64,
    pub max_visits_per_day: u32,
    pub min_visit_minutes: i64,
    pub max_visit_minutes: i64,
    /// Chance of a short street stay after each visit.
    pub walk_prob: f64,
    /// Chance of moving once inside a venue.
    pub move_prob: f64,
    /// When set, every user spends exactly this fraction of each day in a
    /// single venue visit and takes no walks.
    pub venue_time_fraction: Option<f64>,
    pub params: SimParams,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            name: "population".into(),
            protocol: Protocol::Venue,
            users: 50,
            venues: 3,
            days: 7,
            infected: 2,
            venue_size: 8.0,
            max_visits_per_day: 2,
            min_visit_minutes: 20,
            max_visit_minutes: 120,
            walk_prob: 0.3,
            move_prob: 0.3,
            venue_time_fraction: None,
            params: SimParams::default(),
        }
    }
}

fn spot<R: Rng>(rng: &mut R, size: f64) -> [f64; 2] {
    let q = |v: f64| (v * 10.0).round() / 10.0;
    [q(rng.gen_range(0.0..size)), q(rng.gen_range(0.0..size))]
}

/// Daytime is 08:00 to 22:00; diagnoses happen at 23:00.
pub fn population(cfg: &PopulationConfig, seed: u64) -> Scenario {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let width = cfg.users.max(1).to_string().len();
    let user_ids: Vec<String> = (0..cfg.users).map(|i| format!("u{i:0width$}")).collect();
    let venue_ids: Vec<String> = (0..cfg.venues).map(|i| format!("v{i}")).collect();
    let horizon = cfg.days as i64 * DAY;
    let mut b = ScenarioBuilder::new(&cfg.name, horizon, cfg.protocol)
        .params(cfg.params.clone())
        .test_center("tc", true);
    for v in &venue_ids {
        b = b.venue(v);
    }
    let refs: Vec<&str> = user_ids.iter().map(String::as_str).collect();
    b = b.users(&refs);
    for v in b.scenario.venues.iter_mut() {
        v.receiver = [cfg.venue_size / 2.0, cfg.venue_size / 2.0];
    }
    if cfg.venues == 0 {
        return b.build();
    }
    let (open, close) = (8 * HOUR, 22 * HOUR);
    for u in &user_ids {
        for day in 0..cfg.days as i64 {
            let base = day * DAY;
            if let Some(f) = cfg.venue_time_fraction {
                let dur = ((f * DAY as f64).floor() as i64).min(close - open);
                let start = base + open + rng.gen_range(0..=(close - open - dur));
                let v = &venue_ids[rng.gen_range(0..venue_ids.len())];
                let p = spot(&mut rng, cfg.venue_size);
                b = b.visit(u, v, p, start, start + dur);
                continue;
            }
            let k = rng.gen_range(1..=cfg.max_visits_per_day.max(1)) as i64;
            let slot = (close - open) / k;
            for s in 0..k {
                let slot_start = base + open + s * slot;
                let max_len = (cfg.max_visit_minutes * MINUTE).min(slot - 30 * MINUTE);
                let min_len = (cfg.min_visit_minutes * MINUTE).min(max_len);
                let len = rng.gen_range(min_len..=max_len);
                let start = slot_start + rng.gen_range(0..=(slot - len - 30 * MINUTE));
                let end = start + len;
                let vi = rng.gen_range(0..venue_ids.len());
                let v = &venue_ids[vi];
                b = b.visit(u, v, spot(&mut rng, cfg.venue_size), start, end);
                if rng.gen_bool(cfg.move_prob) && len > 10 * MINUTE {
                    let at = start + rng.gen_range(MINUTE..len - MINUTE);
                    b = b.event(
                        at,
                        u,
                        EventKind::Move {
                            position: spot(&mut rng, cfg.venue_size),
                            place: None,
                        },
                    );
                }
                if rng.gen_bool(cfg.walk_prob) {
                    let w = rng.gen_range(5..=20) * MINUTE;
                    let street = format!("street-{vi}");
                    b = b.walk(u, &street, spot(&mut rng, cfg.venue_size), end + MINUTE, end + MINUTE + w);
                }
            }
        }
    }
    let test_day = (cfg.days as i64 - 2).max(0);
    for u in user_ids.iter().take(cfg.infected) {
        let at = test_day * DAY + 23 * HOUR;
        if at + 10 * MINUTE >= horizon {
            continue;
        }
        let start = (test_day - 4).max(0) * DAY;
        b = b.diagnose(u, "tc", start, at);
    }
    b.build()
}

/// Infected `i` sits in venue A 09:00 to 10:00 while a relay copies
/// everything it hears there into venue B, where `v1` and `v2` sit within
/// 2 m of the emitter.
pub fn relay_attack(protocol: Protocol, delay: i64) -> Scenario {
    let (s, e) = (9 * HOUR, 10 * HOUR);
    ScenarioBuilder::new("relay-cross-venue", DAY + HOUR, protocol)
        .venue("A")
        .venue("B")
        .test_center("tc", true)
        .users(&["i", "v1", "v2"])
        .adversary(
            s,
            "relay",
            AdversaryAction::RelayCrossVenue {
                from: Site {
                    place: "A".into(),
                    position: [0.5, 0.0],
                },
                to: Site {
                    place: "B".into(),
                    position: [0.0, 0.0],
                },
                end: e + delay + MINUTE,
                delay,
                tx_boost_db: 0.0,
            },
        )
        .visit("i", "A", [0.0, 0.0], s, e)
        .visit("v1", "B", [1.0, 0.0], s, e + delay)
        .visit("v2", "B", [0.0, 1.5], s, e + delay)
        .diagnose("i", "tc", 0, 12 * HOUR)
        .build()
}

/// Ten seconds at 1 m on a street, plus separate venue visits.
pub fn bystander(protocol: Protocol) -> Scenario {
    ScenarioBuilder::new("bystander", DAY + HOUR, protocol)
        .venue("A")
        .venue("B")
        .test_center("tc", true)
        .users(&["i", "j"])
        .visit("i", "A", [1.0, 1.0], 9 * HOUR, 10 * HOUR)
        .visit("j", "B", [1.0, 1.0], 9 * HOUR, 10 * HOUR)
        .walk("i", "street", [0.0, 0.0], 11 * HOUR, 11 * HOUR + 10)
        .walk("j", "street", [1.0, 0.0], 11 * HOUR, 11 * HOUR + 10)
        .diagnose("i", "tc", 0, 20 * HOUR)
        .build()
}

/// Users moving between two venues over three days with eavesdroppers at
/// both; `r` reports on day 2 with a contagious period from day 0.
pub fn linkage(protocol: Protocol, seed: u64) -> Scenario {
    let cfg = PopulationConfig {
        name: "linkage".into(),
        protocol,
        users: 10,
        venues: 2,
        days: 3,
        infected: 0,
        walk_prob: 0.0,
        ..PopulationConfig::default()
    };
    let mut s = population(&cfg, seed);
    let sites = vec![
        Site {
            place: "v0".into(),
            position: [4.0, 4.0],
        },
        Site {
            place: "v1".into(),
            position: [4.0, 4.0],
        },
    ];
    let mut b = ScenarioBuilder { scenario: s.clone() }.adversary(
        0,
        "eve",
        AdversaryAction::LinkageEavesdrop {
            sites,
            end: s.horizon,
        },
    );
    let first = s.users[0].id.clone();
    b = b.diagnose(&first, "tc", 0, 2 * DAY + 23 * HOUR);
    s = b.build();
    s
}

/// Which rejection a [`rejection`] scenario is built to provoke.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectionCase {
    BadCertificate,
    BadOpening,
    BadReceipt,
    UnmatchedIdentifiers,
    OverlappingPresence,
}

impl RejectionCase {
    pub const ALL: [RejectionCase; 5] = [
        RejectionCase::BadCertificate,
        RejectionCase::BadOpening,
        RejectionCase::BadReceipt,
        RejectionCase::UnmatchedIdentifiers,
        RejectionCase::OverlappingPresence,
    ];
}

/// Venue-protocol scenarios that each end with exactly one rejected report.
pub fn rejection(case: RejectionCase) -> Scenario {
    let (s, e) = (9 * HOUR, 10 * HOUR);
    let diag = 20 * HOUR;
    let b = ScenarioBuilder::new("rejection", DAY + HOUR, Protocol::Venue)
        .venue("A")
        .venue("B")
        .users(&["i", "j", "c"]);
    match case {
        RejectionCase::BadCertificate => b
            .test_center("tc", false)
            .visit("i", "A", [0.0, 0.0], s, e)
            .visit("j", "A", [1.0, 0.0], s, e)
            .diagnose("i", "tc", 0, diag),
        RejectionCase::BadOpening => b
            .test_center("tc", true)
            .adversary(
                s - MINUTE,
                "mallory",
                AdversaryAction::ImpersonateRid {
                    colluder: "c".into(),
                    beneficiary: "i".into(),
                    end: e + MINUTE,
                    forge_rid: false,
                },
            )
            .visit("c", "A", [0.0, 0.0], s, e)
            .visit("j", "A", [1.0, 0.0], s, e)
            .diagnose("i", "tc", 0, diag),
        RejectionCase::BadReceipt => b
            .test_center("tc", true)
            .visit("i", "A", [0.0, 0.0], s, e)
            .visit("j", "A", [1.0, 0.0], s, e)
            .adversary(
                diag,
                "mallory",
                AdversaryAction::TamperReport {
                    user: "i".into(),
                    end: diag + HOUR,
                },
            )
            .diagnose("i", "tc", 0, diag),
        RejectionCase::UnmatchedIdentifiers => b
            .test_center("tc", true)
            .adversary(
                s - MINUTE,
                "mallory",
                AdversaryAction::JamReceiver {
                    venue: "A".into(),
                    end: e + MINUTE,
                },
            )
            .visit("i", "A", [0.0, 0.0], s, e)
            .visit("j", "A", [1.0, 0.0], s, e)
            .diagnose("i", "tc", 0, diag),
        RejectionCase::OverlappingPresence => b
            .test_center("tc", true)
            .adversary(
                s - MINUTE,
                "mallory",
                AdversaryAction::ImpersonateRid {
                    colluder: "c".into(),
                    beneficiary: "i".into(),
                    end: e + MINUTE,
                    forge_rid: true,
                },
            )
            .visit("i", "A", [0.0, 0.0], s, e)
            .visit("c", "B", [0.0, 0.0], s, e)
            .visit("j", "B", [1.0, 0.0], s, e)
            .diagnose("i", "tc", 0, diag),
    }
    .build()
}
