// SPDX-License-Identifier: Apache-2.0

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use venue_act_core::actors::{
    BackendConfig, BackendServer, ContagiousPeriod, EmitterId, HealthAuthority, InfoClass,
    ReportBundle, RejectionCode, RiskPolicy, TestCenter, TimePolicy, TraceQuery, UserApp, Venue,
    VenueConfig,
};
use venue_act_core::crypto::{Certificate, SigningKeyPair};
use venue_act_core::wire::Wire;
use venue_act_core::SchedulingParams;

const DAY: i64 = 86_400;
const L: i64 = 180;

struct World {
    rng: ChaCha20Rng,
    ha: HealthAuthority,
    tc: TestCenter,
    backend: BackendServer,
    params: SchedulingParams,
}

impl World {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut ha = HealthAuthority::new(14 * DAY, &mut rng);
        let tc = TestCenter::new("tc", &mut ha, &mut rng);
        let backend = BackendServer::new(ha.public_key(), BackendConfig::default());
        Self {
            rng,
            ha,
            tc,
            backend,
            params: SchedulingParams::default(),
        }
    }

    fn venue(&mut self, id: &str) -> Venue {
        Venue::new(id, VenueConfig::default(), 0, &mut self.ha, &mut self.rng)
    }

    fn user(&mut self, id: &str) -> UserApp {
        UserApp::new(id, self.params, self.ha.public_key(), &mut self.rng)
    }

    /// Everyone in `users` stays at `venue` for `epochs` epochs from
    /// `start`, hearing each other at `signal` dBm.
    fn stay(&mut self, venue: &mut Venue, users: &mut [&mut UserApp], start: i64, epochs: i64, signal: f64) {
        for u in users.iter_mut() {
            u.enter_venue(venue.id(), venue.certificate().clone(), start, true, &mut self.rng)
                .unwrap();
        }
        for e in 0..epochs {
            let now = start + e * L;
            let ids: Vec<_> = users
                .iter_mut()
                .map(|u| u.epoch_tick(now, &mut self.rng).unwrap())
                .collect();
            for (k, id) in ids.iter().enumerate() {
                venue.record_broadcast(*id, -70.0, EmitterId(k as u64), now);
                for (j, u) in users.iter_mut().enumerate() {
                    if j != k {
                        u.hear(*id, signal, now, L as u64).unwrap();
                    }
                }
            }
        }
        let leave = start + epochs * L;
        for u in users.iter_mut() {
            let msg = u.begin_leave(leave).unwrap();
            let receipt = venue.issue_receipt(&msg, leave);
            u.complete_leave(receipt).unwrap();
        }
    }

    fn infect(&mut self, user: &mut UserApp, true_id: &str, period: ContagiousPeriod) {
        let cert = self
            .tc
            .certify(&user.certificate_request(), true_id, period)
            .unwrap();
        user.store_certificate(cert).unwrap();
    }

    fn publish(&mut self, venue: &mut Venue, now: i64) {
        let d = venue.emit_digest(now, 1e-6).unwrap();
        self.ha.store_digest(d, now);
    }

    fn submit(&mut self, bundle: &ReportBundle) -> Result<u64, RejectionCode> {
        self.backend
            .process_report(bundle, &mut self.ha)
            .map(|r| r.record_id)
    }
}

fn whole_week() -> ContagiousPeriod {
    ContagiousPeriod {
        start: 0,
        end: 7 * DAY,
    }
}

#[test]
fn co_present_user_is_notified_same_day_only() {
    let mut w = World::new(1);
    let mut cafe = w.venue("cafe");
    let (mut i, mut j) = (w.user("alice"), w.user("bob"));
    w.stay(&mut cafe, &mut [&mut i, &mut j], 9 * 3_600, 6, -60.0);
    let mut late = w.user("carol");
    w.stay(&mut cafe, &mut [&mut late], DAY + 9 * 3_600, 6, -60.0);
    w.publish(&mut cafe, 2 * DAY);
    w.infect(&mut i, "alice", whole_week());
    let bundles = i.build_reports(i.certificate().unwrap());
    assert_eq!(bundles.len(), 1);
    let id = w.submit(&bundles[0]).unwrap();
    let notices = w.backend.take_notices();
    assert_eq!(notices.len(), 1);
    assert_eq!(notices[0].record_id, id);

    let (vi, q) = j.trace_queries().pop().unwrap();
    let records = w.backend.answer_trace(&q, 2 * DAY).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].ephids, i.visits()[0].own_ephids());
    let score = &j.evaluate_visit(vi, &records, &RiskPolicy::default())[0];
    assert_eq!(score.close_epochs, 6);
    assert!(score.at_risk);

    let (_, q) = late.trace_queries().pop().unwrap();
    assert!(w.backend.answer_trace(&q, 2 * DAY).unwrap().is_empty());
    w.backend.set_policy("cafe", TimePolicy::WithinHours(48));
    assert_eq!(w.backend.answer_trace(&q, 2 * DAY).unwrap().len(), 1);
}

#[test]
fn short_or_distant_contact_is_not_at_risk() {
    let mut w = World::new(2);
    let mut cafe = w.venue("cafe");
    let (mut i, mut j, mut k) = (w.user("i"), w.user("j"), w.user("k"));
    w.stay(&mut cafe, &mut [&mut i, &mut j], 3_600, 4, -60.0);
    w.stay(&mut cafe, &mut [&mut i, &mut k], 2 * 3_600, 10, -80.0);
    w.publish(&mut cafe, DAY);
    w.infect(&mut i, "i", whole_week());
    for b in i.build_reports(i.certificate().unwrap()) {
        w.submit(&b).unwrap();
    }
    for user in [&mut j, &mut k] {
        let (vi, q) = user.trace_queries().pop().unwrap();
        let recs = w.backend.answer_trace(&q, DAY).unwrap();
        assert_eq!(recs.len(), 2);
        let scores = user.evaluate_visit(vi, &recs, &RiskPolicy::default());
        assert!(scores.iter().all(|s| !s.at_risk), "{scores:?}");
    }
}

#[test]
fn resubmission_returns_the_existing_record() {
    let mut w = World::new(3);
    let mut cafe = w.venue("cafe");
    let mut i = w.user("i");
    w.stay(&mut cafe, &mut [&mut i], 3_600, 3, -60.0);
    w.publish(&mut cafe, DAY);
    w.infect(&mut i, "i", whole_week());
    let b = i.build_reports(i.certificate().unwrap()).remove(0);
    let first = w.submit(&b).unwrap();
    assert_eq!(w.submit(&b).unwrap(), first);
    assert_eq!(w.backend.records().len(), 1);
}

#[test]
fn every_rejection_code_is_reachable() {
    let mut w = World::new(4);
    let mut cafe = w.venue("cafe");
    let mut bar = w.venue("bar");
    let mut i = w.user("i");
    w.stay(&mut cafe, &mut [&mut i], 3_600, 5, -60.0);
    w.stay(&mut bar, &mut [&mut i], 3 * 3_600, 5, -60.0);
    w.publish(&mut cafe, DAY);
    w.publish(&mut bar, DAY);
    w.infect(&mut i, "i", whole_week());
    let cert = i.certificate().unwrap().clone();
    let good = i.build_reports(&cert);
    assert_eq!(good.len(), 2);

    // bad certificate: signed by a test center the authority never certified
    let mut rogue_ha = HealthAuthority::new(DAY, &mut w.rng);
    let mut rogue_tc = TestCenter::new("rogue", &mut rogue_ha, &mut w.rng);
    let forged = rogue_tc
        .certify(&i.certificate_request(), "i", whole_week())
        .unwrap();
    let mut b = good[0].clone();
    b.certificate = forged;
    assert_eq!(w.submit(&b), Err(RejectionCode::BadCertificate));
    let mut b = good[0].clone();
    b.certificate.period.end = 1;
    assert_eq!(w.submit(&b), Err(RejectionCode::BadCertificate));

    // bad opening
    let mut b = good[0].clone();
    b.nonce_opening.blinding[0] ^= 1;
    assert_eq!(w.submit(&b), Err(RejectionCode::BadOpening));

    // bad receipt: corrupted window key, edited leave time, wrong shape
    let mut b = good[0].clone();
    b.window_keys[0][3] ^= 0x40;
    assert_eq!(w.submit(&b), Err(RejectionCode::BadReceipt));
    let mut b = good[0].clone();
    b.receipt.leave_time += 1;
    assert_eq!(w.submit(&b), Err(RejectionCode::BadReceipt));
    let mut b = good[0].clone();
    b.last_window_epochs += 1;
    assert_eq!(w.submit(&b), Err(RejectionCode::BadReceipt));

    // unmatched: the venue named in the bundle never heard these ids
    let mut ghost = w.venue("ghost");
    let mut g = w.user("i");
    w.stay(&mut ghost, &mut [&mut g], 3_600, 2, -60.0);
    let mut empty = w.venue("ghost");
    w.publish(&mut empty, DAY);
    let cert_g = {
        let c = w.tc.certify(&g.certificate_request(), "i", whole_week()).unwrap();
        g.store_certificate(c.clone()).unwrap();
        c
    };
    let bg = g.build_reports(&cert_g).remove(0);
    assert_eq!(w.submit(&bg), Err(RejectionCode::UnmatchedIdentifiers));

    // unmatched: nothing stored for the period yet
    let mut late = w.venue("late");
    let mut u = w.user("u");
    w.stay(&mut late, &mut [&mut u], 3_600, 2, -60.0);
    let c = w.tc.certify(&u.certificate_request(), "u", whole_week()).unwrap();
    u.store_certificate(c.clone()).unwrap();
    let bl = u.build_reports(&c).remove(0);
    assert_eq!(w.submit(&bl), Err(RejectionCode::UnmatchedIdentifiers));

    assert!(w.backend.records().is_empty());
    w.submit(&good[0]).unwrap();
    w.submit(&good[1]).unwrap();
    assert_eq!(w.backend.records().len(), 2);

    // overlapping presence: a second identity's visit under i's rid
    let mut mallory = w.user("m");
    mallory.present_rid(i.rid());
    let mut club = w.venue("club");
    w.stay(&mut club, &mut [&mut mallory], 3_600 + 2 * L, 3, -60.0);
    w.publish(&mut club, DAY);
    let b = mallory.build_reports(&cert).remove(0);
    assert_eq!(w.submit(&b), Err(RejectionCode::OverlappingPresence));
    assert_eq!(w.backend.records().len(), 2);
    assert_eq!(w.backend.take_notices().len(), 2);
}

#[test]
fn forged_receipts_get_no_answers() {
    let mut w = World::new(5);
    let keys = SigningKeyPair::generate("fake", &mut w.rng);
    let self_signed = Certificate::issue(&keys, keys.public_key(), "fake");
    let mut fake = Venue::with_certificate(keys, self_signed, VenueConfig::default(), 0);
    let mut u = w.user("u");
    u.enter_venue("fake", fake.certificate().clone(), 0, true, &mut w.rng).unwrap();
    let msg = u.begin_leave(600).unwrap();
    let receipt = fake.issue_receipt(&msg, 600).unwrap();
    assert!(!receipt.verify(&w.ha.public_key()));
    let q = TraceQuery {
        venue_id: "fake".into(),
        receipt,
    };
    assert!(w.backend.answer_trace(&q, 600).is_err());
}

#[test]
fn actors_see_only_their_share() {
    let mut w = World::new(6);
    let mut cafe = w.venue("cafe");
    let (mut i, mut j) = (w.user("i"), w.user("j"));
    w.stay(&mut cafe, &mut [&mut i, &mut j], 3_600, 5, -60.0);
    w.publish(&mut cafe, DAY);
    w.infect(&mut i, "i", whole_week());
    for b in i.build_reports(i.certificate().unwrap()) {
        w.submit(&b).unwrap();
    }
    let (_, q) = j.trace_queries().pop().unwrap();
    w.backend.answer_trace(&q, DAY).unwrap();

    let backend = w.backend.observations();
    for c in [InfoClass::TrueId, InfoClass::RidOpening, InfoClass::PhoneNumber] {
        assert!(!backend.has_seen(c), "backend saw {c:?}");
    }
    let venue = cafe.observations();
    for c in [
        InfoClass::TrueId,
        InfoClass::RidValue,
        InfoClass::RidOpening,
        InfoClass::NonceOpening,
        InfoClass::WindowKey,
    ] {
        assert!(!venue.has_seen(c), "venue saw {c:?}");
    }
    assert!(!w.ha.observations().has_seen(InfoClass::TrueId));
    assert!(w.tc.observations().has_seen(InfoClass::TrueId));
}

#[test]
fn messages_round_trip_on_the_wire() {
    let mut w = World::new(7);
    let mut cafe = w.venue("cafe");
    let mut i = w.user("i");
    w.stay(&mut cafe, &mut [&mut i], 3_600, 50, -60.0);
    w.infect(&mut i, "i", whole_week());
    let b = i.build_reports(i.certificate().unwrap()).remove(0);
    let bytes = b.to_bytes();
    assert_eq!(ReportBundle::from_bytes(&bytes).unwrap(), b);
    assert!(ReportBundle::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let (_, q) = i.trace_queries().pop().unwrap();
    assert_eq!(TraceQuery::from_bytes(&q.to_bytes()).unwrap(), q);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Any honest stay is accepted, and flipping any bit of any window key
    /// gets it rejected as a bad receipt.
    #[test]
    fn honest_stays_verify_and_tampered_keys_do_not(
        seed in any::<u64>(),
        epochs in 1i64..100,
        key in any::<prop::sample::Index>(),
        bit in 0usize..256,
    ) {
        let mut w = World::new(seed);
        let mut cafe = w.venue("cafe");
        let mut i = w.user("i");
        w.stay(&mut cafe, &mut [&mut i], 3_600, epochs, -60.0);
        w.publish(&mut cafe, DAY);
        w.infect(&mut i, "i", whole_week());
        let good = i.build_reports(i.certificate().unwrap()).remove(0);
        let mut bad = good.clone();
        let k = key.index(bad.window_keys.len());
        bad.window_keys[k][bit / 8] ^= 1 << (bit % 8);
        prop_assert_eq!(w.submit(&bad), Err(RejectionCode::BadReceipt));
        let rec = w.backend.process_report(&good, &mut w.ha).unwrap();
        prop_assert_eq!(rec.ephids.len() as i64, epochs);
    }
}
