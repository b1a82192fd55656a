// SPDX-License-Identifier: Apache-2.0

//! Discrete-event simulator. State only changes at events; between two
//! events every co-located transmitter and receiver exchange one segment of
//! constant broadcasts.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;
use venue_act_core::actors::{
    AnomalyKind, BackendConfig, BackendServer, ContagiousPeriod, EmitterId, HealthAuthority, InfectionCertificate,
    ObservationLog, InfoClass, ProtocolError, ReportBundle, RiskPolicy, TestCenter, UserApp, Venue,
    VenueConfig,
};
use venue_act_core::baseline::dp3t::day_of;
use venue_act_core::baseline::{duration_at_risk, Dp3tBackend, Dp3tUser, MohServer, TempId, TtUser};
use venue_act_core::crypto::{hash, Certificate, SigningKeyPair};
use venue_act_core::schedule::StayShape;
use venue_act_core::EphemeralId;

use crate::channel::ChannelModel;
use crate::scenario::{
    validate, AdversaryAction, Diagnostic, EventKind, Protocol, Scenario, Site, DAY,
};
use crate::trace::{Evidence, SimulationTrace, TraceRecord, TRACE_VERSION};

const ADVERSARY_EMITTER_BASE: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario is invalid ({} problems)", .0.len())]
    Invalid(Vec<Diagnostic>),
    #[error("protocol error at t={time}: {source}")]
    Protocol {
        time: i64,
        #[source]
        source: ProtocolError,
    },
    #[error("{0}")]
    Runtime(String),
}

/// What goes over the air.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Payload {
    Eph(EphemeralId),
    Tid(TempId),
}

impl Payload {
    pub fn hex(&self) -> String {
        match self {
            Payload::Eph(e) => hex::encode(e.0),
            Payload::Tid(t) => hex::encode(&t.0),
        }
    }
}

#[derive(Debug, Clone)]
struct Loc {
    place: Option<String>,
    venue: bool,
    pos: [f64; 2],
    since: i64,
    stay: u32,
}

enum Proto {
    Venue(Box<UserApp>),
    Dp3t(Box<Dp3tUser>),
    Tt(Box<TtUser>),
}

struct SimUser {
    id: String,
    true_id: String,
    loc: Loc,
    proto: Proto,
    session: u64,
    sensing_since: Option<(i64, Option<String>)>,
    current: Option<Payload>,
    visit_count: u32,
    certificate: Option<InfectionCertificate>,
    contagious_start: Option<i64>,
    tamper: Option<(i64, i64)>,
    reported_nonces: BTreeSet<[u8; 32]>,
    observations: ObservationLog,
}

struct Adversary {
    label: String,
    action: AdversaryAction,
    start: i64,
    end: i64,
    emitter: EmitterId,
    captures: Vec<(Payload, i64, i64)>,
    last_capture: BTreeMap<Payload, usize>,
    logged: BTreeSet<(String, Payload)>,
    flood_ids: BTreeMap<i64, Vec<Payload>>,
    log: ObservationLog,
}

impl Adversary {
    fn active_at(&self, t: i64) -> bool {
        self.start <= t && t < self.end
    }

    fn capture_sites(&self) -> Vec<&Site> {
        match &self.action {
            AdversaryAction::RelayCrossVenue { from, .. } => vec![from],
            AdversaryAction::ReplaySameVenue { at, .. } => vec![at],
            AdversaryAction::LinkageEavesdrop { sites, .. } => sites.iter().collect(),
            _ => Vec::new(),
        }
    }

    fn capture(&mut self, payload: Payload, start: i64, end: i64) -> bool {
        if let Some(&i) = self.last_capture.get(&payload) {
            if self.captures[i].2 == start {
                self.captures[i].2 = end;
                return false;
            }
        }
        let fresh = !self.last_capture.contains_key(&payload);
        self.last_capture.insert(payload.clone(), self.captures.len());
        self.captures.push((payload, start, end));
        fresh
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    Scripted(usize),
    AdversaryEnd(usize),
    EpochTick { user: usize, session: u64 },
    Rotate,
    Digest,
    TraceRound,
    Final,
}

impl Ev {
    fn class(&self) -> u8 {
        match self {
            Ev::Scripted(_) => 0,
            Ev::AdversaryEnd(_) => 1,
            Ev::EpochTick { .. } | Ev::Rotate => 2,
            Ev::Digest => 3,
            Ev::TraceRound => 4,
            Ev::Final => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Item {
    time: i64,
    class: u8,
    seq: u64,
    ev: Ev,
}

impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.class, other.seq).cmp(&(self.time, self.class, self.seq))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Tx {
    emitter: EmitterId,
    user: Option<usize>,
    place: String,
    pos: [f64; 2],
    payload: Payload,
    start: i64,
    dur: i64,
    boost: f64,
}

struct Pending {
    user: usize,
    bundle: ReportBundle,
}

/// Runs `scenario` under its own protocol field.
pub fn run(scenario: &Scenario, seed: u64) -> Result<SimulationTrace, SimError> {
    run_protocol(scenario, scenario.protocol, seed)
}

pub fn run_protocol(
    scenario: &Scenario,
    protocol: Protocol,
    seed: u64,
) -> Result<SimulationTrace, SimError> {
    let diags = validate(scenario);
    if !diags.is_empty() {
        return Err(SimError::Invalid(diags));
    }
    let mut sim = Sim::new(scenario, protocol, seed);
    sim.execute()?;
    Ok(SimulationTrace::seal(sim.out))
}

struct Sim<'s> {
    sc: &'s Scenario,
    protocol: Protocol,
    rng: ChaCha20Rng,
    queue: BinaryHeap<Item>,
    seq: u64,
    now: i64,
    out: Vec<TraceRecord>,
    policy: RiskPolicy,
    users: Vec<SimUser>,
    user_index: BTreeMap<String, usize>,
    adversaries: Vec<Adversary>,
    // venue protocol
    ha: HealthAuthority,
    venues: BTreeMap<String, Venue>,
    test_centers: BTreeMap<String, TestCenter>,
    backend: BackendServer,
    pending: Vec<Pending>,
    record_owner: BTreeMap<u64, usize>,
    jams: BTreeMap<String, Vec<(i64, i64)>>,
    // baselines
    dp3t: Dp3tBackend,
    dp3t_owner: Vec<usize>,
    moh: MohServer,
    baseline_backend_log: ObservationLog,
    // delivery bookkeeping
    delivered: BTreeMap<(usize, u64, u64), Evidence>,
    notified: BTreeSet<(usize, usize)>,
}

impl<'s> Sim<'s> {
    fn new(sc: &'s Scenario, protocol: Protocol, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let p = &sc.params;
        let params = p.scheduling();
        let mut ha = HealthAuthority::new(p.retention(), &mut rng);
        let mut rogue = HealthAuthority::new(p.retention(), &mut rng);
        let venue_config = VenueConfig {
            clock_tolerance: p.clock_tolerance,
            retention: p.retention(),
            arrival_time_extension: p.arrival_time_extension,
            ..VenueConfig::default()
        };
        let mut venues = BTreeMap::new();
        let mut policies = BTreeMap::new();
        for v in &sc.venues {
            let venue = if v.certified {
                Venue::new(&v.id, venue_config.clone(), 0, &mut ha, &mut rng)
            } else {
                let keys = SigningKeyPair::generate(v.id.clone(), &mut rng);
                let cert: Certificate = rogue.certify(keys.public_key(), &v.id);
                Venue::with_certificate(keys, cert, venue_config.clone(), 0)
            };
            venues.insert(v.id.clone(), venue);
            policies.insert(v.id.clone(), v.time_policy.unwrap_or(p.time_policy));
        }
        let mut test_centers = BTreeMap::new();
        for t in &sc.test_centers {
            let authority = if t.certified { &mut ha } else { &mut rogue };
            test_centers.insert(t.id.clone(), TestCenter::new(&t.id, authority, &mut rng));
        }
        let mut backend = BackendServer::new(
            ha.public_key(),
            BackendConfig {
                params,
                exclusion_tolerance: p.exclusion_tolerance,
                retention: p.retention(),
                default_policy: p.time_policy,
                min_trace_stay: p.min_trace_stay,
            },
        );
        for (v, pol) in &policies {
            backend.set_policy(v, *pol);
        }
        let mut moh = MohServer::new(&mut rng);
        let mut users = Vec::new();
        let mut user_index = BTreeMap::new();
        for (i, u) in sc.users.iter().enumerate() {
            let proto = match protocol {
                Protocol::Venue => Proto::Venue(Box::new(
                    UserApp::new(u.true_id(), params, ha.public_key(), &mut rng)
                        .with_arrival_time_extension(p.arrival_time_extension),
                )),
                Protocol::Dp3t => Proto::Dp3t(Box::new(Dp3tUser::new(
                    p.dp3t_epochs_per_day,
                    0,
                    &mut rng,
                ))),
                Protocol::TraceTogether => {
                    let phone = u.phone.clone().unwrap_or_else(|| format!("+1555{i:07}"));
                    let pseudonym = moh.register(&phone, &mut rng);
                    Proto::Tt(Box::new(TtUser::new(pseudonym)))
                }
            };
            user_index.insert(u.id.clone(), i);
            users.push(SimUser {
                id: u.id.clone(),
                true_id: u.true_id().to_owned(),
                loc: Loc {
                    place: None,
                    venue: false,
                    pos: [0.0, 0.0],
                    since: 0,
                    stay: 0,
                },
                proto,
                session: 0,
                sensing_since: None,
                current: None,
                visit_count: 0,
                certificate: None,
                contagious_start: None,
                tamper: None,
                reported_nonces: BTreeSet::new(),
                observations: ObservationLog::default(),
            });
        }
        let policy = RiskPolicy {
            exposure_threshold: p.exposure_threshold,
            proximity_threshold_dbm: sc.channel.signal_at(p.proximity_distance),
        };
        let header = TraceRecord::Header {
            version: TRACE_VERSION,
            name: sc.name.clone(),
            protocol,
            seed,
            horizon: sc.horizon,
            params: sc.params.clone(),
            channel: sc.channel,
            users: sc.users.iter().map(|u| u.id.clone()).collect(),
            venues: sc.venues.iter().map(|v| v.id.clone()).collect(),
            policies,
        };
        Self {
            sc,
            protocol,
            rng,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            out: vec![header],
            policy,
            users,
            user_index,
            adversaries: Vec::new(),
            ha,
            venues,
            test_centers,
            backend,
            pending: Vec::new(),
            record_owner: BTreeMap::new(),
            jams: BTreeMap::new(),
            dp3t: Dp3tBackend::default(),
            dp3t_owner: Vec::new(),
            moh,
            baseline_backend_log: ObservationLog::default(),
            delivered: BTreeMap::new(),
            notified: BTreeSet::new(),
        }
    }

    fn push(&mut self, time: i64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Item {
            time,
            class: ev.class(),
            seq: self.seq,
            ev,
        });
    }

    fn rotation_period(&self) -> i64 {
        match self.protocol {
            Protocol::Dp3t => DAY / self.sc.params.dp3t_epochs_per_day as i64,
            _ => venue_act_core::baseline::tracetogether::DEFAULT_TID_INTERVAL,
        }
    }

    fn execute(&mut self) -> Result<(), SimError> {
        let horizon = self.sc.horizon;
        for (i, e) in self.sc.events.iter().enumerate() {
            self.push(e.time, Ev::Scripted(i));
        }
        match self.protocol {
            Protocol::Venue => {
                if self.sc.params.digest_interval < horizon {
                    self.push(self.sc.params.digest_interval, Ev::Digest);
                }
            }
            _ => {
                if horizon > 0 {
                    self.push(0, Ev::Rotate);
                }
            }
        }
        if self.protocol != Protocol::TraceTogether && self.sc.params.trace_interval < horizon {
            self.push(self.sc.params.trace_interval, Ev::TraceRound);
        }
        self.push(horizon, Ev::Final);

        while let Some(item) = self.queue.pop() {
            if item.time > self.now {
                self.segment(self.now, item.time);
                self.now = item.time;
            }
            match item.ev {
                Ev::Scripted(i) => self.scripted(i)?,
                Ev::AdversaryEnd(a) => self.adversary_end(a),
                Ev::EpochTick { user, session } => self.epoch_tick(user, session)?,
                Ev::Rotate => {
                    self.rotate();
                    let next = self.now + self.rotation_period();
                    if next < horizon {
                        self.push(next, Ev::Rotate);
                    }
                }
                Ev::Digest => {
                    self.emit_digests()?;
                    self.try_pending(false);
                    let next = self.now + self.sc.params.digest_interval;
                    if next < horizon {
                        self.push(next, Ev::Digest);
                    }
                }
                Ev::TraceRound => {
                    self.trace_round(None);
                    let next = self.now + self.sc.params.trace_interval;
                    if next < horizon {
                        self.push(next, Ev::TraceRound);
                    }
                }
                Ev::Final => {
                    self.finish()?;
                    break;
                }
            }
        }
        Ok(())
    }

    fn rec(&mut self, r: TraceRecord) {
        self.out.push(r);
    }

    fn close_presence(&mut self, u: usize) {
        let now = self.now;
        let user = &self.users[u];
        if let Some(place) = &user.loc.place {
            if now > user.loc.since {
                let r = TraceRecord::Presence {
                    user: user.id.clone(),
                    place: place.clone(),
                    venue: user.loc.venue,
                    stay: user.loc.stay,
                    position: user.loc.pos,
                    start: user.loc.since,
                    end: now,
                };
                self.rec(r);
            }
        }
        self.users[u].loc.since = now;
    }

    fn set_broadcast(&mut self, u: usize, payload: Option<Payload>) {
        if self.users[u].current == payload {
            return;
        }
        self.users[u].current = payload.clone();
        if let Some(p) = payload {
            let user = &self.users[u];
            let (venue, visit) = match (self.protocol, &user.sensing_since) {
                (Protocol::Venue, Some((_, v))) => (v.clone(), Some(user.visit_count)),
                _ => (None, None),
            };
            let r = TraceRecord::Broadcast {
                time: self.now,
                user: user.id.clone(),
                payload: p.hex(),
                venue,
                visit,
            };
            self.rec(r);
        }
    }

    fn end_sensing(&mut self, u: usize) {
        if let Some((start, venue)) = self.users[u].sensing_since.take() {
            if self.now > start {
                let r = TraceRecord::Sensing {
                    user: self.users[u].id.clone(),
                    venue,
                    start,
                    end: self.now,
                };
                self.rec(r);
            }
        }
        self.users[u].current = None;
        self.users[u].session += 1;
    }

    fn scripted(&mut self, i: usize) -> Result<(), SimError> {
        let e = &self.sc.events[i];
        let now = self.now;
        if let EventKind::AdversaryAction { action } = &e.kind {
            self.start_adversary(&e.subject, action.clone());
            return Ok(());
        }
        let u = self.user_index[&e.subject];
        match &e.kind {
            EventKind::Enter {
                venue,
                position,
                consent,
            } => {
                self.close_presence(u);
                let user = &mut self.users[u];
                user.loc = Loc {
                    place: Some(venue.clone()),
                    venue: true,
                    pos: *position,
                    since: now,
                    stay: user.loc.stay + 1,
                };
                if let Proto::Venue(app) = &mut user.proto {
                    let cert = self.venues[venue].certificate().clone();
                    let outcome = app
                        .enter_venue(venue, cert, now, *consent, &mut self.rng)
                        .map_err(|e| SimError::Protocol { time: now, source: e })?;
                    if outcome == venue_act_core::actors::EntryOutcome::Sensing {
                        let first = app.current_broadcast().map(Payload::Eph);
                        user.visit_count += 1;
                        user.sensing_since = Some((now, Some(venue.clone())));
                        user.session += 1;
                        let session = user.session;
                        self.set_broadcast(u, first);
                        let next = now + self.sc.params.epoch_length as i64;
                        if next < self.sc.horizon {
                            self.push(next, Ev::EpochTick { user: u, session });
                        }
                    }
                }
            }
            EventKind::Move { position, place } => {
                self.close_presence(u);
                let user = &mut self.users[u];
                user.loc.pos = *position;
                if let Some(p) = place {
                    user.loc.place = Some(p.clone());
                    user.loc.venue = false;
                    user.loc.stay += 1;
                }
            }
            EventKind::GoHome => {
                self.close_presence(u);
                self.users[u].loc.place = None;
                self.users[u].loc.venue = false;
            }
            EventKind::Leave { clock_offset } => {
                self.close_presence(u);
                let venue_id = self.users[u].loc.place.take().unwrap_or_default();
                self.users[u].loc.venue = false;
                let sensing = matches!(&self.users[u].proto, Proto::Venue(app) if app.is_sensing());
                if sensing {
                    let Proto::Venue(app) = &mut self.users[u].proto else {
                        unreachable!()
                    };
                    let msg = app
                        .begin_leave(now + clock_offset)
                        .map_err(|e| SimError::Protocol { time: now, source: e })?;
                    let venue = self.venues.get_mut(&venue_id).expect("validated venue");
                    let answer = venue.issue_receipt(&msg, now);
                    let result = app.complete_leave(answer).map(|v| {
                        v.receipt.as_ref().map(|r| (r.leave_time, r.arrival_time))
                    });
                    let visit = self.users[u].visit_count;
                    let user_id = self.users[u].id.clone();
                    match result {
                        Ok(Some((leave_time, arrival_time))) => self.rec(TraceRecord::Receipt {
                            time: now,
                            user: user_id,
                            venue: venue_id,
                            visit,
                            leave_time,
                            arrival_time,
                        }),
                        Ok(None) => {}
                        Err(err) => self.rec(TraceRecord::ReceiptRefused {
                            time: now,
                            user: user_id,
                            venue: venue_id,
                            reason: err.to_string(),
                        }),
                    }
                    self.end_sensing(u);
                }
            }
            EventKind::TestPositive {
                test_center,
                contagious_start,
                contagious_end,
            } => {
                let period = ContagiousPeriod {
                    start: *contagious_start,
                    end: *contagious_end,
                };
                let mut accepted = true;
                let true_id = self.users[u].true_id.clone();
                if let Proto::Venue(app) = &mut self.users[u].proto {
                    let req = app.certificate_request();
                    let tc = self.test_centers.get_mut(test_center).expect("validated");
                    match tc.certify(&req, &true_id, period) {
                        Ok(cert) => {
                            accepted = app.store_certificate(cert.clone()).is_ok();
                            self.users[u].certificate = Some(cert);
                        }
                        Err(_) => accepted = false,
                    }
                }
                self.users[u].contagious_start = Some(*contagious_start);
                let r = TraceRecord::Infection {
                    time: now,
                    user: self.users[u].id.clone(),
                    test_center: test_center.clone(),
                    start: *contagious_start,
                    end: *contagious_end,
                    accepted_by_app: accepted,
                };
                self.rec(r);
            }
            EventKind::Report => self.report(u),
            EventKind::TraceQuery => self.trace_round(Some(u)),
            EventKind::AdversaryAction { .. } => unreachable!(),
        }
        Ok(())
    }

    fn start_adversary(&mut self, label: &str, action: AdversaryAction) {
        let now = self.now;
        let end = action.end();
        match (&action, self.protocol) {
            (
                AdversaryAction::ImpersonateRid {
                    colluder,
                    beneficiary,
                    forge_rid: true,
                    ..
                },
                Protocol::Venue,
            ) => {
                let b = self.user_index[beneficiary];
                let c = self.user_index[colluder];
                if let (Proto::Venue(ba), _) = (&self.users[b].proto, ()) {
                    let rid = ba.rid();
                    if let Proto::Venue(ca) = &mut self.users[c].proto {
                        ca.present_rid(rid);
                    }
                }
            }
            (AdversaryAction::TamperReport { user, .. }, _) => {
                let u = self.user_index[user];
                self.users[u].tamper = Some((now, end));
            }
            (AdversaryAction::JamReceiver { venue, .. }, _) => {
                self.jams.entry(venue.clone()).or_default().push((now, end));
            }
            _ => {}
        }
        let idx = self.adversaries.len();
        self.adversaries.push(Adversary {
            label: label.to_owned(),
            action,
            start: now,
            end,
            emitter: EmitterId(ADVERSARY_EMITTER_BASE + idx as u64),
            captures: Vec::new(),
            last_capture: BTreeMap::new(),
            logged: BTreeSet::new(),
            flood_ids: BTreeMap::new(),
            log: ObservationLog::default(),
        });
        self.push(end, Ev::AdversaryEnd(idx));
    }

    fn adversary_end(&mut self, a: usize) {
        let adv = &self.adversaries[a];
        if let AdversaryAction::ImpersonateRid {
            colluder,
            beneficiary,
            forge_rid,
            ..
        } = &adv.action
        {
            if self.protocol != Protocol::Venue {
                return;
            }
            let (start, end) = (adv.start, adv.end);
            let c = self.user_index[colluder];
            let b = self.user_index[beneficiary];
            let mut moved = Vec::new();
            if let Proto::Venue(ca) = &mut self.users[c].proto {
                for (i, v) in ca.visits().iter().enumerate() {
                    let left = v.receipt.as_ref().map_or(i64::MAX, |r| r.leave_time);
                    if v.entry_time >= start && left <= end {
                        moved.push(ca.export_visit(i).expect("index in range"));
                    }
                }
                if *forge_rid {
                    let own = ca.rid();
                    ca.present_rid(own);
                }
            }
            if let Proto::Venue(ba) = &mut self.users[b].proto {
                for v in moved {
                    ba.adopt_visit(v);
                }
            }
        }
    }

    fn epoch_tick(&mut self, u: usize, session: u64) -> Result<(), SimError> {
        if self.users[u].session != session {
            return Ok(());
        }
        let now = self.now;
        let Proto::Venue(app) = &mut self.users[u].proto else {
            return Ok(());
        };
        if !app.is_sensing() {
            return Ok(());
        }
        let id = app
            .epoch_tick(now, &mut self.rng)
            .map_err(|e| SimError::Protocol { time: now, source: e })?;
        self.set_broadcast(u, Some(Payload::Eph(id)));
        let next = now + self.sc.params.epoch_length as i64;
        if next < self.sc.horizon {
            self.push(next, Ev::EpochTick { user: u, session });
        }
        Ok(())
    }

    fn rotate(&mut self) {
        let now = self.now;
        for u in 0..self.users.len() {
            let payload = match &mut self.users[u].proto {
                Proto::Dp3t(d) => Payload::Eph(d.ephid_at(now, &mut self.rng)),
                Proto::Tt(t) => Payload::Tid(t.tid_at(&self.moh, now, &mut self.rng)),
                Proto::Venue(_) => continue,
            };
            if self.users[u].sensing_since.is_none() {
                self.users[u].sensing_since = Some((now, None));
            }
            self.set_broadcast(u, Some(payload));
        }
    }

    fn jammed(&self, venue: &str, t: i64) -> bool {
        self.jams
            .get(venue)
            .is_some_and(|w| w.iter().any(|(s, e)| *s <= t && t < *e))
    }

    /// Radio exchange over `[a, b)`.
    fn segment(&mut self, a: i64, b: i64) {
        let mut honest: Vec<Tx> = Vec::new();
        for (i, u) in self.users.iter().enumerate() {
            if let (Some(p), Some(place)) = (&u.current, &u.loc.place) {
                honest.push(Tx {
                    emitter: EmitterId(i as u64),
                    user: Some(i),
                    place: place.clone(),
                    pos: u.loc.pos,
                    payload: p.clone(),
                    start: a,
                    dur: b - a,
                    boost: 0.0,
                });
            }
        }

        // adversary captures see honest traffic only
        let channel = self.sc.channel;
        let mut captured_records = Vec::new();
        for adv in self.adversaries.iter_mut() {
            if !adv.active_at(a) {
                continue;
            }
            let sites: Vec<Site> = adv.capture_sites().into_iter().cloned().collect();
            for site in &sites {
                for tx in honest.iter().filter(|t| t.place == site.place) {
                    let d = ChannelModel::distance(tx.pos, site.position);
                    if channel.receive(d, 0.0, &mut self.rng).is_none() {
                        continue;
                    }
                    adv.capture(tx.payload.clone(), tx.start, tx.start + tx.dur);
                    if adv.logged.insert((site.place.clone(), tx.payload.clone())) {
                        adv.log.saw(InfoClass::EphId, 1);
                        captured_records.push(TraceRecord::AdversaryCapture {
                            time: a,
                            adversary: adv.label.clone(),
                            action: adv.action.name().to_owned(),
                            place: site.place.clone(),
                            payload: tx.payload.hex(),
                        });
                    }
                }
            }
        }
        self.out.extend(captured_records);

        let mut txs = honest;
        let protocol = self.protocol;
        for adv in self.adversaries.iter_mut() {
            match &adv.action {
                AdversaryAction::RelayCrossVenue {
                    to,
                    delay,
                    tx_boost_db,
                    ..
                } => emit_shifted(adv_captures(adv), to.place.clone(), to.position, *delay, *tx_boost_db, adv.emitter, a, b, &mut txs),
                AdversaryAction::ReplaySameVenue {
                    at,
                    delay,
                    emit_position,
                    tx_boost_db,
                    ..
                } => emit_shifted(
                    adv_captures(adv),
                    at.place.clone(),
                    emit_position.unwrap_or(at.position),
                    *delay,
                    *tx_boost_db,
                    adv.emitter,
                    a,
                    b,
                    &mut txs,
                ),
                AdversaryAction::Flood {
                    at,
                    ids_per_bucket,
                    bucket_length,
                    ..
                } => {
                    let (lo, hi) = (a.max(adv.start), b.min(adv.end));
                    if lo >= hi {
                        continue;
                    }
                    let bl = *bucket_length;
                    let mut q = lo.div_euclid(bl);
                    while q * bl < hi {
                        let s = lo.max(q * bl);
                        let e = hi.min((q + 1) * bl);
                        let rng = &mut self.rng;
                        let ids = adv.flood_ids.entry(q).or_insert_with(|| {
                            (0..*ids_per_bucket)
                                .map(|_| random_payload(protocol, rng))
                                .collect()
                        });
                        for p in ids.iter() {
                            txs.push(Tx {
                                emitter: adv.emitter,
                                user: None,
                                place: at.place.clone(),
                                pos: at.position,
                                payload: p.clone(),
                                start: s,
                                dur: e - s,
                                boost: 0.0,
                            });
                        }
                        q += 1;
                    }
                }
                _ => {}
            }
        }

        let mut by_place: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, u) in self.users.iter().enumerate() {
            if let Some(p) = &u.loc.place {
                by_place.entry(p.as_str()).or_default().push(i);
            }
        }
        let by_place: BTreeMap<String, Vec<usize>> = by_place
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect();

        let mut anomalies = Vec::new();
        for tx in &txs {
            if let Some(listeners) = by_place.get(&tx.place) {
                for &j in listeners {
                    if Some(j) == tx.user {
                        continue;
                    }
                    let d = ChannelModel::distance(tx.pos, self.users[j].loc.pos);
                    let Some(sig) = channel.receive(d, tx.boost, &mut self.rng) else {
                        continue;
                    };
                    let dur = tx.dur as u64;
                    let listener = &mut self.users[j];
                    match (&mut listener.proto, &tx.payload) {
                        (Proto::Venue(app), Payload::Eph(id)) => {
                            if app.is_sensing() {
                                app.hear(*id, sig, tx.start, dur).ok();
                            }
                        }
                        (Proto::Dp3t(dp), Payload::Eph(id)) => {
                            dp.hear(*id, sig, tx.start, dur);
                            listener.observations.saw(InfoClass::EphId, 1);
                        }
                        (Proto::Tt(tt), Payload::Tid(tid)) => {
                            if let Some(Payload::Tid(own)) = &listener.current {
                                tt.record(own.clone(), tid.clone(), sig, dur, tx.start);
                                listener.observations.saw(InfoClass::EphId, 1);
                            }
                        }
                        _ => {}
                    }
                }
            }
            if protocol == Protocol::Venue {
                if self.jammed(&tx.place, tx.start) {
                    continue;
                }
                let receiver = self
                    .sc
                    .venues
                    .iter()
                    .find(|v| v.id == tx.place)
                    .map(|v| v.receiver);
                let (Some(receiver), Payload::Eph(id)) = (receiver, &tx.payload) else {
                    continue;
                };
                let venue = self.venues.get_mut(&tx.place).expect("venue exists");
                let sig = channel.signal_at(ChannelModel::distance(tx.pos, receiver)) + tx.boost;
                for an in venue.record_broadcast(*id, sig, tx.emitter, tx.start) {
                    anomalies.push(TraceRecord::Anomaly {
                        time: an.time,
                        venue: tx.place.clone(),
                        kind: anomaly_name(an.kind).to_owned(),
                        emitter: an.emitter.0,
                    });
                }
            }
        }
        self.out.extend(anomalies);
    }

    fn emit_digests(&mut self) -> Result<(), SimError> {
        let now = self.now;
        let fpr = self.sc.params.bloom_fpr;
        let ids: Vec<String> = self.venues.keys().cloned().collect();
        for id in ids {
            let venue = self.venues.get_mut(&id).expect("known");
            if venue.digest_cursor() >= now {
                continue;
            }
            let d = venue
                .emit_digest(now, fpr)
                .map_err(|e| SimError::Runtime(e.to_string()))?;
            self.out.push(TraceRecord::Digest {
                time: now,
                venue: id.clone(),
                start: d.period_start,
                end: d.period_end,
                bits: d.filter.bit_len(),
                hashes: d.filter.hash_count(),
            });
            self.ha.store_digest(d, now);
        }
        Ok(())
    }

    fn report(&mut self, u: usize) {
        let now = self.now;
        let user = &mut self.users[u];
        match &mut user.proto {
            Proto::Venue(app) => {
                let Some(cert) = user.certificate.clone() else {
                    return;
                };
                let mut bundles = app.build_reports(&cert);
                bundles.retain(|b| user.reported_nonces.insert(b.nonce.0));
                let tampered = user.tamper.is_some_and(|(s, e)| s <= now && now <= e);
                for mut bundle in bundles {
                    if tampered {
                        if let Some(k) = bundle.window_keys.last_mut() {
                            *k = hash(k).0;
                        }
                    }
                    self.pending.push(Pending { user: u, bundle });
                }
                self.try_pending(false);
            }
            Proto::Dp3t(dp) => {
                let first = day_of(user.contagious_start.unwrap_or(0));
                let pk = dp.report(first, day_of(now), &mut self.rng);
                self.baseline_backend_log.saw(InfoClass::DailyKey, 1);
                let r = TraceRecord::KeyPublished {
                    time: now,
                    user: self.users[u].id.clone(),
                    day: pk.day,
                    key: hex::encode(pk.key),
                };
                self.dp3t.publish(pk);
                self.dp3t_owner.push(u);
                self.rec(r);
                if let Proto::Dp3t(dp) = &mut self.users[u].proto {
                    let id = dp.ephid_at(now, &mut self.rng);
                    self.set_broadcast(u, Some(Payload::Eph(id)));
                }
            }
            Proto::Tt(tt) => {
                let triples = tt.triples().to_vec();
                let result = self.moh.trace(&triples, &self.policy);
                let by_pseudonym: BTreeMap<_, usize> = self
                    .users
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| match &s.proto {
                        Proto::Tt(t) => Some((t.pseudonym, i)),
                        _ => None,
                    })
                    .collect();
                let mut contacts = Vec::new();
                let reporter = self.users[u].id.clone();
                let mut records = Vec::new();
                for c in &result.contacts {
                    let Some(&j) = by_pseudonym.get(&c.pseudonym) else {
                        continue;
                    };
                    contacts.push(self.users[j].id.clone());
                    records.push(TraceRecord::Delivery {
                        time: now,
                        user: self.users[j].id.clone(),
                        infected: reporter.clone(),
                        venue: None,
                        record_id: None,
                        record_leave_time: None,
                        visit_leave_time: None,
                        evidence: Evidence::Durations {
                            hearings: c.hearings.clone(),
                        },
                    });
                    if c.at_risk && self.notified.insert((j, u)) {
                        records.push(TraceRecord::Notification {
                            time: now,
                            user: self.users[j].id.clone(),
                            infected: reporter.clone(),
                        });
                    }
                }
                self.rec(TraceRecord::MohTrace {
                    time: now,
                    reporter,
                    contacts,
                    rejected: result.rejected,
                });
                self.out.extend(records);
            }
        }
    }

    /// Processes queued bundles whose venue period the authority can already
    /// check. With `force`, everything left is processed.
    fn try_pending(&mut self, force: bool) {
        let params = self.sc.params.scheduling();
        let pending = std::mem::take(&mut self.pending);
        for p in pending {
            let b = &p.bundle;
            let shape = StayShape {
                windows: b.window_keys.len() as u32,
                last_window_epochs: b.last_window_epochs,
            };
            let start = b.receipt.leave_time
                - shape.epoch_count(&params) as i64 * params.epoch_length as i64;
            if !force && !self.ha.covers(&b.venue_id, start, b.receipt.leave_time) {
                self.pending.push(p);
                continue;
            }
            let result = self.backend.process_report(b, &mut self.ha);
            let (outcome, record_id) = match result {
                Ok(rec) => {
                    let dup = self.record_owner.contains_key(&rec.record_id);
                    self.record_owner.insert(rec.record_id, p.user);
                    (
                        if dup { "duplicate" } else { "accepted" }.to_owned(),
                        Some(rec.record_id),
                    )
                }
                Err(code) => (code.as_str().to_owned(), None),
            };
            for n in self.backend.take_notices() {
                if let Some(v) = self.venues.get_mut(&n.venue_id) {
                    v.receive_notice(n);
                }
            }
            let r = TraceRecord::Report {
                time: self.now,
                user: self.users[p.user].id.clone(),
                venue: b.venue_id.clone(),
                leave_time: b.receipt.leave_time,
                outcome,
                record_id,
            };
            self.rec(r);
        }
    }

    fn trace_round(&mut self, only: Option<usize>) {
        let now = self.now;
        let users: Vec<usize> = match only {
            Some(u) => vec![u],
            None => (0..self.users.len()).collect(),
        };
        match self.protocol {
            Protocol::Venue => {
                for u in users {
                    self.venue_trace(u, now);
                }
            }
            Protocol::Dp3t => {
                let today = day_of(now);
                let epd = self.sc.params.dp3t_epochs_per_day;
                let sets: Vec<BTreeSet<EphemeralId>> = self
                    .dp3t
                    .published()
                    .iter()
                    .map(|pk| {
                        pk.derive_through(today, epd)
                            .into_iter()
                            .flat_map(|(_, ids)| ids)
                            .collect()
                    })
                    .collect();
                for u in users {
                    self.users[u]
                        .observations
                        .saw(InfoClass::DailyKey, sets.len() as u64);
                    for (k, ids) in sets.iter().enumerate() {
                        let owner = self.dp3t_owner[k];
                        let Proto::Dp3t(dp) = &self.users[u].proto else {
                            continue;
                        };
                        let hits = dp.match_against(ids);
                        if hits.is_empty() || owner == u {
                            continue;
                        }
                        let hearings: Vec<(f64, u64)> =
                            hits.iter().map(|h| (h.signal_dbm, h.duration)).collect();
                        let (_, at_risk) = duration_at_risk(hearings.iter().copied(), &self.policy);
                        self.deliver(u, owner, k as u64, 0, None, None, None, Evidence::Durations { hearings }, at_risk);
                    }
                }
            }
            Protocol::TraceTogether => {}
        }
    }

    fn venue_trace(&mut self, u: usize, now: i64) {
        let Proto::Venue(app) = &mut self.users[u].proto else {
            return;
        };
        let queries = app.trace_queries();
        let mut found = Vec::new();
        for (vi, q) in queries {
            let Ok(records) = self.backend.answer_trace(&q, now) else {
                continue;
            };
            if records.is_empty() {
                continue;
            }
            let Proto::Venue(app) = &mut self.users[u].proto else {
                unreachable!()
            };
            let scores = app.evaluate_visit(vi, &records, &self.policy);
            for (rec, score) in records.iter().zip(scores) {
                found.push((vi, q.receipt.leave_time, rec.clone(), score));
            }
        }
        let l = self.sc.params.epoch_length;
        for (vi, visit_leave, rec, score) in found {
            let Some(&owner) = self.record_owner.get(&rec.record_id) else {
                continue;
            };
            self.deliver(
                u,
                owner,
                rec.record_id,
                vi as u64,
                Some(rec.venue_id.clone()),
                Some(rec.leave_time),
                Some(visit_leave),
                Evidence::Epochs {
                    epoch_length: l,
                    epochs: score.evidence,
                },
                score.at_risk,
            );
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deliver(
        &mut self,
        u: usize,
        owner: usize,
        record: u64,
        visit: u64,
        venue: Option<String>,
        record_leave_time: Option<i64>,
        visit_leave_time: Option<i64>,
        evidence: Evidence,
        at_risk: bool,
    ) {
        let key = (u, record, visit);
        if self.delivered.get(&key) == Some(&evidence) {
            return;
        }
        self.delivered.insert(key, evidence.clone());
        let user = self.users[u].id.clone();
        let infected = self.users[owner].id.clone();
        self.out.push(TraceRecord::Delivery {
            time: self.now,
            user: user.clone(),
            infected: infected.clone(),
            venue,
            record_id: Some(record),
            record_leave_time,
            visit_leave_time,
            evidence,
        });
        if at_risk && self.notified.insert((u, owner)) {
            self.out.push(TraceRecord::Notification {
                time: self.now,
                user,
                infected,
            });
        }
    }

    fn finish(&mut self) -> Result<(), SimError> {
        if self.protocol == Protocol::Venue {
            self.emit_digests()?;
            self.try_pending(true);
        }
        if self.protocol != Protocol::TraceTogether {
            self.trace_round(None);
        }
        for u in 0..self.users.len() {
            self.close_presence(u);
            self.end_sensing(u);
        }
        self.observations();
        Ok(())
    }

    fn observations(&mut self) {
        let mut logs: BTreeMap<String, ObservationLog> = BTreeMap::new();
        let mut users = ObservationLog::default();
        for u in &self.users {
            users.merge(&u.observations);
            if let Proto::Venue(app) = &u.proto {
                users.merge(app.observations());
            }
        }
        logs.insert("users".into(), users);
        let mut adv = ObservationLog::default();
        for a in &self.adversaries {
            adv.merge(&a.log);
        }
        logs.insert("adversary".into(), adv);
        match self.protocol {
            Protocol::Venue => {
                let mut venues = ObservationLog::default();
                for v in self.venues.values() {
                    venues.merge(v.observations());
                }
                logs.insert("venues".into(), venues);
                let mut tcs = ObservationLog::default();
                for t in self.test_centers.values() {
                    tcs.merge(t.observations());
                }
                logs.insert("test_centers".into(), tcs);
                logs.insert("health_authority".into(), self.ha.observations().clone());
                logs.insert("backend".into(), self.backend.observations().clone());
            }
            Protocol::Dp3t => {
                logs.insert("backend".into(), self.baseline_backend_log.clone());
            }
            Protocol::TraceTogether => {
                logs.insert("moh".into(), self.moh.observations().clone());
            }
        }
        for (actor, log) in logs {
            self.out.push(TraceRecord::Observations {
                actor,
                counts: log.classes().collect(),
            });
        }
    }
}

fn anomaly_name(kind: AnomalyKind) -> &'static str {
    match kind {
        AnomalyKind::Flooding => "flooding",
        AnomalyKind::SignalTooStrong => "signal_too_strong",
    }
}

fn adv_captures(adv: &Adversary) -> &[(Payload, i64, i64)] {
    &adv.captures
}

#[allow(clippy::too_many_arguments)]
fn emit_shifted(
    captures: &[(Payload, i64, i64)],
    place: String,
    pos: [f64; 2],
    delay: i64,
    boost: f64,
    emitter: EmitterId,
    a: i64,
    b: i64,
    txs: &mut Vec<Tx>,
) {
    for (p, s, e) in captures {
        let lo = (s + delay).max(a);
        let hi = (e + delay).min(b);
        if lo < hi {
            txs.push(Tx {
                emitter,
                user: None,
                place: place.clone(),
                pos,
                payload: p.clone(),
                start: lo,
                dur: hi - lo,
                boost,
            });
        }
    }
}

fn random_payload<R: RngCore>(protocol: Protocol, rng: &mut R) -> Payload {
    match protocol {
        Protocol::TraceTogether => {
            let mut b = vec![0u8; 40];
            rng.fill_bytes(&mut b);
            Payload::Tid(TempId(b))
        }
        _ => {
            let mut b = [0u8; 16];
            rng.fill_bytes(&mut b);
            Payload::Eph(EphemeralId(b))
        }
    }
}
