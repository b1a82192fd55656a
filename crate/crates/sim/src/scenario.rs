// SPDX-License-Identifier: Apache-2.0

//! Scenario files: who exists, where they go and what the adversary does.
//! See `docs/scenario.md` for the schema.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use venue_act_core::actors::TimePolicy;
use venue_act_core::SchedulingParams;

use crate::channel::ChannelModel;

pub const DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Venue,
    Dp3t,
    #[serde(rename = "tracetogether")]
    TraceTogether,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Venue, Protocol::Dp3t, Protocol::TraceTogether];

    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Venue => "venue",
            Protocol::Dp3t => "dp3t",
            Protocol::TraceTogether => "tracetogether",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "venue" => Ok(Protocol::Venue),
            "dp3t" => Ok(Protocol::Dp3t),
            "tracetogether" => Ok(Protocol::TraceTogether),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Protocol and policy knobs. Every field is optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub epoch_length: u64,
    pub window_length: u64,
    pub bloom_fpr: f64,
    pub retention_days: u32,
    /// Seconds of close contact that count as an exposure.
    pub exposure_threshold: u64,
    /// Metres; also fixes the signal threshold through the channel model.
    pub proximity_distance: f64,
    pub digest_interval: i64,
    pub trace_interval: i64,
    pub arrival_time_extension: bool,
    pub clock_tolerance: i64,
    pub exclusion_tolerance: i64,
    pub min_trace_stay: i64,
    pub time_policy: TimePolicy,
    pub dp3t_epochs_per_day: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            epoch_length: 180,
            window_length: 7_200,
            bloom_fpr: 1e-6,
            retention_days: 14,
            exposure_threshold: 900,
            proximity_distance: 2.0,
            digest_interval: DAY,
            trace_interval: DAY,
            arrival_time_extension: false,
            clock_tolerance: 60,
            exclusion_tolerance: 0,
            min_trace_stay: 300,
            time_policy: TimePolicy::SameDate,
            dp3t_epochs_per_day: 96,
        }
    }
}

impl SimParams {
    pub fn scheduling(&self) -> SchedulingParams {
        SchedulingParams {
            epoch_length: self.epoch_length,
            window_length: self.window_length,
        }
    }

    pub fn retention(&self) -> i64 {
        self.retention_days as i64 * DAY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VenueSpec {
    pub id: String,
    #[serde(default)]
    pub time_policy: Option<TimePolicy>,
    /// Uncertified venues sign receipts with a key the authority never saw.
    #[serde(default = "yes")]
    pub certified: bool,
    /// Position of the venue's receiver.
    #[serde(default = "default_receiver")]
    pub receiver: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestCenterSpec {
    pub id: String,
    #[serde(default = "yes")]
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub id: String,
    #[serde(default)]
    pub true_id: Option<String>,
    #[serde(default)]
    pub phone: Option<String>,
}

impl UserSpec {
    pub fn true_id(&self) -> &str {
        self.true_id.as_deref().unwrap_or(&self.id)
    }
}

/// A place and a position inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Site {
    pub place: String,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum AdversaryAction {
    /// Captures broadcasts at one venue and re-emits them at another.
    RelayCrossVenue {
        from: Site,
        to: Site,
        end: i64,
        #[serde(default)]
        delay: i64,
        #[serde(default)]
        tx_boost_db: f64,
    },
    /// Captures broadcasts and re-emits them at the same venue later.
    ReplaySameVenue {
        at: Site,
        end: i64,
        delay: i64,
        #[serde(default)]
        emit_position: Option<[f64; 2]>,
        #[serde(default)]
        tx_boost_db: f64,
    },
    /// Emits many fresh random identifiers.
    Flood {
        at: Site,
        end: i64,
        #[serde(default = "default_flood_rate")]
        ids_per_bucket: u32,
        #[serde(default = "default_bucket")]
        bucket_length: i64,
    },
    /// `colluder`'s visits commit to `beneficiary`'s rid and are handed over
    /// at `end`. With `forge_rid` false the stolen visits keep the
    /// colluder's own rid.
    ImpersonateRid {
        colluder: String,
        beneficiary: String,
        end: i64,
        #[serde(default = "yes")]
        forge_rid: bool,
    },
    /// Passive receivers that log everything they hear.
    LinkageEavesdrop { sites: Vec<Site>, end: i64 },
    /// Reports by `user` in the window carry a corrupted window key.
    TamperReport { user: String, end: i64 },
    /// The venue's receiver hears nothing during the window.
    JamReceiver { venue: String, end: i64 },
}

impl AdversaryAction {
    pub fn end(&self) -> i64 {
        match self {
            AdversaryAction::RelayCrossVenue { end, .. }
            | AdversaryAction::ReplaySameVenue { end, .. }
            | AdversaryAction::Flood { end, .. }
            | AdversaryAction::ImpersonateRid { end, .. }
            | AdversaryAction::LinkageEavesdrop { end, .. }
            | AdversaryAction::TamperReport { end, .. }
            | AdversaryAction::JamReceiver { end, .. } => *end,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdversaryAction::RelayCrossVenue { .. } => "relay_cross_venue",
            AdversaryAction::ReplaySameVenue { .. } => "replay_same_venue",
            AdversaryAction::Flood { .. } => "flood",
            AdversaryAction::ImpersonateRid { .. } => "impersonate_rid",
            AdversaryAction::LinkageEavesdrop { .. } => "linkage_eavesdrop",
            AdversaryAction::TamperReport { .. } => "tamper_report",
            AdversaryAction::JamReceiver { .. } => "jam_receiver",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Enter {
        venue: String,
        position: [f64; 2],
        #[serde(default = "yes")]
        consent: bool,
    },
    /// Changes position; with `place` the user moves to an off-premise place
    /// such as a street.
    Move {
        position: [f64; 2],
        #[serde(default)]
        place: Option<String>,
    },
    Leave {
        /// Seconds added to the departure time the phone claims.
        #[serde(default)]
        clock_offset: i64,
    },
    /// Off-premise place to private space, where nobody is heard.
    GoHome,
    TestPositive {
        test_center: String,
        contagious_start: i64,
        contagious_end: i64,
    },
    Report,
    TraceQuery,
    AdversaryAction {
        #[serde(flatten)]
        action: AdversaryAction,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub time: i64,
    /// User id, or the adversary's label for adversary actions.
    pub subject: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub horizon: i64,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default)]
    pub params: SimParams,
    #[serde(default)]
    pub channel: ChannelModel,
    #[serde(default)]
    pub venues: Vec<VenueSpec>,
    #[serde(default)]
    pub test_centers: Vec<TestCenterSpec>,
    #[serde(default)]
    pub users: Vec<UserSpec>,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
}

fn yes() -> bool {
    true
}

fn default_receiver() -> [f64; 2] {
    [-1.0, -1.0]
}

fn default_flood_rate() -> u32 {
    20
}

fn default_bucket() -> i64 {
    180
}

/// One problem found by [`validate`]. `event` indexes `Scenario::events`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub event: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.event {
            Some(i) => write!(f, "event {i}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// The same scenario with every adversary action removed.
    pub fn without_adversaries(&self) -> Scenario {
        let mut s = self.clone();
        s.events
            .retain(|e| !matches!(e.kind, EventKind::AdversaryAction { .. }));
        s
    }

    pub fn has_adversaries(&self) -> bool {
        self.events
            .iter()
            .any(|e| matches!(e.kind, EventKind::AdversaryAction { .. }))
    }
}

/// Checks everything the simulator assumes about a scenario.
pub fn validate(s: &Scenario) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut top = |m: String| out.push(Diagnostic { event: None, message: m });
    if s.horizon < 0 {
        top(format!("horizon {} is negative", s.horizon));
    }
    if let Err(e) = s.params.scheduling().validate() {
        top(format!("scheduling parameters: {e}"));
    }
    let p = &s.params;
    if !(p.bloom_fpr > 0.0 && p.bloom_fpr < 1.0) {
        top(format!("bloom_fpr {} must lie in (0, 1)", p.bloom_fpr));
    }
    if p.digest_interval <= 0 || p.trace_interval <= 0 {
        top("digest_interval and trace_interval must be positive".into());
    }
    if p.dp3t_epochs_per_day == 0 || DAY % p.dp3t_epochs_per_day as i64 != 0 {
        top(format!(
            "dp3t_epochs_per_day {} must divide a day",
            p.dp3t_epochs_per_day
        ));
    }
    if !(p.proximity_distance > 0.0) {
        top("proximity_distance must be positive".into());
    }
    for m in s.channel.problems() {
        top(m);
    }

    let mut seen = BTreeSet::new();
    for id in s
        .users
        .iter()
        .map(|u| &u.id)
        .chain(s.venues.iter().map(|v| &v.id))
    {
        if !seen.insert(id.as_str()) {
            top(format!("duplicate id {id:?}"));
        }
    }
    let mut tcs = BTreeSet::new();
    for t in &s.test_centers {
        if !tcs.insert(t.id.as_str()) {
            top(format!("duplicate test center {:?}", t.id));
        }
    }
    let venues: BTreeSet<&str> = s.venues.iter().map(|v| v.id.as_str()).collect();
    let users: BTreeSet<&str> = s.users.iter().map(|u| u.id.as_str()).collect();

    #[derive(Clone, PartialEq)]
    enum Where {
        Home,
        Venue(String),
        Off(String),
    }
    let mut at: BTreeMap<&str, Where> = users.iter().map(|u| (*u, Where::Home)).collect();
    let mut tested: BTreeSet<&str> = BTreeSet::new();
    let mut last_time = i64::MIN;
    for (i, e) in s.events.iter().enumerate() {
        let mut diag = |m: String| out.push(Diagnostic { event: Some(i), message: m });
        if e.time < last_time {
            diag(format!("time {} is earlier than the previous event ({last_time})", e.time));
        }
        last_time = last_time.max(e.time);
        if e.time < 0 || e.time > s.horizon {
            diag(format!("time {} lies outside [0, {}]", e.time, s.horizon));
        }
        let is_user = users.contains(e.subject.as_str());
        let needs_user = !matches!(e.kind, EventKind::AdversaryAction { .. });
        if needs_user && !is_user {
            diag(format!("unknown user {:?}", e.subject));
            continue;
        }
        match &e.kind {
            EventKind::Enter { venue, position, .. } => {
                if !venues.contains(venue.as_str()) {
                    diag(format!("unknown venue {venue:?}"));
                }
                check_position(position, &mut diag);
                match at.get(e.subject.as_str()) {
                    Some(Where::Venue(v)) => diag(format!(
                        "{} enters {venue} before leaving {v}",
                        e.subject
                    )),
                    _ => {
                        at.insert(&e.subject, Where::Venue(venue.clone()));
                    }
                }
            }
            EventKind::Move { position, place } => {
                check_position(position, &mut diag);
                match (place, at.get(e.subject.as_str())) {
                    (Some(p), Some(Where::Venue(v))) => {
                        diag(format!("{} moves to {p} before leaving {v}", e.subject))
                    }
                    (Some(p), _) => {
                        if venues.contains(p.as_str()) {
                            diag(format!("{p} is a venue; use an enter event"));
                        }
                        at.insert(&e.subject, Where::Off(p.clone()));
                    }
                    (None, Some(Where::Home)) => {
                        diag(format!("{} moves while at home", e.subject))
                    }
                    (None, _) => {}
                }
            }
            EventKind::Leave { .. } => match at.get(e.subject.as_str()) {
                Some(Where::Venue(_)) => {
                    at.insert(&e.subject, Where::Home);
                }
                _ => diag(format!("{} leaves without being in a venue", e.subject)),
            },
            EventKind::GoHome => match at.get(e.subject.as_str()) {
                Some(Where::Venue(v)) => {
                    diag(format!("{} goes home before leaving {v}", e.subject))
                }
                _ => {
                    at.insert(&e.subject, Where::Home);
                }
            },
            EventKind::TestPositive {
                test_center,
                contagious_start,
                contagious_end,
            } => {
                if !tcs.contains(test_center.as_str()) {
                    diag(format!("unknown test center {test_center:?}"));
                }
                if contagious_end <= contagious_start {
                    diag("contagious period is empty".into());
                }
                tested.insert(&e.subject);
            }
            EventKind::Report => {
                if !tested.contains(e.subject.as_str()) {
                    diag(format!("{} reports before testing positive", e.subject));
                }
            }
            EventKind::TraceQuery => {}
            EventKind::AdversaryAction { action } => {
                let end = action.end();
                if end < e.time || end > s.horizon {
                    diag(format!(
                        "{} window [{}, {end}] lies outside the scenario horizon [0, {}]",
                        action.name(),
                        e.time,
                        s.horizon
                    ));
                }
                let mut need_user = |u: &str| {
                    if !users.contains(u) {
                        diag(format!("unknown user {u:?}"));
                    }
                };
                match action {
                    AdversaryAction::ImpersonateRid {
                        colluder,
                        beneficiary,
                        ..
                    } => {
                        need_user(colluder);
                        need_user(beneficiary);
                    }
                    AdversaryAction::TamperReport { user, .. } => need_user(user),
                    AdversaryAction::JamReceiver { venue, .. } => {
                        if !venues.contains(venue.as_str()) {
                            diag(format!("unknown venue {venue:?}"));
                        }
                    }
                    AdversaryAction::RelayCrossVenue { from, to, delay, .. } => {
                        if *delay < 0 {
                            diag("delay is negative".into());
                        }
                        if from.place == to.place {
                            diag("relay source and target are the same place".into());
                        }
                    }
                    AdversaryAction::ReplaySameVenue { delay, .. } => {
                        if *delay < 0 {
                            diag("delay is negative".into());
                        }
                    }
                    AdversaryAction::Flood {
                        ids_per_bucket,
                        bucket_length,
                        ..
                    } => {
                        if *ids_per_bucket == 0 || *bucket_length <= 0 {
                            diag("flood rate and bucket length must be positive".into());
                        }
                    }
                    AdversaryAction::LinkageEavesdrop { sites, .. } => {
                        if sites.is_empty() {
                            diag("eavesdropper has no sites".into());
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_position(p: &[f64; 2], diag: &mut impl FnMut(String)) {
    if !p.iter().all(|c| c.is_finite()) {
        diag("position is not finite".into());
    }
}

/// Byte offsets of each element of the top-level `events` array, used to
/// anchor diagnostics to lines. Returns `None` when the text is not a JSON
/// object with such an array.
pub fn event_offsets(text: &str) -> Option<Vec<usize>> {
    let b = text.as_bytes();
    let mut i = 0;
    let mut depth = 0usize;
    let mut key: Option<String> = None;
    let mut expecting_value = false;
    while i < b.len() {
        match b[i] {
            b'"' => {
                let start = i + 1;
                i = skip_string(b, i)?;
                if depth == 1 && !expecting_value {
                    key = Some(text[start..i - 1].to_owned());
                }
                expecting_value = false;
                continue;
            }
            b':' if depth == 1 => expecting_value = true,
            b'[' if depth == 1 && expecting_value && key.as_deref() == Some("events") => {
                return array_elements(b, i);
            }
            b'{' | b'[' => {
                depth += 1;
                expecting_value = false;
            }
            b'}' | b']' => {
                depth = depth.checked_sub(1)?;
                expecting_value = false;
            }
            b',' => expecting_value = false,
            _ => {}
        }
        i += 1;
    }
    None
}

fn skip_string(b: &[u8], mut i: usize) -> Option<usize> {
    i += 1;
    while i < b.len() {
        match b[i] {
            b'\\' => i += 2,
            b'"' => return Some(i + 1),
            _ => i += 1,
        }
    }
    None
}

fn array_elements(b: &[u8], open: usize) -> Option<Vec<usize>> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut i = open + 1;
    let mut want = true;
    while i < b.len() {
        let c = b[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if depth == 0 && want && c != b']' {
            out.push(i);
            want = false;
        }
        match c {
            b'"' => {
                i = skip_string(b, i)?;
                continue;
            }
            b'{' | b'[' => depth += 1,
            b'}' => depth = depth.checked_sub(1)?,
            b']' => {
                if depth == 0 {
                    return Some(out);
                }
                depth -= 1;
            }
            b',' if depth == 0 => want = true,
            _ => {}
        }
        i += 1;
    }
    None
}

/// 1-based line of a byte offset.
pub fn line_of(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset.min(text.len())]
        .iter()
        .filter(|c| **c == b'\n')
        .count()
        + 1
}
