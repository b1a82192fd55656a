// SPDX-License-Identifier: Apache-2.0

//! Metrics computed from a trace alone, so a stored log can be re-scored
//! under different thresholds without re-running the simulation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use venue_act_core::actors::{score_evidence, InfoClass, RiskPolicy, TimePolicy};
use venue_act_core::baseline::dp3t::day_of;
use venue_act_core::baseline::{duration_at_risk, PublishedKey};
use venue_act_core::SchedulingParams;

use crate::channel::ChannelModel;
use crate::scenario::{Protocol, SimParams};
use crate::trace::{Evidence, SimulationTrace, TraceRecord};
use crate::truth;

/// Overrides applied when re-scoring. `None` keeps the value from the trace.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricFlags {
    pub exposure_threshold: Option<u64>,
    pub proximity_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub name: String,
    pub protocol: Protocol,
    pub seed: u64,
    pub exposure_threshold: u64,
    pub proximity_distance: f64,
    pub users: usize,
    pub infected: usize,
    pub truth_on_premise: usize,
    pub truth_off_premise: usize,
    pub notified: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub missed_on_premise: usize,
    pub missed_off_premise: usize,
    /// `None` when there is nothing to recall.
    pub recall_on_premise: Option<f64>,
    pub recall_off_premise: Option<f64>,
    /// `None` when nobody was notified.
    pub precision: Option<f64>,
    /// Users handed an infected user's identifiers without the sharing that
    /// should gate it.
    pub data_minimisation_violations: usize,
    /// Users who could test an infected stranger met only off premises.
    pub bystander_leaks: usize,
    pub reports: BTreeMap<String, usize>,
    pub anomalies: BTreeMap<String, usize>,
    /// Broadcast payloads seen in more than one (user, venue, visit) context.
    pub linkage_duplicates: usize,
    /// Payloads the adversary captured at more than one place.
    pub eavesdrop_cross_venue_matches: usize,
    /// Longest run of consecutive days whose broadcasts a single published
    /// key lets anyone recompute.
    pub linked_days_max: u32,
    pub linked_days_total: u32,
    pub duty_cycle_mean: f64,
    pub duty_cycle_max: f64,
    pub moh_edges: usize,
    pub moh_edges_match_truth: Option<bool>,
    pub adversary_secret_exposure: u64,
    pub observations: BTreeMap<String, BTreeMap<InfoClass, u64>>,
    pub at_risk: Vec<(String, String)>,
}

struct HeaderInfo {
    name: String,
    protocol: Protocol,
    seed: u64,
    horizon: i64,
    params: SimParams,
    channel: ChannelModel,
    users: Vec<String>,
    policies: BTreeMap<String, TimePolicy>,
}

fn header(trace: &SimulationTrace) -> HeaderInfo {
    match trace.header() {
        Some(TraceRecord::Header {
            name,
            protocol,
            seed,
            horizon,
            params,
            channel,
            users,
            policies,
            ..
        }) => HeaderInfo {
            name: name.clone(),
            protocol: *protocol,
            seed: *seed,
            horizon: *horizon,
            params: params.clone(),
            channel: *channel,
            users: users.clone(),
            policies: policies.clone(),
        },
        _ => panic!("sealed traces start with a header"),
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Re-scores one delivery.
fn at_risk(evidence: &Evidence, policy: &RiskPolicy, params: &SchedulingParams) -> bool {
    match evidence {
        Evidence::Epochs {
            epoch_length,
            epochs,
        } => {
            let p = SchedulingParams {
                epoch_length: *epoch_length,
                ..*params
            };
            score_evidence(epochs.clone(), policy, &p).at_risk
        }
        Evidence::Durations { hearings } => duration_at_risk(hearings.iter().copied(), policy).1,
    }
}

pub fn collect_metrics(trace: &SimulationTrace, flags: &MetricFlags) -> Metrics {
    let h = header(trace);
    let records = &trace.records;
    let threshold = flags.exposure_threshold.unwrap_or(h.params.exposure_threshold);
    let distance = flags.proximity_distance.unwrap_or(h.params.proximity_distance);
    let policy = RiskPolicy {
        exposure_threshold: threshold,
        proximity_threshold_dbm: h.channel.signal_at(distance),
    };
    let params = h.params.scheduling();
    let gt = truth::ground_truth(records, distance, threshold);
    let infections = truth::infections(records);

    // deliveries and re-scored risk
    let mut delivered: BTreeSet<(String, String)> = BTreeSet::new();
    let mut flagged: BTreeSet<(String, String)> = BTreeSet::new();
    let mut receipts: BTreeMap<(String, String), Vec<i64>> = BTreeMap::new();
    for r in records {
        if let TraceRecord::Receipt {
            user,
            venue,
            leave_time,
            ..
        } = r
        {
            receipts
                .entry((user.clone(), venue.clone()))
                .or_default()
                .push(*leave_time);
        }
    }
    let co_venue = truth::same_venue_same_day(records);
    let mut minimisation = BTreeSet::new();
    for r in records {
        let TraceRecord::Delivery {
            user,
            infected,
            venue,
            record_leave_time,
            evidence,
            ..
        } = r
        else {
            continue;
        };
        let pair = (user.clone(), infected.clone());
        delivered.insert(pair.clone());
        if at_risk(evidence, &policy, &params) {
            flagged.insert(pair.clone());
        }
        let allowed = match (h.protocol, venue, record_leave_time) {
            (Protocol::Venue, Some(v), Some(t)) => {
                let pol = h.policies.get(v).copied().unwrap_or(h.params.time_policy);
                receipts
                    .get(&(user.clone(), v.clone()))
                    .is_some_and(|ls| ls.iter().any(|l| pol.admits(*t, *l)))
            }
            (Protocol::Venue, _, _) => false,
            (Protocol::Dp3t, _, _) => co_venue.contains(&pair),
            (Protocol::TraceTogether, _, _) => true,
        };
        if !allowed {
            minimisation.insert(pair);
        }
    }

    let exposed = gt.exposed();
    let tp = flagged.intersection(&exposed).count();
    let hit_on = gt.on_premise.intersection(&flagged).count();
    let hit_off = gt.off_premise.intersection(&flagged).count();

    let off = truth::off_premise_contacts(records, h.channel.max_range);
    let bystander_leaks = delivered
        .iter()
        .filter(|p| off.contains(*p) && !co_venue.contains(*p))
        .count();

    let mut reports = BTreeMap::new();
    let mut anomalies = BTreeMap::new();
    let mut contexts: BTreeMap<&str, BTreeSet<(&str, Option<&str>, Option<u32>)>> = BTreeMap::new();
    let mut captured: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut sensing: BTreeMap<&str, i64> = BTreeMap::new();
    let mut broadcasts: BTreeMap<&str, BTreeMap<u32, BTreeSet<&str>>> = BTreeMap::new();
    let mut moh: BTreeMap<String, (i64, BTreeSet<String>)> = BTreeMap::new();
    let mut observations = BTreeMap::new();
    let mut published = Vec::new();
    for r in records {
        match r {
            TraceRecord::Report { outcome, .. } => *reports.entry(outcome.clone()).or_insert(0) += 1,
            TraceRecord::Anomaly { kind, .. } => *anomalies.entry(kind.clone()).or_insert(0) += 1,
            TraceRecord::Broadcast {
                time,
                user,
                payload,
                venue,
                visit,
            } => {
                contexts
                    .entry(payload)
                    .or_default()
                    .insert((user, venue.as_deref(), *visit));
                broadcasts
                    .entry(user)
                    .or_default()
                    .entry(day_of(*time))
                    .or_default()
                    .insert(payload);
            }
            TraceRecord::AdversaryCapture { place, payload, .. } => {
                captured.entry(payload).or_default().insert(place);
            }
            TraceRecord::Sensing { user, start, end, .. } => {
                *sensing.entry(user).or_insert(0) += end - start;
            }
            TraceRecord::MohTrace {
                time,
                reporter,
                contacts,
                ..
            } => {
                let e = moh.entry(reporter.clone()).or_insert((*time, BTreeSet::new()));
                e.1.extend(contacts.iter().cloned());
            }
            TraceRecord::Observations { actor, counts } => {
                observations.insert(actor.clone(), counts.clone());
            }
            TraceRecord::KeyPublished { user, day, key, .. } => {
                if let Ok(bytes) = hex::decode(key) {
                    if let Ok(k) = <[u8; 32]>::try_from(bytes.as_slice()) {
                        published.push((user.clone(), PublishedKey { day: *day, key: k }));
                    }
                }
            }
            _ => {}
        }
    }

    // linkage through published keys
    let (mut linked_max, mut linked_total) = (0u32, 0u32);
    let last_day = day_of(h.horizon);
    for (user, pk) in &published {
        let Some(days) = broadcasts.get(user.as_str()) else {
            continue;
        };
        let mut run = 0u32;
        let mut prev: Option<u32> = None;
        for (day, ids) in pk.derive_through(last_day, h.params.dp3t_epochs_per_day) {
            let hexes: BTreeSet<String> = ids.iter().map(|e| hex::encode(e.0)).collect();
            let linked = days
                .get(&day)
                .is_some_and(|seen| seen.iter().any(|p| hexes.contains(*p)));
            if linked {
                linked_total += 1;
                run = if prev == Some(day.wrapping_sub(1)) { run + 1 } else { 1 };
                prev = Some(day);
                linked_max = linked_max.max(run);
            }
        }
    }

    let horizon = h.horizon.max(1) as f64;
    let cycles: Vec<f64> = h
        .users
        .iter()
        .map(|u| sensing.get(u.as_str()).copied().unwrap_or(0) as f64 / horizon)
        .collect();
    let duty_cycle_mean = if cycles.is_empty() {
        0.0
    } else {
        cycles.iter().sum::<f64>() / cycles.len() as f64
    };
    let duty_cycle_max = cycles.iter().copied().fold(0.0, f64::max);

    let moh_edges = moh.values().map(|(_, c)| c.len()).sum();
    let moh_edges_match_truth = (h.protocol == Protocol::TraceTogether && !moh.is_empty()).then(|| {
        moh.iter().all(|(rep, (time, contacts))| {
            *contacts == truth::contacts_before(records, rep, *time, h.channel.max_range)
        })
    });

    let adversary_secret_exposure = observations
        .get("adversary")
        .map(|c: &BTreeMap<InfoClass, u64>| {
            c.iter()
                .filter(|(k, _)| **k != InfoClass::EphId)
                .map(|(_, v)| *v)
                .sum()
        })
        .unwrap_or(0);

    Metrics {
        name: h.name,
        protocol: h.protocol,
        seed: h.seed,
        exposure_threshold: threshold,
        proximity_distance: distance,
        users: h.users.len(),
        infected: infections.len(),
        truth_on_premise: gt.on_premise.len(),
        truth_off_premise: gt.off_premise.len(),
        notified: flagged.len(),
        true_positives: tp,
        false_positives: flagged.len() - tp,
        missed_on_premise: gt.on_premise.len() - hit_on,
        missed_off_premise: gt.off_premise.len() - hit_off,
        recall_on_premise: ratio(hit_on, gt.on_premise.len()),
        recall_off_premise: ratio(hit_off, gt.off_premise.len()),
        precision: ratio(tp, flagged.len()),
        data_minimisation_violations: minimisation.len(),
        bystander_leaks,
        reports,
        anomalies,
        linkage_duplicates: contexts.values().filter(|c| c.len() > 1).count(),
        eavesdrop_cross_venue_matches: captured.values().filter(|p| p.len() > 1).count(),
        linked_days_max: linked_max,
        linked_days_total: linked_total,
        duty_cycle_mean,
        duty_cycle_max,
        moh_edges,
        moh_edges_match_truth,
        adversary_secret_exposure,
        observations,
        at_risk: flagged.into_iter().collect(),
    }
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// At-risk pairs present here but not in `baseline`.
    pub fn additional_at_risk(&self, baseline: &Metrics) -> Vec<(String, String)> {
        let base: BTreeSet<_> = baseline.at_risk.iter().collect();
        self.at_risk
            .iter()
            .filter(|p| !base.contains(p))
            .cloned()
            .collect()
    }
}
