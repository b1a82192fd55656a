// SPDX-License-Identifier: Apache-2.0

//! Per-actor logs of which classes of information an actor has been handed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoClass {
    TrueId,
    RidValue,
    RidOpening,
    Nonce,
    NonceOpening,
    EphId,
    EphIdDigest,
    WindowKey,
    LeaveTime,
    ArrivalTime,
    VenueId,
    DailyKey,
    PhoneNumber,
    Pseudonym,
    ContactEdge,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationLog(BTreeMap<InfoClass, u64>);

impl ObservationLog {
    pub fn saw(&mut self, class: InfoClass, count: u64) {
        if count > 0 {
            *self.0.entry(class).or_default() += count;
        }
    }

    pub fn count(&self, class: InfoClass) -> u64 {
        self.0.get(&class).copied().unwrap_or(0)
    }

    pub fn has_seen(&self, class: InfoClass) -> bool {
        self.count(class) > 0
    }

    pub fn classes(&self) -> impl Iterator<Item = (InfoClass, u64)> + '_ {
        self.0.iter().map(|(c, n)| (*c, *n))
    }

    pub fn merge(&mut self, other: &ObservationLog) {
        for (c, n) in other.classes() {
            self.saw(c, n);
        }
    }
}
