// SPDX-License-Identifier: Apache-2.0

//! Reference protocols for comparison: the centralised temporary-id scheme
//! and the low-cost decentralised daily-key scheme.

pub mod dp3t;
pub mod tracetogether;

pub use dp3t::{Dp3tBackend, Dp3tMatch, Dp3tUser, HeardAggregate, PublishedKey};
pub use tracetogether::{ContactTriple, MohServer, Pseudonym, TempId, TtContact, TtTraceResult, TtUser};

use crate::actors::RiskPolicy;

/// Duration-weighted rule shared by both baselines: at risk when the time
/// heard at or above the proximity threshold reaches the exposure threshold.
pub fn duration_at_risk<I>(hearings: I, policy: &RiskPolicy) -> (u64, bool)
where
    I: IntoIterator<Item = (f64, u64)>,
{
    let close: u64 = hearings
        .into_iter()
        .filter(|(signal, _)| *signal >= policy.proximity_threshold_dbm)
        .map(|(_, d)| d)
        .sum();
    (close, close > 0 && close >= policy.exposure_threshold)
}
