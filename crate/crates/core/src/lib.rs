// SPDX-License-Identifier: Apache-2.0

//! Venue-based automated contact tracing.
//!
//! Users broadcast ephemeral identifiers only while inside enrolled venues.
//! Identifiers are derived per venue and per time window, venues sign leave
//! receipts that act as presence proofs, and a back-end server publishes an
//! infected user's identifiers only to visitors who can prove they were at
//! the same venue. Two well-known baselines (a centralised temporary-id
//! scheme and the low-cost decentralised daily-key scheme) are included for
//! comparison.

pub mod actors;
pub mod baseline;
pub mod bloom;
pub mod crypto;
pub mod schedule;
pub mod wire;

pub use crypto::Digest;
pub use schedule::{EphemeralId, SchedulingParams};
