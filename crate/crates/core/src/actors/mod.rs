// SPDX-License-Identifier: Apache-2.0

//! The five roles of the venue protocol. Each actor is a single-threaded
//! state machine; actors only interact through the message values in
//! [`messages`].

pub mod authority;
pub mod backend;
pub mod messages;
pub mod observe;
pub mod user;
pub mod venue;

use thiserror::Error;

pub use authority::{testcenter_certify, HealthAuthority, TestCenter, HA_ID};
pub use backend::{backend_answer_trace, BackendConfig, BackendServer, TimePolicy};
pub use messages::{
    BackendRecord, CertificateRequest, ContagiousPeriod, DepartureMessage, InfectionCertificate,
    LeaveReceipt, RejectionCode, ReportBundle, TraceQuery, VenueNotice,
};
pub use observe::{InfoClass, ObservationLog};
pub use user::{
    default_proximity_dbm, evaluate_risk, score_evidence, EntryOutcome, EpochEvidence,
    EpochRecord, Hearing, RiskPolicy, RiskScore, UserApp, Visit,
};
pub use venue::{Anomaly, AnomalyKind, AnomalyPolicy, EmitterId, Venue, VenueConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("already in a session at venue {0}")]
    AlreadyInSession(String),
    #[error("no active sensing session")]
    NotSensing,
    #[error("leave receipt failed verification")]
    InvalidReceipt,
    #[error("claimed departure time {claimed} disagrees with venue clock {venue_clock}")]
    ClockSkew { claimed: i64, venue_clock: i64 },
    #[error("arrival time required by venue but missing or after departure")]
    MissingArrivalTime,
    #[error("commitment opening rejected")]
    OpeningRejected,
    #[error("infection certificate failed verification")]
    InvalidCertificate,
}
