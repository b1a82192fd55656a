// SPDX-License-Identifier: Apache-2.0

//! Discrete-event simulation of venue check-in and two broadcast-based
//! baselines over a shared scripted scenario.

pub mod channel;
pub mod engine;
pub mod gen;
pub mod metrics;
pub mod scenario;
pub mod trace;
pub mod truth;

pub use channel::ChannelModel;
pub use engine::{run, run_protocol, SimError};
pub use metrics::{collect_metrics, MetricFlags, Metrics};
pub use scenario::{validate, Diagnostic, Protocol, Scenario, SimParams};
pub use trace::{SimulationTrace, TraceError, TraceRecord};
