//! Slot-stepped simulation toolkit for QoS control over self-similar and
//! multifractal traffic.
//!
//! The crate is layered bottom-up:
//!
//! * [`traffic`] synthesizes fGn and cascade-modulated packet-count traces and
//!   injects labelled volumetric attacks.
//! * [`analysis`] estimates the traffic characterization `(λ, H, σ_var, Δh)`.
//! * [`detection`] turns a trace into a confusion-matrix [`SecurityProfile`].
//! * [`queue`] is the finite-buffer strict-priority node queue.
//! * [`control`] calibrates the buffer/capacity dependencies and applies the
//!   security-gated allocation policy.
//! * [`routing`] keeps path costs, recalculates them from traffic fractality
//!   and routes flows under loss and delay bounds.
//! * [`engine`] wires everything into a deterministic experiment.

pub mod analysis;
pub mod control;
pub mod detection;
pub mod engine;
pub mod error;
pub mod queue;
pub mod routing;
pub(crate) mod stats;
pub mod traffic;

pub use analysis::{FlowProfile, MomentScaling};
pub use control::{CalibrationTable, ControlDecision};
pub use error::{Error, Result};
pub use queue::{NodeState, QosClass};
pub use routing::NetworkGraph;
pub use detection::{DetectorConfig, SecurityProfile};
pub use engine::{MethodMode, ScenarioConfig, SimReport};
pub use traffic::{AttackSpec, TraceSpec, TrafficTrace};

/// Fixed packet size used for byte-denominated reporting.
pub const PACKET_SIZE_BYTES: u64 = 1500;
