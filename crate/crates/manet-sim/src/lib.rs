//! Deterministic packet-level simulator for mobile ad-hoc networks,
//! comparing a congestion-aware weight-metric routing protocol against a
//! hop-count multipath baseline under random-waypoint mobility and a
//! simplified 802.11 DCF MAC.

pub mod engine;
pub mod experiment;
pub mod mac;
pub mod metrics;
pub mod routing;
pub mod sim;
pub mod trace;
pub mod world;
