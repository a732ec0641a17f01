//! Detection engine for multi-stage intrusion campaigns in industrial IoT
//! networks. Five stage detectors (command-and-control beaconing, network
//! discovery, lateral movement, fieldbus scanning, control-element
//! communication spoofing) feed a correlation engine that emits a campaign
//! graph, plus a deterministic scenario generator used as the test oracle.

pub mod asdc;
pub mod cnc;
pub mod features;
pub mod ingest;
pub mod ml;
pub mod model;
pub mod scenario;
pub mod stages;
