//! Scale-free synchronization of identical discrete-time agents over
//! rooted directed networks with unknown integer communication delays.
//!
//! * [`plant`] turns an agent model `(A, B, C)` and a constant reference into
//!   a protocol (regulator solution, precompensator, compensated model, gains).
//! * [`graph`] holds the topology, root set and delays.
//! * [`sim`] runs the closed loop with per-channel delay lines.
//! * [`verify`] scans the frequency-domain stability conditions.

pub mod exec;
pub mod fixtures;
pub mod graph;
pub mod matjson;
pub mod numerics;
pub mod plant;
pub mod sim;
pub mod verify;

pub use exec::Execution;
