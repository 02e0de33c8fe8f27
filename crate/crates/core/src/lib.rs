//! IBFT 2.0 consensus: the per-height block finalisation state machine,
//! node-level chain management and sync, and a seeded discrete-event network
//! simulator with Byzantine fault injection and property checkers.

pub mod analysis;
pub mod chain;
pub mod crypto;
pub mod instance;
pub mod messages;
pub mod node;
pub mod parallel;
pub mod proposer;
pub mod scenario;
pub mod simnet;
pub mod voting;
