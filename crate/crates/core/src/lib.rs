//! Deterministic discrete-event simulator of an energy community that
//! negotiates self-consumption schedules over a gossip overlay, suffers a
//! false-data-injection attack, and is defended by configurable observer and
//! controller architectures.

pub mod attack;
pub mod controller;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod negotiation;
pub mod observer;
pub mod plot;
pub mod rng;
pub mod sim;
pub mod topology;

pub use error::{Error, Result};
