//! Traffic-signal control test-bed.
//!
//! A small microscopic simulator drives signalized road networks. Signals are
//! run by fixed-time, gap-actuated or independent Q-learning controllers, and
//! agents can observe either exact lane counts or counts corrupted by a
//! camera-style noise profile.

pub mod control;
pub mod error;
pub mod experiment;
pub mod io;
pub mod marl;
pub mod metrics;
pub mod microsim;
pub mod network;
pub mod perception;
pub mod rewards;
pub mod scenario;
pub mod signal;

pub use error::{Error, Result};
