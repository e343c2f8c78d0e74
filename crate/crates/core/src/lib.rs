//! Open-roster multi-agent runtime.
//!
//! A team is a directory of agent scaffolds plus a shared constitution
//! ([`scaffold`]). An episode recruits agents from that pool and runs them
//! against a model backend ([`gateway`]) while every message, tool call and
//! model call is appended to a totally ordered bus ([`runtime`]). Finished
//! episodes are frozen into experiences ([`trace`]), which feed failure
//! attribution ([`attribution`]) and the three-level scaffold evolution loop
//! ([`evolution`]).

pub mod attribution;
pub mod clock;
pub mod config;
pub mod evaluator;
pub mod evolution;
pub mod gateway;
pub mod runtime;
pub mod scaffold;
pub mod trace;

pub use clock::{Clock, FakeClock, SystemClock};
pub use evaluator::{Evaluator, Score};
pub use gateway::{Cost, ModelGateway};
pub use scaffold::TeamScaffold;
pub use trace::Experience;
