//! Plan/focus structured decoding with soft attention gating on a seeded toy
//! transformer, and attention-trace analytics that also accept traces
//! recorded elsewhere.

pub mod analytics;
pub mod controller;
pub mod format;
pub mod gating;
pub mod layout;
pub mod model;
pub mod prompt;
pub mod run;
pub mod synthetic;
pub mod trace;
pub mod trace_io;
