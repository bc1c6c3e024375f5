//! Workflow gateway core: model, XML wire format, validation rules, edit
//! sessions, a file-backed store and a local executor.

pub mod batch;
pub mod executor;
pub mod model;
pub mod session;
pub mod store;
pub mod synth;
pub mod validation;
pub mod wire;
mod xml;
