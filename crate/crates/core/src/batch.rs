//! Bulk digest, validation and round-trip checks over many workflows.
//!
//! With the `parallel` feature (on by default) [`Exec::Parallel`] spreads the
//! work over the rayon pool; without it every call runs sequentially.

use crate::model::ConcreteWorkflow;
use crate::validation::{self, Finding, Mode};
use crate::wire::{self, StateDigest, WireError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

fn map<T, R, F>(items: &[T], exec: Exec, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

pub fn digest_all(workflows: &[ConcreteWorkflow], exec: Exec) -> Vec<Result<StateDigest, WireError>> {
    map(workflows, exec, wire::digest)
}

pub fn validate_all(workflows: &[ConcreteWorkflow], mode: Mode, exec: Exec) -> Vec<Vec<Finding>> {
    map(workflows, exec, |w| validation::validate(w, mode))
}

/// Outcome of serializing, re-serializing and parsing one workflow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundTrip {
    /// Two serializations of the same value were byte-identical.
    pub deterministic: bool,
    /// Parsing the serialization gave back an equal value.
    pub identical: bool,
    pub bytes: usize,
}

impl RoundTrip {
    pub fn ok(&self) -> bool {
        self.deterministic && self.identical
    }
}

pub fn round_trip(w: &ConcreteWorkflow) -> Result<RoundTrip, WireError> {
    let first = wire::serialize(w)?;
    let second = wire::serialize(w)?;
    let back = wire::parse(&first)?;
    Ok(RoundTrip {
        deterministic: first == second,
        identical: back == *w,
        bytes: first.len(),
    })
}

pub fn round_trip_all(workflows: &[ConcreteWorkflow], exec: Exec) -> Vec<Result<RoundTrip, WireError>> {
    map(workflows, exec, round_trip)
}
