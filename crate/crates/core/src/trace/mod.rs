//! Whole-program-path call traces.
//!
//! A [`Trace`] is an ordered stream of [`TraceEvent`]s. Raw traces straight
//! from the executor hold `Call` and loop events only; later stages add
//! chains, path codes and augmentation markers.

pub mod exec;
pub mod format;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{FuncId, LoopId};

pub use exec::{execute, execute_with_sites, Decider, DecisionScript, ExecError, Limits};
pub use format::{read_trace, read_trace_bytes, write_trace, write_trace_bytes, Magic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceEvent {
    Call(FuncId),
    LoopEnter(LoopId),
    LoopExit(LoopId),
    ChainBegin { priority: u32, repeat: u64 },
    ChainEnd,
    AugBegin,
    AugEnd,
    PathCode(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub program_id: String,
    pub input_id: String,
    pub events: Vec<TraceEvent>,
    /// Logical number of calls, as if every chain and code were expanded.
    pub token_count: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("nesting error at event {index}: {reason}")]
pub struct NestingError {
    pub index: usize,
    pub reason: String,
}

impl Trace {
    pub fn new(program_id: impl Into<String>, input_id: impl Into<String>, events: Vec<TraceEvent>) -> Self {
        let token_count = events.iter().filter(|e| matches!(e, TraceEvent::Call(_))).count() as u64;
        Self {
            program_id: program_id.into(),
            input_id: input_id.into(),
            events,
            token_count,
        }
    }

    /// The `Call` tokens in order, ignoring every other event.
    pub fn calls(&self) -> Vec<FuncId> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Call(f) => Some(*f),
                _ => None,
            })
            .collect()
    }

    pub fn check_nesting(&self) -> Result<(), NestingError> {
        check_nesting(&self.events)
    }
}

/// Loops nest with each other; chains and augmentation groups are flat and
/// hold only calls and path codes.
pub fn check_nesting(events: &[TraceEvent]) -> Result<(), NestingError> {
    let err = |index, reason: &str| {
        Err(NestingError {
            index,
            reason: reason.to_string(),
        })
    };
    let mut loops: Vec<LoopId> = Vec::new();
    let mut in_chain = false;
    let mut chain_len = 0usize;
    let mut in_aug = false;
    for (i, e) in events.iter().enumerate() {
        match *e {
            TraceEvent::Call(_) | TraceEvent::PathCode(_) => chain_len += 1,
            TraceEvent::LoopEnter(l) => {
                if in_chain || in_aug {
                    return err(i, "loop event inside a chain or augmentation group");
                }
                loops.push(l);
            }
            TraceEvent::LoopExit(l) => {
                if in_chain || in_aug {
                    return err(i, "loop event inside a chain or augmentation group");
                }
                match loops.pop() {
                    Some(open) if open == l => {}
                    Some(_) => return err(i, "loop exit does not match the innermost loop"),
                    None => return err(i, "loop exit without loop enter"),
                }
            }
            TraceEvent::ChainBegin { priority, repeat } => {
                if in_chain {
                    return err(i, "nested chain");
                }
                if priority == 0 || repeat == 0 {
                    return err(i, "chain priority and repeat must be positive");
                }
                in_chain = true;
                chain_len = 0;
            }
            TraceEvent::ChainEnd => {
                if !in_chain {
                    return err(i, "chain end without chain begin");
                }
                if chain_len == 0 {
                    return err(i, "empty chain");
                }
                in_chain = false;
            }
            TraceEvent::AugBegin => {
                if in_aug || in_chain {
                    return err(i, "augmentation group opened inside another group");
                }
                in_aug = true;
            }
            TraceEvent::AugEnd => {
                if !in_aug || in_chain {
                    return err(i, "augmentation end without matching begin");
                }
                in_aug = false;
            }
        }
    }
    if in_chain || in_aug || !loops.is_empty() {
        return err(events.len(), "unclosed group at end of trace");
    }
    Ok(())
}

/// Distinct call tokens over the logical token count.
///
/// Counts `Call` events only, so it is meant for raw (or compacted, but not
/// code-applied) traces. Returns `None` when the trace has no calls.
pub fn unique_token_fraction(t: &Trace) -> Option<f64> {
    if t.token_count == 0 {
        return None;
    }
    let distinct: BTreeSet<FuncId> = t.calls().into_iter().collect();
    Some(distinct.len() as f64 / t.token_count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use TraceEvent::*;

    #[test]
    fn fractions() {
        let t = Trace::new("p", "i", (0..5).map(Call).collect());
        assert_eq!(unique_token_fraction(&t), Some(1.0));
        let t = Trace::new("p", "i", vec![Call(3); 8]);
        assert_eq!(unique_token_fraction(&t), Some(1.0 / 8.0));
        assert_eq!(unique_token_fraction(&Trace::new("p", "i", vec![])), None);
    }

    #[test]
    fn nesting_rules() {
        assert!(check_nesting(&[LoopEnter(1), LoopEnter(2), LoopExit(2), LoopExit(1)]).is_ok());
        assert!(check_nesting(&[LoopEnter(1), LoopExit(2)]).is_err());
        assert!(check_nesting(&[ChainEnd]).is_err());
        assert!(check_nesting(&[ChainBegin { priority: 1, repeat: 2 }, ChainEnd]).is_err());
        assert!(check_nesting(&[ChainBegin { priority: 1, repeat: 2 }, Call(1), ChainEnd]).is_ok());
        assert!(check_nesting(&[AugBegin, Call(1)]).is_err());
        assert!(check_nesting(&[AugBegin, PathCode(1001), AugEnd]).is_ok());
    }
}
