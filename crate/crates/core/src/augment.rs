//! Coverage augmentation: every function the profile never called is
//! appended as a short call-graph chain between `AugBegin`/`AugEnd` markers.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::ir::{FuncId, ProgramGraph};
use crate::region::{apply_codebook, PathCodebook, RegionError};
use crate::seqmodel::Token;
use crate::trace::{NestingError, Trace, TraceEvent};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Nesting(#[from] NestingError),
    #[error("augmentation group is not at the end of the profile (event {0})")]
    Misplaced(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnifiedProfile {
    /// Codebook-applied compacted trace.
    pub base: Trace,
    /// Encoded chains, without their markers.
    pub augmented_chains: Vec<Vec<TraceEvent>>,
}

impl UnifiedProfile {
    /// The flattened event stream: base events followed by each chain in
    /// `AugBegin`/`AugEnd` markers.
    pub fn events(&self) -> Vec<TraceEvent> {
        let mut ev = self.base.events.clone();
        for c in &self.augmented_chains {
            ev.push(TraceEvent::AugBegin);
            ev.extend_from_slice(c);
            ev.push(TraceEvent::AugEnd);
        }
        ev
    }

    pub fn to_trace(&self) -> Trace {
        Trace {
            events: self.events(),
            ..self.base.clone()
        }
    }

    /// Splits a flattened stream back into base and chains.
    pub fn from_trace(t: &Trace) -> Result<Self, AugmentError> {
        t.check_nesting()?;
        let split = t
            .events
            .iter()
            .position(|e| *e == TraceEvent::AugBegin)
            .unwrap_or(t.events.len());
        let mut chains = Vec::new();
        let mut cur: Option<Vec<TraceEvent>> = None;
        for (i, &e) in t.events.iter().enumerate().skip(split) {
            match (e, cur.as_mut()) {
                (TraceEvent::AugBegin, None) => cur = Some(vec![]),
                (TraceEvent::AugEnd, Some(_)) => chains.push(cur.take().unwrap()),
                (e, Some(c)) => c.push(e),
                (_, None) => return Err(AugmentError::Misplaced(i)),
            }
        }
        Ok(Self {
            base: Trace {
                events: t.events[..split].to_vec(),
                ..t.clone()
            },
            augmented_chains: chains,
        })
    }

    /// Every token of the flattened stream plus both markers.
    pub fn vocabulary(&self) -> BTreeSet<Token> {
        let mut v: BTreeSet<Token> = self.events().into_iter().map(Token::from).collect();
        v.insert(Token::AugBegin);
        v.insert(Token::AugEnd);
        v
    }
}

/// Functions called anywhere in `events`, looking through path codes.
pub fn observed_functions(cb: &PathCodebook, events: &[TraceEvent]) -> Result<BTreeSet<FuncId>, RegionError> {
    let mut seen = BTreeSet::new();
    for e in events {
        match e {
            TraceEvent::Call(f) => {
                seen.insert(*f);
            }
            TraceEvent::PathCode(c) => seen.extend(cb.body(*c).ok_or(RegionError::UnknownCode(*c))?),
            _ => {}
        }
    }
    Ok(seen)
}

/// Preorder walk from `root` through not-yet-seen callees in ascending id
/// order. The walk stops entirely at the first edge into a seen function.
fn chain_from(callees: &[Vec<FuncId>], root: FuncId, seen: &BTreeSet<FuncId>) -> Vec<FuncId> {
    fn visit(callees: &[Vec<FuncId>], f: FuncId, seen: &BTreeSet<FuncId>, out: &mut Vec<FuncId>) -> bool {
        out.push(f);
        for &c in &callees[f as usize] {
            if seen.contains(&c) {
                return true;
            }
            if !out.contains(&c) && visit(callees, c, seen, out) {
                return true;
            }
        }
        false
    }
    let mut out = Vec::new();
    visit(callees, root, seen, &mut out);
    out
}

pub fn augment(g: &ProgramGraph, cb: &PathCodebook, t: &Trace) -> Result<UnifiedProfile, AugmentError> {
    augment_profile(
        g,
        cb,
        UnifiedProfile {
            base: t.clone(),
            augmented_chains: vec![],
        },
    )
}

/// Adds chains for whatever `p` (base and existing chains) does not cover.
/// Applying it to its own output adds nothing.
pub fn augment_profile(g: &ProgramGraph, cb: &PathCodebook, mut p: UnifiedProfile) -> Result<UnifiedProfile, AugmentError> {
    p.base.check_nesting()?;
    let mut seen = observed_functions(cb, &p.events())?;
    let callees = g.callees();
    let mut raw_chains: Vec<Vec<FuncId>> = Vec::new();
    for f in &g.functions {
        if seen.contains(&f.id) {
            continue;
        }
        let chain = chain_from(&callees, f.id, &seen);
        let redundant = raw_chains
            .iter()
            .any(|c| c[0] == chain[0] && c.starts_with(&chain));
        seen.extend(chain.iter().copied());
        if !redundant {
            raw_chains.push(chain);
        }
    }
    for chain in raw_chains {
        let calls = Trace {
            events: chain.into_iter().map(TraceEvent::Call).collect(),
            ..p.base.clone()
        };
        p.augmented_chains.push(apply_codebook(cb, &calls)?.events);
    }
    Ok(p)
}
