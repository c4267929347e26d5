//! Online compaction of calls made while loops are active.
//!
//! Calls issued while at least one loop is live are buffered. The buffer is
//! compacted in windows: each round finds the longest sequence that repeats
//! at non-overlapping positions, reduces it to its smallest period and turns
//! every back-to-back run of that root into a chain record carrying a repeat
//! count. Remaining calls stay in place as plain calls. Chain records are
//! written as `ChainBegin{priority, repeat}` + body + `ChainEnd`, so the
//! output reads left to right with no position bookkeeping.

use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

use crate::ir::FuncId;
use crate::trace::{Trace, TraceEvent};

pub const DEFAULT_WINDOW: usize = 256;
const MEMO_CAP: usize = 4096;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompactError {
    #[error("loop nesting error at event {0}")]
    Nesting(usize),
    #[error("event {0} is not valid in a raw trace")]
    NotRaw(usize),
    #[error("malformed chain at event {0}")]
    Format(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactChain {
    pub priority: u32,
    pub body: Vec<FuncId>,
    pub repeat: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Chain(CompactChain),
    Residual(FuncId),
}

/// A repeated sequence with its greedy non-overlapping occurrences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Repeat {
    pub body: Vec<FuncId>,
    pub repeat: usize,
    pub positions: Vec<usize>,
}

/// Leftmost-first non-overlapping occurrences of `pat` in `s`.
fn greedy_occurrences(s: &[i64], pat: &[i64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + pat.len() <= s.len() {
        if &s[i..i + pat.len()] == pat {
            out.push(i);
            i += pat.len();
        } else {
            i += 1;
        }
    }
    out
}

/// Core search on a buffer where negative values are unique separators.
fn longest_repeat_i64(s: &[i64]) -> Option<(Vec<i64>, Vec<usize>)> {
    let n = s.len();
    if n < 2 {
        return None;
    }
    // lcp of suffixes i and j (j > i), one row at a time from the back; the
    // usable length of a pair is capped at j - i to stay non-overlapping.
    let mut next = vec![0u32; n + 1];
    let mut cur = vec![0u32; n + 1];
    let mut best = 0usize;
    for i in (0..n).rev() {
        let si = s[i];
        for j in (i + 1..n).rev() {
            let v = if s[j] == si { next[j + 1] + 1 } else { 0 };
            cur[j] = v;
            let usable = (v as usize).min(j - i);
            if usable > best {
                best = usable;
            }
        }
        std::mem::swap(&mut next, &mut cur);
    }
    if best == 0 {
        return None;
    }

    // Every window of length `best` free of separators, grouped by content.
    let mut groups: HashMap<&[i64], usize> = HashMap::new();
    let mut order: Vec<(&[i64], usize)> = Vec::new();
    for i in 0..=n - best {
        let w = &s[i..i + best];
        if w.iter().any(|&x| x < 0) {
            continue;
        }
        groups.entry(w).or_insert_with(|| {
            order.push((w, i));
            i
        });
    }
    let mut pick: Option<(Vec<usize>, &[i64])> = None;
    for (w, _) in order {
        let occ = greedy_occurrences(s, w);
        if occ.len() < 2 {
            continue;
        }
        let better = match &pick {
            None => true,
            Some((p, _)) => occ.len() > p.len() || (occ.len() == p.len() && occ[0] < p[0]),
        };
        if better {
            pick = Some((occ, w));
        }
    }
    pick.map(|(occ, w)| (w.to_vec(), occ))
}

/// The longest sequence occurring at least twice without overlap. Ties go
/// to more occurrences, then to the earliest first occurrence.
pub fn longest_repeating_chain(buf: &[FuncId]) -> Option<Repeat> {
    let s: Vec<i64> = buf.iter().map(|&x| x as i64).collect();
    longest_repeat_i64(&s).map(|(body, positions)| Repeat {
        body: body.into_iter().map(|x| x as FuncId).collect(),
        repeat: positions.len(),
        positions,
    })
}

/// The smallest period of `s` when `s` spans at least two full periods,
/// otherwise `s` itself. `abcabca` gives `abc`.
pub fn periodic_root<T: PartialEq>(s: &[T]) -> &[T] {
    let n = s.len();
    for p in 1..=n / 2 {
        if (p..n).all(|i| s[i] == s[i - p]) {
            return &s[..p];
        }
    }
    s
}

/// Compacts one buffer into chains and residual calls, in buffer order.
pub fn compact_buffer(buf: &[FuncId]) -> Vec<Piece> {
    let n = buf.len();
    let mut seg: Vec<i64> = buf.iter().map(|&x| x as i64).collect();
    let mut sentinel = -1i64;
    let mut starts: Vec<Option<CompactChain>> = vec![None; n];
    let mut covered = vec![false; n];
    let mut round = 0u32;
    let mut blank = |seg: &mut Vec<i64>, from: usize, len: usize| {
        for x in &mut seg[from..from + len] {
            *x = sentinel;
            sentinel -= 1;
        }
    };
    while let Some((body, occ)) = longest_repeat_i64(&seg) {
        let root = periodic_root(&body).to_vec();
        let l = root.len();
        let mut runs = Vec::new();
        let mut p = 0;
        while p + l <= n {
            let mut k = 0;
            while p + (k + 1) * l <= n && seg[p + k * l..p + (k + 1) * l] == root[..] {
                k += 1;
            }
            if k >= 2 {
                runs.push((p, k));
                p += k * l;
            } else {
                p += 1;
            }
        }
        if runs.is_empty() {
            // Repeats, but never back to back: keep those calls as they are.
            for &o in &occ {
                blank(&mut seg, o, body.len());
            }
            continue;
        }
        round += 1;
        for (p, k) in runs {
            starts[p] = Some(CompactChain {
                priority: round,
                body: root.iter().map(|&x| x as FuncId).collect(),
                repeat: k as u64,
            });
            covered[p..p + k * l].iter_mut().for_each(|c| *c = true);
            blank(&mut seg, p, k * l);
        }
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if let Some(c) = starts[i].take() {
            i += c.body.len() * c.repeat as usize;
            out.push(Piece::Chain(c));
        } else {
            debug_assert!(!covered[i]);
            out.push(Piece::Residual(buf[i]));
            i += 1;
        }
    }
    out
}

pub fn expand_pieces(pieces: &[Piece]) -> Vec<FuncId> {
    let mut out = Vec::new();
    for p in pieces {
        match p {
            Piece::Residual(t) => out.push(*t),
            Piece::Chain(c) => {
                for _ in 0..c.repeat {
                    out.extend_from_slice(&c.body);
                }
            }
        }
    }
    out
}

/// Streaming compactor state.
struct Compactor {
    window: usize,
    pending: Vec<FuncId>,
    out: Vec<TraceEvent>,
    next_priority: u32,
    memo: HashMap<Vec<FuncId>, Rc<Vec<Piece>>>,
}

impl Compactor {
    fn compact(&mut self, buf: &[FuncId]) -> Rc<Vec<Piece>> {
        if let Some(hit) = self.memo.get(buf) {
            return hit.clone();
        }
        let r = Rc::new(compact_buffer(buf));
        if self.memo.len() >= MEMO_CAP {
            self.memo.clear();
        }
        self.memo.insert(buf.to_vec(), r.clone());
        r
    }

    fn emit(&mut self, pieces: &[Piece]) {
        // Priorities are local to a buffer; shift them past everything
        // already emitted.
        let base = self.next_priority;
        let mut top = 0;
        for p in pieces {
            match p {
                Piece::Residual(t) => self.out.push(TraceEvent::Call(*t)),
                Piece::Chain(c) => {
                    if self.try_merge(c) {
                        continue;
                    }
                    top = top.max(c.priority);
                    self.out.push(TraceEvent::ChainBegin {
                        priority: base + c.priority,
                        repeat: c.repeat,
                    });
                    self.out.extend(c.body.iter().map(|&t| TraceEvent::Call(t)));
                    self.out.push(TraceEvent::ChainEnd);
                }
            }
        }
        self.next_priority = base + top;
    }

    /// Folds `c` into an immediately preceding chain with the same body.
    fn try_merge(&mut self, c: &CompactChain) -> bool {
        let l = c.body.len();
        let n = self.out.len();
        if n < l + 2 || self.out[n - 1] != TraceEvent::ChainEnd {
            return false;
        }
        let begin = n - l - 2;
        let TraceEvent::ChainBegin { repeat, .. } = self.out[begin] else {
            return false;
        };
        let same = self.out[begin + 1..n - 1]
            .iter()
            .zip(&c.body)
            .all(|(e, &t)| *e == TraceEvent::Call(t));
        if !same {
            return false;
        }
        if let TraceEvent::ChainBegin { repeat: r, .. } = &mut self.out[begin] {
            *r = repeat + c.repeat;
        }
        true
    }

    /// Compacts full windows while the loop phase continues; with `last`
    /// set, drains everything.
    fn drain(&mut self, last: bool) {
        while self.pending.len() >= self.window || (last && !self.pending.is_empty()) {
            let take = self.pending.len().min(self.window);
            let buf: Vec<FuncId> = self.pending.drain(..take).collect();
            let pieces = self.compact(&buf);
            // Calls after the window's last chain may start a run that
            // continues in the next window; hand them over unless this is the
            // final window or they make up most of it.
            let tail = pieces
                .iter()
                .rev()
                .take_while(|p| matches!(p, Piece::Residual(_)))
                .count();
            let carry = !last_window(last, &self.pending) && tail < pieces.len() && tail <= self.window / 4;
            if carry && tail > 0 {
                let keep = pieces.len() - tail;
                self.emit(&pieces[..keep]);
                let tail_calls: Vec<FuncId> = buf[buf.len() - tail..].to_vec();
                self.pending.splice(0..0, tail_calls);
            } else {
                self.emit(&pieces);
            }
        }
    }
}

fn last_window(last: bool, rest: &[FuncId]) -> bool {
    last && rest.is_empty()
}

/// Compacts `t` with the default window.
pub fn compact_stream(t: &Trace) -> Result<Trace, CompactError> {
    compact_stream_with(t, DEFAULT_WINDOW)
}

/// Loop events are consumed; calls outside any loop pass through untouched.
pub fn compact_stream_with(t: &Trace, window: usize) -> Result<Trace, CompactError> {
    assert!(window >= 2, "window must hold at least two calls");
    let mut c = Compactor {
        window,
        pending: Vec::new(),
        out: Vec::new(),
        next_priority: 0,
        memo: HashMap::new(),
    };
    let mut open: Vec<u32> = Vec::new();
    for (i, e) in t.events.iter().enumerate() {
        match *e {
            TraceEvent::Call(f) => {
                if open.is_empty() {
                    c.out.push(TraceEvent::Call(f));
                } else {
                    c.pending.push(f);
                    if c.pending.len() >= 2 * window {
                        c.drain(false);
                    }
                }
            }
            TraceEvent::LoopEnter(l) => open.push(l),
            TraceEvent::LoopExit(l) => {
                if open.pop() != Some(l) {
                    return Err(CompactError::Nesting(i));
                }
                if open.is_empty() {
                    c.drain(true);
                }
            }
            _ => return Err(CompactError::NotRaw(i)),
        }
    }
    if !open.is_empty() {
        return Err(CompactError::Nesting(t.events.len()));
    }
    Ok(Trace {
        program_id: t.program_id.clone(),
        input_id: t.input_id.clone(),
        events: c.out,
        token_count: t.token_count,
    })
}

/// Replaces every chain by its body repeated. Other events pass through.
pub fn expand(t: &Trace) -> Result<Trace, CompactError> {
    let mut out = Vec::with_capacity(t.token_count as usize);
    let mut i = 0;
    let ev = &t.events;
    while i < ev.len() {
        match ev[i] {
            TraceEvent::ChainBegin { repeat, .. } => {
                let end = ev[i + 1..]
                    .iter()
                    .position(|e| *e == TraceEvent::ChainEnd)
                    .map(|p| i + 1 + p)
                    .ok_or(CompactError::Format(i))?;
                let body = &ev[i + 1..end];
                if body.is_empty() || body.iter().any(|e| !matches!(e, TraceEvent::Call(_) | TraceEvent::PathCode(_))) {
                    return Err(CompactError::Format(i));
                }
                for _ in 0..repeat {
                    out.extend_from_slice(body);
                }
                i = end + 1;
            }
            TraceEvent::ChainEnd => return Err(CompactError::Format(i)),
            e => {
                out.push(e);
                i += 1;
            }
        }
    }
    Ok(Trace {
        program_id: t.program_id.clone(),
        input_id: t.input_id.clone(),
        events: out,
        token_count: t.token_count,
    })
}
