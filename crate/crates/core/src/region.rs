//! Input-independent path codes.
//!
//! The codebook is derived from the program alone. Inside each function the
//! call sites form a small "next site" graph (paths between consecutive
//! sites, stopping at loop headers and loop exits). Two sites are linked when
//! each is the other's only neighbour and both hang off the same branch
//! target; a linked run of sites always executes as a unit. Runs are extended
//! through callees whose own sites form one linked run from entry to exit,
//! which is what lets a code span several functions. Every run of two or
//! more tokens becomes a code.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{
    control_dependence, post_dominators, recursion_closure, BlockId, DepKey, FuncId, FunctionDef, FunctionIndex,
    ProgramGraph, SiteId,
};
use crate::trace::{Trace, TraceEvent};

/// Distance between the largest function id and the first code.
pub const CODE_OFFSET: u32 = 1000;
/// Longest body a code may stand for.
pub const MAX_BODY: usize = 64;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("codebook was derived for program {codebook}, trace belongs to {trace}")]
    ProgramMismatch { codebook: String, trace: String },
    #[error("unknown path code {0}")]
    UnknownCode(u32),
    #[error("codebook json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid codebook: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeEntry {
    pub code: u32,
    pub body: Vec<FuncId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathCodebook {
    pub program_id: String,
    pub code_base: u32,
    pub entries: Vec<CodeEntry>,
}

/// A run of linked call sites starting at `site` in `func`. Whenever that
/// site executes, the trace continues with exactly `body`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteRun {
    pub func: FuncId,
    pub site: SiteId,
    pub body: Vec<FuncId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Node {
    Start,
    End,
    Boundary,
    Site(usize),
}

/// Linked-successor table for one function.
struct Local {
    start_succ: BTreeSet<Node>,
    start_next: Option<Node>,
    /// Per call-site index.
    next: Vec<Option<Node>>,
}

fn is_boundary(ix: &FunctionIndex, b: BlockId) -> bool {
    ix.loop_headed_by(b).is_some() || ix.is_loop_exit(b)
}

/// First nodes reached on entering `b` (its own sites count).
fn reach(f: &FunctionDef, ix: &FunctionIndex, b: BlockId, seen: &mut BTreeSet<BlockId>, out: &mut BTreeSet<Node>) {
    if !seen.insert(b) {
        return;
    }
    if let Some(&first) = ix.sites_in(b).first() {
        out.insert(Node::Site(first));
        return;
    }
    leave(f, ix, b, seen, out);
}

/// First nodes reached after the last site of `b`.
fn leave(f: &FunctionDef, ix: &FunctionIndex, b: BlockId, seen: &mut BTreeSet<BlockId>, out: &mut BTreeSet<Node>) {
    let succs = &f.blocks[ix.pos(b)].succs;
    if succs.is_empty() {
        out.insert(Node::End);
    }
    for &u in succs {
        if is_boundary(ix, u) {
            out.insert(Node::Boundary);
        } else {
            reach(f, ix, u, seen, out);
        }
    }
}

fn local_links(f: &FunctionDef, ix: &FunctionIndex) -> Local {
    let n = f.call_sites.len();
    let opaque = Local {
        start_succ: BTreeSet::from([Node::Boundary]),
        start_next: None,
        next: vec![None; n],
    };
    // Without a post-dominator tree there is no dependence key; treat the
    // function as unstructured.
    let Ok(pdt) = post_dominators(f) else {
        return opaque;
    };
    let deps = control_dependence(f, &pdt);
    let key = |x: Node| match x {
        Node::Site(i) => deps[&f.call_sites[i].site],
        _ => DepKey::Independent,
    };

    let mut succ: Vec<BTreeSet<Node>> = vec![BTreeSet::new(); n];
    for b in &f.blocks {
        let sites = ix.sites_in(b.id);
        for (k, &i) in sites.iter().enumerate() {
            if let Some(&j) = sites.get(k + 1) {
                succ[i].insert(Node::Site(j));
            } else {
                leave(f, ix, b.id, &mut BTreeSet::new(), &mut succ[i]);
            }
        }
    }
    let mut start_succ = BTreeSet::new();
    if is_boundary(ix, f.entry) {
        start_succ.insert(Node::Boundary);
    } else {
        reach(f, ix, f.entry, &mut BTreeSet::new(), &mut start_succ);
    }

    let mut pred: BTreeMap<Node, BTreeSet<Node>> = BTreeMap::new();
    for (i, s) in succ.iter().enumerate() {
        for &x in s {
            pred.entry(x).or_default().insert(Node::Site(i));
        }
    }
    for &x in &start_succ {
        pred.entry(x).or_default().insert(Node::Start);
    }
    for b in &f.blocks {
        if is_boundary(ix, b.id) {
            let mut after = BTreeSet::new();
            reach(f, ix, b.id, &mut BTreeSet::new(), &mut after);
            for x in after {
                pred.entry(x).or_default().insert(Node::Boundary);
            }
        }
    }

    let link = |c: Node, s: &BTreeSet<Node>| -> Option<Node> {
        if s.len() != 1 {
            return None;
        }
        let x = *s.iter().next().unwrap();
        let only_pred = pred.get(&x).is_some_and(|p| p.len() == 1 && p.contains(&c));
        (matches!(x, Node::Site(_) | Node::End) && x != c && only_pred && key(c) == key(x)).then_some(x)
    };
    let next = (0..n).map(|i| link(Node::Site(i), &succ[i])).collect();
    let start_next = link(Node::Start, &start_succ);
    Local {
        start_succ,
        start_next,
        next,
    }
}

struct Deriver<'g> {
    g: &'g ProgramGraph,
    locals: Vec<Local>,
    recursive: BTreeSet<FuncId>,
    memo: HashMap<FuncId, (Vec<FuncId>, bool)>,
}

impl Deriver<'_> {
    /// Tokens a call to `f` is guaranteed to emit, and whether that is
    /// everything it emits.
    fn enter(&mut self, f: FuncId) -> (Vec<FuncId>, bool) {
        if let Some(r) = self.memo.get(&f) {
            return r.clone();
        }
        let l = &self.locals[f as usize];
        let r = if self.recursive.contains(&f) {
            (vec![], false)
        } else if l.start_succ.len() == 1 && l.start_succ.contains(&Node::End) {
            (vec![], true)
        } else if let Some(Node::Site(s)) = l.start_next {
            self.walk(f, s)
        } else {
            (vec![], false)
        };
        self.memo.insert(f, r.clone());
        r
    }

    /// Tokens forced from site `s` of `f` onwards; `true` if the walk
    /// reached the function exit.
    fn walk(&mut self, f: FuncId, s: usize) -> (Vec<FuncId>, bool) {
        let mut tokens = Vec::new();
        let mut cur = s;
        let mut visited = BTreeSet::new();
        loop {
            visited.insert(cur);
            let callee = self.g.func(f).call_sites[cur].callee;
            tokens.push(callee);
            let (inner, done) = self.enter(callee);
            tokens.extend(inner);
            if tokens.len() > MAX_BODY {
                tokens.truncate(MAX_BODY);
                return (tokens, false);
            }
            if !done {
                return (tokens, false);
            }
            match self.locals[f as usize].next[cur] {
                Some(Node::End) => return (tokens, true),
                Some(Node::Site(c)) if !visited.contains(&c) => cur = c,
                _ => return (tokens, false),
            }
        }
    }
}

pub fn derive_codebook(g: &ProgramGraph) -> PathCodebook {
    derive_with_runs(g).0
}

/// The codebook together with the site runs that produced its entries.
pub fn derive_with_runs(g: &ProgramGraph) -> (PathCodebook, Vec<SiteRun>) {
    let locals = g
        .functions
        .iter()
        .map(|f| local_links(f, g.index(f.id)))
        .collect();
    let mut d = Deriver {
        g,
        locals,
        recursive: recursion_closure(g).recursive,
        memo: HashMap::new(),
    };
    let mut runs = Vec::new();
    for f in &g.functions {
        let n = f.call_sites.len();
        let mut continued = vec![false; n];
        for p in 0..n {
            if let Some(Node::Site(c)) = d.locals[f.id as usize].next[p] {
                if d.enter(f.call_sites[p].callee).1 {
                    continued[c] = true;
                }
            }
        }
        for c in 0..n {
            if continued[c] {
                continue;
            }
            let (body, _) = d.walk(f.id, c);
            if body.len() >= 2 {
                runs.push(SiteRun {
                    func: f.id,
                    site: f.call_sites[c].site,
                    body,
                });
            }
        }
    }
    let mut bodies: Vec<Vec<FuncId>> = runs.iter().map(|r| r.body.clone()).collect();
    bodies.sort_by(|a, b| (a[0], a.len(), a).cmp(&(b[0], b.len(), b)));
    bodies.dedup();
    let code_base = g.max_func_id() + CODE_OFFSET;
    let entries = bodies
        .into_iter()
        .enumerate()
        .map(|(i, body)| CodeEntry {
            code: code_base + i as u32,
            body,
        })
        .collect();
    (
        PathCodebook {
            program_id: g.fingerprint(),
            code_base,
            entries,
        },
        runs,
    )
}

#[derive(Default)]
struct TrieNode {
    children: HashMap<FuncId, usize>,
    code: Option<u32>,
}

impl PathCodebook {
    pub fn empty(program_id: impl Into<String>, code_base: u32) -> Self {
        Self {
            program_id: program_id.into(),
            code_base,
            entries: vec![],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("codebook serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RegionError> {
        let cb: PathCodebook = serde_json::from_str(text)?;
        let mut seen = BTreeSet::new();
        for e in &cb.entries {
            if e.code < cb.code_base || !seen.insert(e.code) {
                return Err(RegionError::Invalid(format!("bad or repeated code {}", e.code)));
            }
            if e.body.len() < 2 || e.body.iter().any(|&t| t >= cb.code_base) {
                return Err(RegionError::Invalid(format!("code {} has an invalid body", e.code)));
            }
        }
        Ok(cb)
    }

    pub fn body(&self, code: u32) -> Option<&[FuncId]> {
        self.entries
            .iter()
            .find(|e| e.code == code)
            .map(|e| e.body.as_slice())
    }

    pub fn code_of(&self, body: &[FuncId]) -> Option<u32> {
        self.entries.iter().find(|e| e.body == body).map(|e| e.code)
    }

    fn trie(&self) -> Vec<TrieNode> {
        let mut nodes = vec![TrieNode::default()];
        for e in &self.entries {
            let mut at = 0;
            for &t in &e.body {
                at = match nodes[at].children.get(&t) {
                    Some(&n) => n,
                    None => {
                        nodes.push(TrieNode::default());
                        let n = nodes.len() - 1;
                        nodes[at].children.insert(t, n);
                        n
                    }
                };
            }
            nodes[at].code = Some(e.code);
        }
        nodes
    }

    fn check_program(&self, t: &Trace) -> Result<(), RegionError> {
        if self.program_id != t.program_id {
            return Err(RegionError::ProgramMismatch {
                codebook: self.program_id.clone(),
                trace: t.program_id.clone(),
            });
        }
        Ok(())
    }
}

/// Greedy longest-match replacement inside each maximal run of `Call`
/// events. Runs end at every other event, so matches never cross a chain
/// boundary.
pub fn apply_codebook(cb: &PathCodebook, t: &Trace) -> Result<Trace, RegionError> {
    cb.check_program(t)?;
    let trie = cb.trie();
    let ev = &t.events;
    let mut out = Vec::with_capacity(ev.len());
    let mut i = 0;
    while i < ev.len() {
        let TraceEvent::Call(_) = ev[i] else {
            out.push(ev[i]);
            i += 1;
            continue;
        };
        let mut at = 0;
        let mut best = None;
        let mut j = i;
        while let Some(TraceEvent::Call(f)) = ev.get(j) {
            match trie[at].children.get(f) {
                Some(&n) => at = n,
                None => break,
            }
            j += 1;
            if let Some(code) = trie[at].code {
                best = Some((code, j));
            }
        }
        match best {
            Some((code, end)) => {
                out.push(TraceEvent::PathCode(code));
                i = end;
            }
            None => {
                out.push(ev[i]);
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

pub fn decode_codebook(cb: &PathCodebook, t: &Trace) -> Result<Trace, RegionError> {
    cb.check_program(t)?;
    let table: HashMap<u32, &[FuncId]> = cb.entries.iter().map(|e| (e.code, e.body.as_slice())).collect();
    let mut out = Vec::with_capacity(t.events.len());
    for e in &t.events {
        match e {
            TraceEvent::PathCode(c) => {
                let body = table.get(c).ok_or(RegionError::UnknownCode(*c))?;
                out.extend(body.iter().map(|&f| TraceEvent::Call(f)));
            }
            e => out.push(*e),
        }
    }
    Ok(Trace {
        program_id: t.program_id.clone(),
        input_id: t.input_id.clone(),
        events: out,
        token_count: t.token_count,
    })
}
