//! Deterministic abstract execution of a [`ProgramGraph`].
//!
//! The executor walks CFGs with an explicit frame stack. Every call-site
//! visit emits a `Call`, loop headers emit `LoopEnter` when they activate and
//! `LoopExit` when control leaves the loop body. Branch outcomes and loop
//! trip counts come from a [`Decider`], normally a [`DecisionScript`].
//!
//! A loop header runs its own calls once per test, so with trip count `n`
//! the header's calls run `n + 1` times and the body's calls `n` times.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Trace, TraceEvent};
use crate::ir::{BlockId, BranchId, FuncId, LoopId, ProgramGraph, SiteId, ENTRY};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExecError {
    #[error("step budget exceeded: {0}")]
    StepBudgetExceeded(String),
    #[error("script exhausted: no outcome left for {kind} {key}")]
    ScriptExhausted { kind: &'static str, key: String },
    #[error("script outcome {outcome} for branch {key} is out of range (branch has {arity} targets)")]
    BadOutcome { key: String, outcome: u32, arity: usize },
    #[error("invalid decision script: {0}")]
    Script(String),
}

/// Source of branch outcomes and loop trip counts.
pub trait Decider {
    /// Index of the taken target, `< arity`.
    fn branch(&mut self, f: FuncId, b: BranchId, arity: usize) -> Result<usize, ExecError>;
    fn trips(&mut self, f: FuncId, l: LoopId) -> Result<u64, ExecError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    /// Basic-block visits.
    pub max_steps: u64,
    pub max_calls: u64,
    pub max_depth: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_steps: 100_000_000,
            max_calls: 20_000_000,
            max_depth: 4096,
        }
    }
}

type Key = (u32, u32);

fn key_str(k: Key) -> String {
    format!("{}.{}", k.0, k.1)
}

fn parse_key(s: &str) -> Result<Key, ExecError> {
    let bad = || ExecError::Script(format!("bad key {s:?}, expected \"function.id\""));
    let (a, b) = s.split_once('.').ok_or_else(bad)?;
    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DefaultsDoc {
    #[serde(default)]
    branches: BTreeMap<String, u32>,
    #[serde(default)]
    loops: BTreeMap<String, u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptDoc {
    #[serde(default)]
    branches: BTreeMap<String, Vec<u32>>,
    #[serde(default)]
    loops: BTreeMap<String, Vec<u64>>,
    #[serde(default)]
    defaults: DefaultsDoc,
}

/// Per-key outcome lists, consumed in order, with optional fallbacks once a
/// list runs dry. A `"*"` default applies to every key of its kind.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecisionScript {
    pub branches: BTreeMap<Key, Vec<u32>>,
    pub loops: BTreeMap<Key, Vec<u64>>,
    pub branch_defaults: BTreeMap<Key, u32>,
    pub loop_defaults: BTreeMap<Key, u64>,
    pub branch_fallback: Option<u32>,
    pub loop_fallback: Option<u64>,
}

impl DecisionScript {
    pub fn from_json(text: &str) -> Result<Self, ExecError> {
        let doc: ScriptDoc = serde_json::from_str(text).map_err(|e| ExecError::Script(e.to_string()))?;
        let mut s = DecisionScript::default();
        for (k, v) in doc.branches {
            s.branches.insert(parse_key(&k)?, v);
        }
        for (k, v) in doc.loops {
            s.loops.insert(parse_key(&k)?, v);
        }
        for (k, v) in doc.defaults.branches {
            if k == "*" {
                s.branch_fallback = Some(v);
            } else {
                s.branch_defaults.insert(parse_key(&k)?, v);
            }
        }
        for (k, v) in doc.defaults.loops {
            if k == "*" {
                s.loop_fallback = Some(v);
            } else {
                s.loop_defaults.insert(parse_key(&k)?, v);
            }
        }
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        let mut doc = ScriptDoc::default();
        doc.branches = self.branches.iter().map(|(&k, v)| (key_str(k), v.clone())).collect();
        doc.loops = self.loops.iter().map(|(&k, v)| (key_str(k), v.clone())).collect();
        doc.defaults.branches = self.branch_defaults.iter().map(|(&k, &v)| (key_str(k), v)).collect();
        doc.defaults.loops = self.loop_defaults.iter().map(|(&k, &v)| (key_str(k), v)).collect();
        if let Some(v) = self.branch_fallback {
            doc.defaults.branches.insert("*".into(), v);
        }
        if let Some(v) = self.loop_fallback {
            doc.defaults.loops.insert("*".into(), v);
        }
        serde_json::to_string_pretty(&doc).expect("script serializes")
    }

    /// Short content hash, used as the trace input id.
    pub fn fingerprint(&self) -> String {
        hex::encode(&Sha256::digest(self.to_json().as_bytes())[..8])
    }

    pub fn cursor(&self) -> ScriptCursor<'_> {
        ScriptCursor {
            script: self,
            used_branches: HashMap::new(),
            used_loops: HashMap::new(),
        }
    }

    /// Executes `g` under this script; the trace's input id is the script
    /// fingerprint.
    pub fn run(&self, g: &ProgramGraph, limits: &Limits) -> Result<Trace, ExecError> {
        let mut t = execute(g, &mut self.cursor(), limits)?;
        t.input_id = self.fingerprint();
        Ok(t)
    }
}

pub struct ScriptCursor<'a> {
    script: &'a DecisionScript,
    used_branches: HashMap<Key, usize>,
    used_loops: HashMap<Key, usize>,
}

impl Decider for ScriptCursor<'_> {
    fn branch(&mut self, f: FuncId, b: BranchId, arity: usize) -> Result<usize, ExecError> {
        let key = (f, b);
        let n = self.used_branches.entry(key).or_insert(0);
        let listed = self.script.branches.get(&key).and_then(|v| v.get(*n)).copied();
        *n += 1;
        let outcome = listed
            .or_else(|| self.script.branch_defaults.get(&key).copied())
            .or(self.script.branch_fallback)
            .ok_or_else(|| ExecError::ScriptExhausted {
                kind: "branch",
                key: key_str(key),
            })?;
        if outcome as usize >= arity {
            return Err(ExecError::BadOutcome {
                key: key_str(key),
                outcome,
                arity,
            });
        }
        Ok(outcome as usize)
    }

    fn trips(&mut self, f: FuncId, l: LoopId) -> Result<u64, ExecError> {
        let key = (f, l);
        let n = self.used_loops.entry(key).or_insert(0);
        let listed = self.script.loops.get(&key).and_then(|v| v.get(*n)).copied();
        *n += 1;
        listed
            .or_else(|| self.script.loop_defaults.get(&key).copied())
            .or(self.script.loop_fallback)
            .ok_or_else(|| ExecError::ScriptExhausted {
                kind: "loop",
                key: key_str(key),
            })
    }
}

struct Frame {
    f: FuncId,
    block: BlockId,
    next_site: usize,
    /// Active loops, innermost last: (index into `loops`, remaining trips).
    loops: Vec<(usize, u64)>,
}

struct Machine<'g, 'd> {
    g: &'g ProgramGraph,
    decider: &'d mut dyn Decider,
    limits: Limits,
    steps: u64,
    calls: u64,
    events: Vec<TraceEvent>,
    sites: Option<Vec<Option<SiteId>>>,
}

impl Machine<'_, '_> {
    fn emit(&mut self, e: TraceEvent, site: Option<SiteId>) {
        self.events.push(e);
        if let Some(s) = &mut self.sites {
            s.push(site);
        }
    }

    fn call(&mut self, callee: FuncId, site: Option<SiteId>) -> Result<(), ExecError> {
        self.calls += 1;
        if self.calls > self.limits.max_calls {
            return Err(ExecError::StepBudgetExceeded(format!("more than {} calls", self.limits.max_calls)));
        }
        self.emit(TraceEvent::Call(callee), site);
        Ok(())
    }

    fn arrive(&mut self, fr: &mut Frame, block: BlockId) -> Result<(), ExecError> {
        self.steps += 1;
        if self.steps > self.limits.max_steps {
            return Err(ExecError::StepBudgetExceeded(format!(
                "more than {} block visits",
                self.limits.max_steps
            )));
        }
        let ix = self.g.index(fr.f);
        if let Some(l) = ix.loop_headed_by(block) {
            if !fr.loops.iter().any(|&(a, _)| a == l) {
                let lp = &self.g.func(fr.f).loops[l];
                self.emit(TraceEvent::LoopEnter(lp.loop_id), None);
                let trips = self.decider.trips(fr.f, lp.loop_id)?;
                fr.loops.push((l, trips));
            }
        }
        fr.block = block;
        fr.next_site = 0;
        Ok(())
    }

    fn transfer(&mut self, fr: &mut Frame, target: BlockId) -> Result<(), ExecError> {
        let ix = self.g.index(fr.f);
        while let Some(&(l, _)) = fr.loops.last() {
            if ix.loop_body(l).contains(&target) {
                break;
            }
            fr.loops.pop();
            let id = self.g.func(fr.f).loops[l].loop_id;
            self.emit(TraceEvent::LoopExit(id), None);
        }
        self.arrive(fr, target)
    }

    /// Successor of the current block, or `None` at the function exit.
    fn successor(&mut self, fr: &mut Frame) -> Result<Option<BlockId>, ExecError> {
        let g = self.g;
        let f = g.func(fr.f);
        let ix = g.index(fr.f);
        let succs = &f.blocks[ix.pos(fr.block)].succs;
        if let Some(l) = ix.loop_headed_by(fr.block) {
            let body = ix.loop_body(l);
            let slot = fr
                .loops
                .iter_mut()
                .rev()
                .find(|(a, _)| *a == l)
                .expect("header of an active loop");
            let inside = succs.iter().copied().find(|s| body.contains(s)).unwrap();
            let outside = succs.iter().copied().find(|s| !body.contains(s)).unwrap();
            return Ok(Some(if slot.1 > 0 {
                slot.1 -= 1;
                inside
            } else {
                outside
            }));
        }
        if let Some(bi) = ix.branch_at(fr.block) {
            let br = &f.branches[bi];
            let i = self.decider.branch(fr.f, br.id, br.targets.len())?;
            return Ok(Some(br.targets[i]));
        }
        Ok(succs.first().copied())
    }

    fn run(&mut self) -> Result<(), ExecError> {
        let mut stack: Vec<Frame> = Vec::new();
        self.call(ENTRY, None)?;
        let mut main = Frame {
            f: ENTRY,
            block: 0,
            next_site: 0,
            loops: Vec::new(),
        };
        self.arrive(&mut main, self.g.func(ENTRY).entry)?;
        stack.push(main);

        while let Some(mut fr) = stack.pop() {
            let ix = self.g.index(fr.f);
            let sites = ix.sites_in(fr.block);
            if let Some(&si) = sites.get(fr.next_site) {
                fr.next_site += 1;
                let cs = &self.g.func(fr.f).call_sites[si];
                self.call(cs.callee, Some(cs.site))?;
                let mut callee = Frame {
                    f: cs.callee,
                    block: 0,
                    next_site: 0,
                    loops: Vec::new(),
                };
                stack.push(fr);
                if stack.len() >= self.limits.max_depth {
                    return Err(ExecError::StepBudgetExceeded(format!(
                        "call depth above {}",
                        self.limits.max_depth
                    )));
                }
                self.arrive(&mut callee, self.g.func(cs.callee).entry)?;
                stack.push(callee);
                continue;
            }
            match self.successor(&mut fr)? {
                Some(t) => {
                    self.transfer(&mut fr, t)?;
                    stack.push(fr);
                }
                None => {
                    while let Some((l, _)) = fr.loops.pop() {
                        let id = self.g.func(fr.f).loops[l].loop_id;
                        self.emit(TraceEvent::LoopExit(id), None);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs `g` from its entry function. The trace carries the program
/// fingerprint and an empty input id.
pub fn execute(g: &ProgramGraph, decider: &mut dyn Decider, limits: &Limits) -> Result<Trace, ExecError> {
    let mut m = Machine {
        g,
        decider,
        limits: *limits,
        steps: 0,
        calls: 0,
        events: Vec::new(),
        sites: None,
    };
    m.run()?;
    Ok(Trace::new(g.fingerprint(), "", m.events))
}

/// Like [`execute`], also returning the call site behind every event
/// (`None` for the entry call and for loop events).
pub fn execute_with_sites(
    g: &ProgramGraph,
    decider: &mut dyn Decider,
    limits: &Limits,
) -> Result<(Trace, Vec<Option<SiteId>>), ExecError> {
    let mut m = Machine {
        g,
        decider,
        limits: *limits,
        steps: 0,
        calls: 0,
        events: Vec::new(),
        sites: Some(Vec::new()),
    };
    m.run()?;
    let sites = m.sites.take().unwrap();
    Ok((Trace::new(g.fingerprint(), "", m.events), sites))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::tests::{block, leaf};
    use crate::ir::{Branch, CallSite, FunctionDef, Loop};
    use TraceEvent::*;

    /// main: 0 -> 1(header) -> {2 body, 3 exit}; 2 -> 1. Body calls 1, 2.
    fn looping() -> ProgramGraph {
        let main = FunctionDef {
            id: 0,
            name: "main".into(),
            entry: 0,
            exit: 3,
            blocks: vec![block(0, &[1]), block(1, &[2, 3]), block(2, &[1]), block(3, &[])],
            branches: vec![],
            loops: vec![Loop {
                header: 1,
                exits: vec![3],
                loop_id: 5,
                depth: 1,
            }],
            call_sites: vec![
                CallSite {
                    site: 0,
                    block: 2,
                    callee: 1,
                },
                CallSite {
                    site: 1,
                    block: 2,
                    callee: 2,
                },
            ],
        };
        ProgramGraph::from_functions(vec![main, leaf(1, "a"), leaf(2, "b")]).unwrap()
    }

    fn script(json: &str) -> DecisionScript {
        DecisionScript::from_json(json).unwrap()
    }

    #[test]
    fn loop_trips() {
        let g = looping();
        let t = script(r#"{"loops":{"0.5":[3]}}"#).run(&g, &Limits::default()).unwrap();
        let mut want = vec![Call(0), LoopEnter(5)];
        for _ in 0..3 {
            want.extend([Call(1), Call(2)]);
        }
        want.push(LoopExit(5));
        assert_eq!(t.events, want);
        assert_eq!(t.token_count, 7);
    }

    #[test]
    fn zero_trip_loop() {
        let g = looping();
        let t = script(r#"{"loops":{"0.5":[0]}}"#).run(&g, &Limits::default()).unwrap();
        assert_eq!(t.events, vec![Call(0), LoopEnter(5), LoopExit(5)]);
    }

    #[test]
    fn missing_trip_count_is_exhaustion() {
        let g = looping();
        let err = script("{}").run(&g, &Limits::default()).unwrap_err();
        assert!(matches!(err, ExecError::ScriptExhausted { kind: "loop", .. }));
        let ok = script(r#"{"defaults":{"loops":{"*":1}}}"#).run(&g, &Limits::default());
        assert!(ok.is_ok());
    }

    #[test]
    fn budget() {
        let g = looping();
        let limits = Limits {
            max_calls: 10,
            ..Limits::default()
        };
        let err = script(r#"{"loops":{"0.5":[100]}}"#).run(&g, &limits).unwrap_err();
        assert!(matches!(err, ExecError::StepBudgetExceeded(_)));
    }

    #[test]
    fn branch_outcomes_consumed_in_order() {
        // main: 0 -> {1, 2} -> 3; 1 calls f1, 2 calls f2. main calls g twice.
        let g_fn = FunctionDef {
            id: 1,
            name: "g".into(),
            entry: 0,
            exit: 3,
            blocks: vec![block(0, &[1, 2]), block(1, &[3]), block(2, &[3]), block(3, &[])],
            branches: vec![Branch {
                id: 4,
                block: 0,
                targets: vec![1, 2],
            }],
            loops: vec![],
            call_sites: vec![
                CallSite {
                    site: 10,
                    block: 1,
                    callee: 2,
                },
                CallSite {
                    site: 11,
                    block: 2,
                    callee: 3,
                },
            ],
        };
        let mut main = leaf(0, "main");
        main.call_sites = vec![
            CallSite {
                site: 0,
                block: 0,
                callee: 1,
            },
            CallSite {
                site: 1,
                block: 0,
                callee: 1,
            },
        ];
        let g = ProgramGraph::from_functions(vec![main, g_fn, leaf(2, "x"), leaf(3, "y")]).unwrap();
        let s = script(r#"{"branches":{"1.4":[1]},"defaults":{"branches":{"1.4":0}}}"#);
        let (t, sites) = execute_with_sites(&g, &mut s.cursor(), &Limits::default()).unwrap();
        assert_eq!(t.calls(), vec![0, 1, 3, 1, 2]);
        assert_eq!(sites, vec![None, Some(0), Some(11), Some(1), Some(10)]);
        let bad = script(r#"{"branches":{"1.4":[2]}}"#).run(&g, &Limits::default()).unwrap_err();
        assert!(matches!(bad, ExecError::BadOutcome { .. }));
    }

    #[test]
    fn script_json_round_trip() {
        let s = script(r#"{"branches":{"0.1":[0,1]},"loops":{"2.3":[20]},"defaults":{"branches":{"*":0},"loops":{"2.3":4}}}"#);
        assert_eq!(DecisionScript::from_json(&s.to_json()).unwrap(), s);
        assert!(DecisionScript::from_json(r#"{"branches":{"zero":[1]}}"#).is_err());
    }
}
