//! Random programs and decision scripts for property tests and benchmarks.
//!
//! Programs are built from structured statements (calls, if/else, switch,
//! counted loops, loop breaks) and lowered to validated [`ProgramGraph`]s.
//! Calls go to higher function ids, so the call graph is acyclic unless
//! guarded recursion is requested. [`random_cfg`] builds unstructured CFGs for
//! the graph-analysis oracles.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::ir::{BasicBlock, BlockId, Branch, CallSite, FuncId, FunctionDef, Loop, ProgramGraph};
use crate::trace::DecisionScript;

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub min_funcs: usize,
    pub max_funcs: usize,
    /// Statements per sequence.
    pub max_stmts: usize,
    pub max_nest: usize,
    /// Upper bound on branches over the whole program.
    pub max_branches: usize,
    pub max_loops: usize,
    pub p_call: f64,
    pub p_if: f64,
    pub p_switch: f64,
    pub p_loop: f64,
    /// Chance that an if-arm inside a loop ends by leaving the loop.
    pub p_break: f64,
    /// Chance per function of a branch-guarded call back to a lower id.
    pub p_recursion: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            min_funcs: 1,
            max_funcs: 15,
            max_stmts: 4,
            max_nest: 2,
            max_branches: usize::MAX,
            max_loops: usize::MAX,
            p_call: 0.55,
            p_if: 0.15,
            p_switch: 0.05,
            p_loop: 0.12,
            p_break: 0.2,
            p_recursion: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
enum Stmt {
    Call(FuncId),
    /// Arms in target order; `breaks[i]` means arm `i` leaves the innermost loop.
    Branch { arms: Vec<Vec<Stmt>>, breaks: Vec<bool> },
    Loop(Vec<Stmt>),
}

struct Gen<'a, R: Rng> {
    rng: &'a mut R,
    p: &'a SynthParams,
    branches_left: usize,
    loops_left: usize,
}

impl<R: Rng> Gen<'_, R> {
    fn body(&mut self, callees: &[FuncId], nest: usize, in_loop: bool) -> Vec<Stmt> {
        let n = self.rng.gen_range(0..=self.p.max_stmts);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let r: f64 = self.rng.gen();
            let p = self.p;
            if r < p.p_call {
                if let Some(&c) = callees.choose(self.rng) {
                    out.push(Stmt::Call(c));
                }
            } else if r < p.p_call + p.p_if + p.p_switch {
                if self.branches_left == 0 || nest > p.max_nest {
                    continue;
                }
                self.branches_left -= 1;
                let arity = if r < p.p_call + p.p_if { 2 } else { self.rng.gen_range(3..=4) };
                let mut arms = Vec::new();
                let mut breaks = Vec::new();
                for i in 0..arity {
                    // Arm 0 always falls through so the join stays reachable.
                    if i > 0 && in_loop && self.rng.gen_bool(p.p_break) {
                        let k = self.rng.gen_range(0..=2);
                        arms.push((0..k).filter_map(|_| callees.choose(self.rng).map(|&c| Stmt::Call(c))).collect());
                        breaks.push(true);
                    } else {
                        arms.push(self.body(callees, nest + 1, in_loop));
                        breaks.push(false);
                    }
                }
                out.push(Stmt::Branch { arms, breaks });
            } else if r < p.p_call + p.p_if + p.p_switch + p.p_loop {
                if self.loops_left == 0 || nest >= p.max_nest {
                    continue;
                }
                self.loops_left -= 1;
                out.push(Stmt::Loop(self.body(callees, nest + 1, true)));
            }
        }
        out
    }
}

struct Lower {
    blocks: Vec<BasicBlock>,
    branches: Vec<Branch>,
    loops: Vec<Loop>,
    sites: Vec<CallSite>,
    /// (index into `loops`) of enclosing loops, innermost last.
    open: Vec<usize>,
}

impl Lower {
    fn block(&mut self) -> BlockId {
        let id = self.blocks.len() as BlockId;
        self.blocks.push(BasicBlock { id, succs: vec![] });
        id
    }

    fn lower(&mut self, stmts: &[Stmt], mut cur: BlockId, site: &mut u32, loop_id: &mut u32) -> BlockId {
        for s in stmts {
            match s {
                Stmt::Call(c) => {
                    self.sites.push(CallSite {
                        site: *site,
                        block: cur,
                        callee: *c,
                    });
                    *site += 1;
                }
                Stmt::Branch { arms, breaks } => {
                    let targets: Vec<BlockId> = arms.iter().map(|_| self.block()).collect();
                    self.blocks[cur as usize].succs = targets.clone();
                    self.branches.push(Branch {
                        id: self.branches.len() as u32,
                        block: cur,
                        targets: targets.clone(),
                    });
                    let join = self.block();
                    for ((arm, &brk), &t) in arms.iter().zip(breaks).zip(&targets) {
                        let end = self.lower(arm, t, site, loop_id);
                        if brk {
                            let l = *self.open.last().expect("break outside a loop");
                            let exit = self.loops[l].exits[0];
                            self.blocks[end as usize].succs = vec![exit];
                            self.loops[l].exits.push(t);
                        } else {
                            self.blocks[end as usize].succs = vec![join];
                        }
                    }
                    cur = join;
                }
                Stmt::Loop(body) => {
                    let h = self.block();
                    self.blocks[cur as usize].succs = vec![h];
                    let b = self.block();
                    let x = self.block();
                    self.blocks[h as usize].succs = vec![b, x];
                    self.loops.push(Loop {
                        header: h,
                        exits: vec![x],
                        loop_id: *loop_id,
                        depth: self.open.len() as u32 + 1,
                    });
                    *loop_id += 1;
                    self.open.push(self.loops.len() - 1);
                    let end = self.lower(body, b, site, loop_id);
                    self.blocks[end as usize].succs = vec![h];
                    self.open.pop();
                    cur = x;
                }
            }
        }
        cur
    }
}

/// A random valid program.
pub fn random_program<R: Rng>(rng: &mut R, p: &SynthParams) -> ProgramGraph {
    let n = rng.gen_range(p.min_funcs..=p.max_funcs);
    let mut g = Gen {
        rng,
        p,
        branches_left: p.max_branches,
        loops_left: p.max_loops,
    };
    let mut site = 0u32;
    let mut loop_id = 0u32;
    let mut functions = Vec::with_capacity(n);
    for id in 0..n as FuncId {
        let callees: Vec<FuncId> = (id + 1..n as FuncId).collect();
        let mut stmts = g.body(&callees, 0, false);
        if g.branches_left > 0 && g.rng.gen_bool(p.p_recursion) {
            g.branches_left -= 1;
            let back = g.rng.gen_range(0..=id);
            let pos = g.rng.gen_range(0..=stmts.len());
            stmts.insert(
                pos,
                Stmt::Branch {
                    arms: vec![vec![], vec![Stmt::Call(back)]],
                    breaks: vec![false, false],
                },
            );
        }
        let mut lw = Lower {
            blocks: vec![],
            branches: vec![],
            loops: vec![],
            sites: vec![],
            open: vec![],
        };
        let entry = lw.block();
        let exit = lw.lower(&stmts, entry, &mut site, &mut loop_id);
        functions.push(FunctionDef {
            id,
            name: format!("fn{id}"),
            entry,
            exit,
            blocks: lw.blocks,
            branches: lw.branches,
            loops: lw.loops,
            call_sites: lw.sites,
        });
    }
    ProgramGraph::from_functions(functions).expect("generated program is valid")
}

/// A random script covering every branch and loop of `g`. Lists are short
/// and defaults pick target 0 and zero trips, so recursion always unwinds.
pub fn random_script<R: Rng>(rng: &mut R, g: &ProgramGraph, max_list: usize, max_trips: u64) -> DecisionScript {
    let mut s = DecisionScript {
        branch_fallback: Some(0),
        loop_fallback: Some(0),
        ..Default::default()
    };
    for f in &g.functions {
        for br in &f.branches {
            let n = rng.gen_range(0..=max_list);
            let outs = (0..n).map(|_| rng.gen_range(0..br.targets.len() as u32)).collect();
            s.branches.insert((f.id, br.id), outs);
        }
        for lp in &f.loops {
            let n = rng.gen_range(0..=max_list);
            let outs = (0..n).map(|_| rng.gen_range(0..=max_trips)).collect();
            s.loops.insert((f.id, lp.loop_id), outs);
        }
    }
    s
}

/// An unstructured CFG with `n` blocks (entry 0, exit `n-1`). Every block
/// falls through to its successor in id order plus random extra edges, so
/// all blocks are reachable and reach the exit. Multi-successor blocks get
/// branches; `sites` call sites land in random blocks.
pub fn random_cfg<R: Rng>(rng: &mut R, n: usize, extra_edge_p: f64, sites: usize) -> FunctionDef {
    assert!(n >= 1);
    let exit = (n - 1) as BlockId;
    let mut blocks = Vec::with_capacity(n);
    let mut branches = Vec::new();
    for i in 0..n as BlockId {
        let mut succs = Vec::new();
        if i < exit {
            succs.push(i + 1);
            while succs.len() < 4 && rng.gen_bool(extra_edge_p) {
                let t = rng.gen_range(0..n as BlockId);
                if !succs.contains(&t) {
                    succs.push(t);
                }
            }
            succs.shuffle(rng);
        }
        if succs.len() > 1 {
            branches.push(Branch {
                id: branches.len() as u32,
                block: i,
                targets: succs.clone(),
            });
        }
        blocks.push(BasicBlock { id: i, succs });
    }
    let call_sites = (0..sites)
        .map(|s| CallSite {
            site: s as u32,
            block: rng.gen_range(0..n as BlockId),
            callee: 0,
        })
        .collect();
    FunctionDef {
        id: 0,
        name: "cfg".into(),
        entry: 0,
        exit,
        blocks,
        branches,
        loops: vec![],
        call_sites,
    }
}
