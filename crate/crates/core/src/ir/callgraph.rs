//! Whole-program call-graph analyses: recursion and interprocedural loop depth.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};

use super::{FuncId, ProgramGraph, ENTRY};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecursionInfo {
    /// Functions on some call-graph cycle, self loops included.
    pub recursive: BTreeSet<FuncId>,
    /// Everything reachable from each function through one or more calls.
    pub closure: BTreeMap<FuncId, BTreeSet<FuncId>>,
}

pub fn recursion_closure(g: &ProgramGraph) -> RecursionInfo {
    let adj = g.callees();
    let mut closure = BTreeMap::new();
    let mut recursive = BTreeSet::new();
    for f in 0..g.len() {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<FuncId> = adj[f].iter().copied().collect();
        while let Some(c) = queue.pop_front() {
            if seen.insert(c) {
                queue.extend(adj[c as usize].iter().copied());
            }
        }
        if seen.contains(&(f as FuncId)) {
            recursive.insert(f as FuncId);
        }
        closure.insert(f as FuncId, seen);
    }
    RecursionInfo { recursive, closure }
}

/// Strongly connected components in reverse topological order, each sorted.
pub fn strongly_connected(adj: &[Vec<FuncId>]) -> Vec<Vec<FuncId>> {
    let mut g = DiGraph::<(), ()>::with_capacity(adj.len(), 0);
    for _ in adj {
        g.add_node(());
    }
    for (f, cs) in adj.iter().enumerate() {
        for &c in cs {
            g.add_edge(NodeIndex::new(f), NodeIndex::new(c as usize), ());
        }
    }
    tarjan_scc(&g)
        .into_iter()
        .map(|comp| {
            let mut c: Vec<FuncId> = comp.into_iter().map(|n| n.index() as FuncId).collect();
            c.sort_unstable();
            c
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopDepths {
    /// Interprocedural loop depth per function id.
    pub depth: Vec<u32>,
    /// Functions with no call chain from the entry; their depth is 0.
    pub unreachable: BTreeSet<FuncId>,
}

impl LoopDepths {
    pub fn get(&self, f: FuncId) -> u32 {
        self.depth[f as usize]
    }
}

/// Longest path from the entry over the SCC-condensed call graph, where an
/// edge weighs its call site's loop depth. Every member of a recursive
/// component gets the component's entry depth plus the depths of all its
/// internal edges, each counted once.
pub fn interprocedural_loop_depth(g: &ProgramGraph) -> LoopDepths {
    let adj = g.callees();
    let comps = strongly_connected(&adj);
    let mut comp_of = vec![0usize; g.len()];
    for (ci, c) in comps.iter().enumerate() {
        for &f in c {
            comp_of[f as usize] = ci;
        }
    }
    let mut internal = vec![0u32; comps.len()];
    let mut incoming: Vec<Vec<(usize, u32)>> = vec![Vec::new(); comps.len()];
    for e in &g.call_edges {
        let (a, b) = (comp_of[e.caller as usize], comp_of[e.callee as usize]);
        if a == b {
            internal[a] += e.depth;
        } else {
            incoming[b].push((a, e.depth));
        }
    }

    // Tarjan yields sinks first, so walk the list backwards for a
    // topological order.
    let mut best: Vec<Option<u32>> = vec![None; comps.len()];
    let entry = comp_of[ENTRY as usize];
    for ci in (0..comps.len()).rev() {
        let base = if ci == entry {
            Some(0)
        } else {
            incoming[ci]
                .iter()
                .filter_map(|&(from, d)| best[from].map(|b| b + d))
                .max()
        };
        best[ci] = base.map(|b| b + internal[ci]);
    }

    let mut depth = vec![0; g.len()];
    let mut unreachable = BTreeSet::new();
    for f in 0..g.len() {
        match best[comp_of[f]] {
            Some(d) => depth[f] = d,
            None => {
                unreachable.insert(f as FuncId);
            }
        }
    }
    LoopDepths { depth, unreachable }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::tests::{block, leaf};
    use crate::ir::{CallSite, FunctionDef, Loop};

    /// A function with `nest` nested loops (nest = deepest requested call
    /// depth). Calls at depth 0 sit in the entry block, calls at depth `d`
    /// in the latch `100 + d` of loop `d`.
    pub(crate) fn nested_caller(id: FuncId, calls: &[(FuncId, u32)], site_base: u32, loop_base: u32) -> FunctionDef {
        let nest = calls.iter().map(|c| c.1).max().unwrap_or(0);
        let mut blocks = vec![block(0, &[if nest > 0 { 1 } else { 999 }])];
        let mut loops = Vec::new();
        for d in 1..=nest {
            let inner = if d < nest { d + 1 } else { 100 + d };
            let out = if d == 1 { 999 } else { 100 + d - 1 };
            blocks.push(block(d, &[inner, out]));
            blocks.push(block(100 + d, &[d]));
            loops.push(Loop {
                header: d,
                exits: vec![out],
                loop_id: loop_base + d,
                depth: d,
            });
        }
        blocks.push(block(999, &[]));
        let call_sites = calls
            .iter()
            .enumerate()
            .map(|(i, &(callee, d))| CallSite {
                site: site_base + i as u32,
                block: if d == 0 { 0 } else { 100 + d },
                callee,
            })
            .collect();
        FunctionDef {
            id,
            name: format!("f{id}"),
            entry: 0,
            exit: 999,
            blocks,
            branches: vec![],
            loops,
            call_sites,
        }
    }

    #[test]
    fn acyclic_has_no_recursion() {
        let g = ProgramGraph::from_functions(vec![
            nested_caller(0, &[(1, 0)], 0, 0),
            nested_caller(1, &[(2, 0)], 10, 10),
            leaf(2, "c"),
        ])
        .unwrap();
        let r = recursion_closure(&g);
        assert!(r.recursive.is_empty());
        assert_eq!(r.closure[&0], BTreeSet::from([1, 2]));
    }

    #[test]
    fn two_cycle() {
        let g = ProgramGraph::from_functions(vec![
            nested_caller(0, &[(1, 0)], 0, 0),
            nested_caller(1, &[(2, 0)], 10, 10),
            nested_caller(2, &[(1, 0)], 20, 20),
        ])
        .unwrap();
        let r = recursion_closure(&g);
        assert_eq!(r.recursive, BTreeSet::from([1, 2]));
        assert_eq!(r.closure[&1], BTreeSet::from([1, 2]));
    }

    #[test]
    fn chain_sum_and_max() {
        // main -(2)-> f -(1)-> g ; main -(0)-> h -(0)-> g
        let g = ProgramGraph::from_functions(vec![
            nested_caller(0, &[(1, 2), (3, 0)], 0, 0),
            nested_caller(1, &[(2, 1)], 10, 10),
            leaf(2, "g"),
            nested_caller(3, &[(2, 0)], 30, 30),
        ])
        .unwrap();
        let d = interprocedural_loop_depth(&g);
        assert_eq!(d.depth, vec![0, 2, 3, 0]);
        assert!(d.unreachable.is_empty());
    }

    #[test]
    fn unreachable_flagged() {
        let g = ProgramGraph::from_functions(vec![leaf(0, "main"), nested_caller(1, &[(2, 3)], 0, 0), leaf(2, "x")])
            .unwrap();
        let d = interprocedural_loop_depth(&g);
        assert_eq!(d.depth, vec![0, 0, 0]);
        assert_eq!(d.unreachable, BTreeSet::from([1, 2]));
    }

    #[test]
    fn recursive_component_counts_internal_edges_once() {
        // main -(1)-> a ; a -(1)-> b ; b -(2)-> a ; b -(0)-> c
        let g = ProgramGraph::from_functions(vec![
            nested_caller(0, &[(1, 1)], 0, 0),
            nested_caller(1, &[(2, 1)], 10, 10),
            nested_caller(2, &[(1, 2), (3, 0)], 20, 20),
            leaf(3, "c"),
        ])
        .unwrap();
        let d = interprocedural_loop_depth(&g);
        assert_eq!(d.depth, vec![0, 4, 4, 4]);
    }

    #[test]
    fn tarjan_order_is_reverse_topological() {
        let adj = vec![vec![1], vec![2], vec![1, 3], vec![]];
        let comps = strongly_connected(&adj);
        let pos = |c: &[FuncId]| comps.iter().position(|x| x == c).unwrap();
        assert_eq!(comps.len(), 3);
        assert!(pos(&[3]) < pos(&[1, 2]) && pos(&[1, 2]) < pos(&[0]));
    }
}
