use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ir::{interprocedural_loop_depth, recursion_closure, FuncId, ProgramGraph};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArtifactOptions {
    pub program_name: String,
    pub domain_hint: Option<String>,
    /// Replace every function name with `fn<id>`.
    pub obfuscate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallDepth {
    pub caller: String,
    pub callee: String,
    /// Loop nesting of the call site inside the caller.
    pub depth: u32,
}

/// Everything the prompts know about a program, by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactBundle {
    pub program_name: String,
    pub domain_hint: Option<String>,
    /// Indexed by function id.
    pub function_universe: Vec<String>,
    pub call_graph: BTreeMap<String, Vec<String>>,
    pub recursive_set: Vec<String>,
    /// Transitive callees of each recursive function.
    pub recursive_closure: BTreeMap<String, Vec<String>>,
    /// Functions called from inside a loop somewhere, with everything they
    /// reach.
    pub loop_called: BTreeMap<String, Vec<String>>,
    pub intra_depths: Vec<CallDepth>,
    pub inter_depths: Vec<(String, u32)>,
    /// Functions with no call chain from the entry.
    pub unreachable: Vec<String>,
}

impl ArtifactBundle {
    pub fn id_of(&self, name: &str) -> Option<FuncId> {
        self.function_universe.iter().position(|n| n == name).map(|i| i as FuncId)
    }
}

pub fn extract_artifacts(g: &ProgramGraph, opts: &ArtifactOptions) -> ArtifactBundle {
    let name = |f: FuncId| {
        if opts.obfuscate {
            format!("fn{f}")
        } else {
            g.func(f).name.clone()
        }
    };
    let names = |s: &BTreeSet<FuncId>| s.iter().map(|&f| name(f)).collect::<Vec<_>>();
    let rec = recursion_closure(g);
    let depths = interprocedural_loop_depth(g);
    let adj = g.callees();

    let mut in_loop = BTreeSet::new();
    let mut edges: BTreeSet<(FuncId, FuncId, u32)> = BTreeSet::new();
    for e in &g.call_edges {
        if e.depth >= 1 {
            in_loop.insert(e.callee);
        }
        edges.insert((e.caller, e.callee, e.depth));
    }
    ArtifactBundle {
        program_name: opts.program_name.clone(),
        domain_hint: opts.domain_hint.clone(),
        function_universe: g.functions.iter().map(|f| name(f.id)).collect(),
        call_graph: adj
            .iter()
            .enumerate()
            .map(|(f, cs)| (name(f as FuncId), cs.iter().map(|&c| name(c)).collect()))
            .collect(),
        recursive_set: names(&rec.recursive),
        recursive_closure: rec.recursive.iter().map(|&f| (name(f), names(&rec.closure[&f]))).collect(),
        loop_called: in_loop.iter().map(|&f| (name(f), names(&rec.closure[&f]))).collect(),
        intra_depths: edges
            .into_iter()
            .map(|(a, b, depth)| CallDepth {
                caller: name(a),
                callee: name(b),
                depth,
            })
            .collect(),
        inter_depths: g.functions.iter().map(|f| (name(f.id), depths.get(f.id))).collect(),
        unreachable: names(&depths.unreachable),
    }
}
