//! Portable program representation.
//!
//! A [`ProgramGraph`] is a list of functions, each with its own CFG, plus the
//! call edges between them. It is read from a JSON document whose field names
//! are fixed (see [`parse_program_graph`]). Every other stage of the toolkit
//! runs on this structure, so validation is strict: once a graph has been
//! parsed, the analyses in [`postdom`], [`cdep`] and [`callgraph`] may assume
//! all ids resolve.

pub mod callgraph;
pub mod cdep;
pub mod postdom;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use callgraph::{interprocedural_loop_depth, recursion_closure, LoopDepths, RecursionInfo};
pub use cdep::{control_dependence, ControlDepMap, DepKey};
pub use postdom::{post_dominators, PostDomTree};

pub type FuncId = u32;
pub type BlockId = u32;
pub type SiteId = u32;
pub type BranchId = u32;
pub type LoopId = u32;

/// The designated entry function.
pub const ENTRY: FuncId = 0;

#[derive(Debug, Error)]
pub enum IrError {
    #[error("schema error: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("validation error: {0}")]
    Validation(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, IrError> {
    Err(IrError::Validation(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasicBlock {
    pub id: BlockId,
    #[serde(default)]
    pub succs: Vec<BlockId>,
}

/// A conditional branch or switch terminating `block`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub id: BranchId,
    pub block: BlockId,
    pub targets: Vec<BlockId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Loop {
    pub header: BlockId,
    pub exits: Vec<BlockId>,
    pub loop_id: LoopId,
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallSite {
    pub site: SiteId,
    pub block: BlockId,
    pub callee: FuncId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallEdge {
    pub caller: FuncId,
    pub callee: FuncId,
    /// Loop-nesting depth of the call site inside `caller`.
    pub depth: u32,
    pub site: SiteId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionDef {
    pub id: FuncId,
    pub name: String,
    pub entry: BlockId,
    pub exit: BlockId,
    pub blocks: Vec<BasicBlock>,
    #[serde(default)]
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub loops: Vec<Loop>,
    /// Call sites, in execution order within each block.
    #[serde(default)]
    pub call_sites: Vec<CallSite>,
}

/// Derived per-function lookup tables. Built once during validation.
#[derive(Debug, Clone, Default)]
pub struct FunctionIndex {
    block_pos: HashMap<BlockId, usize>,
    preds: Vec<Vec<usize>>,
    branch_at: HashMap<BlockId, usize>,
    header_of: HashMap<BlockId, usize>,
    loop_bodies: Vec<BTreeSet<BlockId>>,
    exit_blocks: HashSet<BlockId>,
    sites_in: HashMap<BlockId, Vec<usize>>,
    block_depth: HashMap<BlockId, u32>,
}

impl FunctionDef {
    fn build_index(&self) -> Result<FunctionIndex, IrError> {
        let fname = &self.name;
        let mut ix = FunctionIndex::default();
        for (pos, b) in self.blocks.iter().enumerate() {
            if ix.block_pos.insert(b.id, pos).is_some() {
                return invalid(format!("{fname}: duplicate block id {}", b.id));
            }
        }
        for id in [self.entry, self.exit] {
            if !ix.block_pos.contains_key(&id) {
                return invalid(format!("{fname}: entry/exit block {id} does not exist"));
            }
        }
        ix.preds = vec![Vec::new(); self.blocks.len()];
        for (pos, b) in self.blocks.iter().enumerate() {
            for s in &b.succs {
                let Some(&sp) = ix.block_pos.get(s) else {
                    return invalid(format!("{fname}: block {} has unknown successor {s}", b.id));
                };
                ix.preds[sp].push(pos);
            }
        }
        if !self.block(self.exit).succs.is_empty() {
            return invalid(format!("{fname}: exit block {} has successors", self.exit));
        }

        // Reachability from entry.
        let mut seen = vec![false; self.blocks.len()];
        let mut stack = vec![ix.block_pos[&self.entry]];
        while let Some(p) = stack.pop() {
            if std::mem::replace(&mut seen[p], true) {
                continue;
            }
            for s in &self.blocks[p].succs {
                stack.push(ix.block_pos[s]);
            }
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return invalid(format!("{fname}: block {} unreachable from entry", self.blocks[p].id));
        }

        let mut branch_ids = HashSet::new();
        for (i, br) in self.branches.iter().enumerate() {
            if !branch_ids.insert(br.id) {
                return invalid(format!("{fname}: duplicate branch id {}", br.id));
            }
            let Some(&bp) = ix.block_pos.get(&br.block) else {
                return invalid(format!("{fname}: branch {} sits in unknown block {}", br.id, br.block));
            };
            if br.targets.len() < 2 {
                return invalid(format!("{fname}: branch {} needs at least two targets", br.id));
            }
            let mut distinct = HashSet::new();
            for t in &br.targets {
                if !ix.block_pos.contains_key(t) {
                    return invalid(format!(
                        "{fname}: branch {} targets block {t} outside the function",
                        br.id
                    ));
                }
                if !distinct.insert(*t) {
                    return invalid(format!("{fname}: branch {} repeats target {t}", br.id));
                }
            }
            let succs: HashSet<_> = self.blocks[bp].succs.iter().copied().collect();
            if succs != distinct {
                return invalid(format!(
                    "{fname}: branch {} targets differ from the successors of block {}",
                    br.id, br.block
                ));
            }
            if ix.branch_at.insert(br.block, i).is_some() {
                return invalid(format!("{fname}: block {} carries two branches", br.block));
            }
        }

        for (i, lp) in self.loops.iter().enumerate() {
            if !ix.block_pos.contains_key(&lp.header) {
                return invalid(format!("{fname}: loop {} header {} missing", lp.loop_id, lp.header));
            }
            for e in &lp.exits {
                if !ix.block_pos.contains_key(e) {
                    return invalid(format!("{fname}: loop {} exit {e} missing", lp.loop_id));
                }
                ix.exit_blocks.insert(*e);
            }
            if ix.header_of.insert(lp.header, i).is_some() {
                return invalid(format!("{fname}: block {} heads two loops", lp.header));
            }
            if ix.branch_at.contains_key(&lp.header) {
                return invalid(format!("{fname}: loop header {} cannot also be a branch", lp.header));
            }
            ix.loop_bodies.push(self.loop_body(&ix, lp));
        }
        for (lp, body) in self.loops.iter().zip(&ix.loop_bodies) {
            let h = &self.block(lp.header).succs;
            let inside = h.iter().filter(|s| body.contains(s)).count();
            if h.len() != 2 || inside != 1 {
                return invalid(format!(
                    "{fname}: loop {} header must have one successor inside the loop and one outside",
                    lp.loop_id
                ));
            }
            for &b in body {
                for s in &self.block(b).succs {
                    if !body.contains(s) && !lp.exits.contains(s) {
                        return invalid(format!(
                            "{fname}: edge {b}->{s} leaves loop {} through an undeclared exit",
                            lp.loop_id
                        ));
                    }
                }
                for &p in &ix.preds[ix.block_pos[&b]] {
                    let pid = self.blocks[p].id;
                    if b != lp.header && !body.contains(&pid) {
                        return invalid(format!(
                            "{fname}: edge {pid}->{b} enters loop {} below its header",
                            lp.loop_id
                        ));
                    }
                }
            }
        }
        for b in &self.blocks {
            let depth = ix.loop_bodies.iter().filter(|body| body.contains(&b.id)).count() as u32;
            ix.block_depth.insert(b.id, depth);
            if b.succs.len() > 1 && !ix.branch_at.contains_key(&b.id) && !ix.header_of.contains_key(&b.id) {
                return invalid(format!(
                    "{fname}: block {} has {} successors but no branch",
                    b.id,
                    b.succs.len()
                ));
            }
        }
        for lp in &self.loops {
            if ix.block_depth[&lp.header] != lp.depth {
                return invalid(format!(
                    "{fname}: loop {} declares depth {} but is nested {} deep",
                    lp.loop_id, lp.depth, ix.block_depth[&lp.header]
                ));
            }
        }
        for (i, cs) in self.call_sites.iter().enumerate() {
            if !ix.block_pos.contains_key(&cs.block) {
                return invalid(format!("{fname}: call site {} in unknown block {}", cs.site, cs.block));
            }
            ix.sites_in.entry(cs.block).or_default().push(i);
        }
        Ok(ix)
    }

    /// Blocks forward-reachable from the header and backward-reachable to it,
    /// neither search crossing a declared exit.
    fn loop_body(&self, ix: &FunctionIndex, lp: &Loop) -> BTreeSet<BlockId> {
        let blocked: HashSet<BlockId> = lp.exits.iter().copied().collect();
        let mut fwd = HashSet::new();
        let mut stack = vec![lp.header];
        while let Some(b) = stack.pop() {
            if blocked.contains(&b) || !fwd.insert(b) {
                continue;
            }
            stack.extend(self.block(b).succs.iter().copied());
        }
        let mut bwd = HashSet::new();
        let mut stack = vec![lp.header];
        while let Some(b) = stack.pop() {
            if blocked.contains(&b) || !bwd.insert(b) {
                continue;
            }
            for &p in &ix.preds[ix.block_pos[&b]] {
                stack.push(self.blocks[p].id);
            }
        }
        fwd.intersection(&bwd).copied().collect()
    }

    /// Panics if `id` is not a block of this function.
    pub fn block(&self, id: BlockId) -> &BasicBlock {
        self.blocks
            .iter()
            .find(|b| b.id == id)
            .unwrap_or_else(|| panic!("no block {id} in {}", self.name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProgramDoc {
    functions: Vec<FunctionDef>,
    #[serde(default)]
    call_edges: Vec<CallEdge>,
}

/// A validated program. Construct with [`parse_program_graph`] or
/// [`ProgramGraph::new`].
#[derive(Debug, Clone)]
pub struct ProgramGraph {
    pub functions: Vec<FunctionDef>,
    pub call_edges: Vec<CallEdge>,
    index: Vec<FunctionIndex>,
    site_owner: HashMap<SiteId, (FuncId, usize)>,
}

impl PartialEq for ProgramGraph {
    fn eq(&self, other: &Self) -> bool {
        self.functions == other.functions && self.call_edges == other.call_edges
    }
}

pub fn parse_program_graph(text: &str) -> Result<ProgramGraph, IrError> {
    let doc: ProgramDoc = serde_json::from_str(text)?;
    ProgramGraph::new(doc.functions, doc.call_edges)
}

impl ProgramGraph {
    /// Validates and indexes a program. Function ids must be dense and in
    /// order (`functions[i].id == i`); function 0 is the entry.
    pub fn new(functions: Vec<FunctionDef>, call_edges: Vec<CallEdge>) -> Result<Self, IrError> {
        if functions.is_empty() {
            return invalid("program has no functions");
        }
        for (i, f) in functions.iter().enumerate() {
            if f.id as usize != i {
                if f.id == ENTRY {
                    return invalid(format!("duplicate entry function at position {i}"));
                }
                return invalid(format!(
                    "function ids must be dense and ordered: position {i} holds id {}",
                    f.id
                ));
            }
        }
        let n = functions.len() as u32;
        let index = functions
            .iter()
            .map(FunctionDef::build_index)
            .collect::<Result<Vec<_>, _>>()?;

        let mut site_owner = HashMap::new();
        let mut loop_ids = HashSet::new();
        for f in &functions {
            for l in &f.loops {
                if !loop_ids.insert(l.loop_id) {
                    return invalid(format!("loop id {} used twice", l.loop_id));
                }
            }
            for (i, cs) in f.call_sites.iter().enumerate() {
                if cs.callee >= n {
                    return invalid(format!("call site {} targets unknown function {}", cs.site, cs.callee));
                }
                if site_owner.insert(cs.site, (f.id, i)).is_some() {
                    return invalid(format!("call site id {} used twice", cs.site));
                }
            }
        }

        let mut seen_sites = HashSet::new();
        for e in &call_edges {
            if e.caller >= n || e.callee >= n {
                return invalid(format!(
                    "call edge {}->{} references a missing function",
                    e.caller, e.callee
                ));
            }
            let Some(&(owner, i)) = site_owner.get(&e.site) else {
                return invalid(format!("call edge references unknown site {}", e.site));
            };
            let cs = &functions[owner as usize].call_sites[i];
            if owner != e.caller || cs.callee != e.callee {
                return invalid(format!("call edge for site {} disagrees with the call site", e.site));
            }
            let depth = index[owner as usize].block_depth[&cs.block];
            if depth != e.depth {
                return invalid(format!(
                    "call edge for site {} records loop depth {} but the block is nested {depth} deep",
                    e.site, e.depth
                ));
            }
            if !seen_sites.insert(e.site) {
                return invalid(format!("two call edges for site {}", e.site));
            }
        }
        if let Some(missing) = site_owner.keys().find(|s| !seen_sites.contains(s)) {
            return invalid(format!("call site {missing} has no call edge"));
        }

        Ok(Self {
            functions,
            call_edges,
            index,
            site_owner,
        })
    }

    /// Builds a graph from function definitions alone, deriving the call
    /// edges (and their loop depths) from the call sites.
    pub fn from_functions(functions: Vec<FunctionDef>) -> Result<Self, IrError> {
        let index = functions
            .iter()
            .map(FunctionDef::build_index)
            .collect::<Result<Vec<_>, _>>()?;
        let call_edges = functions
            .iter()
            .zip(&index)
            .flat_map(|(f, ix)| {
                f.call_sites.iter().map(move |cs| CallEdge {
                    caller: f.id,
                    callee: cs.callee,
                    depth: ix.block_depth[&cs.block],
                    site: cs.site,
                })
            })
            .collect();
        Self::new(functions, call_edges)
    }

    pub fn to_json(&self) -> String {
        let doc = ProgramDoc {
            functions: self.functions.clone(),
            call_edges: self.call_edges.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("program serializes")
    }

    /// Content fingerprint used as the program id of traces and codebooks.
    pub fn fingerprint(&self) -> String {
        let doc = ProgramDoc {
            functions: self.functions.clone(),
            call_edges: self.call_edges.clone(),
        };
        let bytes = serde_json::to_vec(&doc).expect("program serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn func(&self, id: FuncId) -> &FunctionDef {
        &self.functions[id as usize]
    }

    pub(crate) fn index(&self, id: FuncId) -> &FunctionIndex {
        &self.index[id as usize]
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn max_func_id(&self) -> FuncId {
        self.functions.len() as FuncId - 1
    }

    /// Callee ids per function, ascending and deduplicated.
    pub fn callees(&self) -> Vec<Vec<FuncId>> {
        let mut adj: Vec<BTreeSet<FuncId>> = vec![BTreeSet::new(); self.len()];
        for e in &self.call_edges {
            adj[e.caller as usize].insert(e.callee);
        }
        adj.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// The function owning `site`, with the site's position in its list.
    pub fn site(&self, site: SiteId) -> Option<(FuncId, &CallSite)> {
        self.site_owner
            .get(&site)
            .map(|&(f, i)| (f, &self.functions[f as usize].call_sites[i]))
    }

    /// Loop-nesting depth of every block of `f`.
    pub fn block_depths(&self, f: FuncId) -> BTreeMap<BlockId, u32> {
        self.index(f).block_depth.iter().map(|(&b, &d)| (b, d)).collect()
    }
}

impl FunctionIndex {
    pub(crate) fn pos(&self, b: BlockId) -> usize {
        self.block_pos[&b]
    }

    pub(crate) fn branch_at(&self, b: BlockId) -> Option<usize> {
        self.branch_at.get(&b).copied()
    }

    pub(crate) fn loop_headed_by(&self, b: BlockId) -> Option<usize> {
        self.header_of.get(&b).copied()
    }

    pub(crate) fn loop_body(&self, l: usize) -> &BTreeSet<BlockId> {
        &self.loop_bodies[l]
    }

    pub(crate) fn is_loop_exit(&self, b: BlockId) -> bool {
        self.exit_blocks.contains(&b)
    }

    /// Indices into `call_sites` for the sites in `b`, in execution order.
    pub(crate) fn sites_in(&self, b: BlockId) -> &[usize] {
        self.sites_in.get(&b).map(Vec::as_slice).unwrap_or(&[])
    }
}
