//! Post-dominator trees.
//!
//! Computed with the iterative "engineered" dominator algorithm of Cooper,
//! Harvey and Kennedy, run on the reverse CFG rooted at the exit block.
//! Blocks are processed in reverse post-order of that reverse graph, so the
//! result only depends on the block and successor ordering of the input.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{BlockId, FunctionDef};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PostDomError {
    #[error("function {function}: block {block} cannot reach the exit")]
    UnreachableExit { function: String, block: BlockId },
}

/// Immediate post-dominator of every block. The exit maps to itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostDomTree {
    exit: BlockId,
    ipdom: BTreeMap<BlockId, BlockId>,
}

impl PostDomTree {
    pub fn exit(&self) -> BlockId {
        self.exit
    }

    pub fn ipdom(&self, b: BlockId) -> BlockId {
        self.ipdom[&b]
    }

    pub fn iter(&self) -> impl Iterator<Item = (BlockId, BlockId)> + '_ {
        self.ipdom.iter().map(|(&b, &p)| (b, p))
    }

    /// Does `p` post-dominate `v`? Reflexive.
    pub fn post_dominates(&self, p: BlockId, v: BlockId) -> bool {
        let mut cur = v;
        loop {
            if cur == p {
                return true;
            }
            if cur == self.exit {
                return false;
            }
            cur = self.ipdom[&cur];
        }
    }

    /// `v`, ipdom(v), ipdom(ipdom(v)), ... ending at the exit.
    pub fn chain(&self, v: BlockId) -> Vec<BlockId> {
        let mut out = vec![v];
        let mut cur = v;
        while cur != self.exit {
            cur = self.ipdom[&cur];
            out.push(cur);
        }
        out
    }
}

pub fn post_dominators(f: &FunctionDef) -> Result<PostDomTree, PostDomError> {
    let n = f.blocks.len();
    let pos_of: BTreeMap<BlockId, usize> = f.blocks.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    let mut preds = vec![Vec::new(); n];
    for (i, b) in f.blocks.iter().enumerate() {
        for s in &b.succs {
            preds[pos_of[s]].push(i);
        }
    }
    let exit = pos_of[&f.exit];

    // Post-order of the reverse graph (edges follow `preds`), iteratively.
    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    let mut stack = vec![(exit, 0usize)];
    visited[exit] = true;
    while let Some((node, next)) = stack.last_mut() {
        let node = *node;
        if let Some(&p) = preds[node].get(*next) {
            *next += 1;
            if !visited[p] {
                visited[p] = true;
                stack.push((p, 0));
            }
        } else {
            order.push(node);
            stack.pop();
        }
    }
    if let Some(i) = visited.iter().position(|v| !v) {
        return Err(PostDomError::UnreachableExit {
            function: f.name.clone(),
            block: f.blocks[i].id,
        });
    }

    // po_num[b] = index in post-order; larger means closer to the root.
    let mut po_num = vec![0usize; n];
    for (i, &b) in order.iter().enumerate() {
        po_num[b] = i;
    }
    const UNDEF: usize = usize::MAX;
    let mut idom = vec![UNDEF; n];
    idom[exit] = exit;
    let intersect = |idom: &[usize], mut a: usize, mut b: usize| {
        while a != b {
            while po_num[a] < po_num[b] {
                a = idom[a];
            }
            while po_num[b] < po_num[a] {
                b = idom[b];
            }
        }
        a
    };
    let mut changed = true;
    while changed {
        changed = false;
        for &b in order.iter().rev() {
            if b == exit {
                continue;
            }
            // In the reverse graph the predecessors of `b` are its CFG successors.
            let mut new = UNDEF;
            for s in &f.blocks[b].succs {
                let s = pos_of[s];
                if idom[s] == UNDEF {
                    continue;
                }
                new = if new == UNDEF { s } else { intersect(&idom, s, new) };
            }
            if idom[b] != new {
                idom[b] = new;
                changed = true;
            }
        }
    }

    let ipdom = (0..n).map(|i| (f.blocks[i].id, f.blocks[idom[i]].id)).collect();
    Ok(PostDomTree { exit: f.exit, ipdom })
}
