//! Control dependence of call sites on branch targets.
//!
//! For every (call site, branch) pair a bit-vector is built with one bit per
//! branch target; bit `i` is set when the call's block post-dominates target
//! `i`. A vector that is all zeros or all ones means the branch cannot decide
//! whether the call runs. Anything else makes the call control dependent on
//! the branch, keyed by the lowest set bit.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{BlockId, BranchId, FunctionDef, PostDomTree, SiteId};

/// Which branch target a call site hangs off, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DepKey {
    Independent,
    On { branch: BranchId, target: u32 },
}

impl DepKey {
    /// Compact integer form: 0 for independent, otherwise a packed
    /// `(branch + 1) << 16 | target`.
    pub fn encode(self) -> u64 {
        match self {
            DepKey::Independent => 0,
            DepKey::On { branch, target } => ((branch as u64 + 1) << 16) | target as u64,
        }
    }
}

pub type ControlDepMap = BTreeMap<SiteId, DepKey>;

/// Fixed-width bit set over branch targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetBits {
    words: Vec<u64>,
    len: usize,
}

impl TargetBits {
    fn new(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// XOR against the all-ones pattern and against zero: dependent iff both
    /// are non-zero.
    pub fn is_mixed(&self) -> bool {
        let mut any = false;
        let mut differs_from_ones = false;
        for (w, &word) in self.words.iter().enumerate() {
            let width = (self.len - w * 64).min(64);
            let ones = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
            any |= word != 0;
            differs_from_ones |= (word ^ ones) != 0;
        }
        any && differs_from_ones
    }

    pub fn lowest_set(&self) -> Option<usize> {
        (0..self.len).find(|&i| self.get(i))
    }
}

/// Target bit-vector of a block `call_block` against a branch's targets.
pub fn target_bits(pdt: &PostDomTree, call_block: BlockId, targets: &[BlockId]) -> TargetBits {
    let mut bits = TargetBits::new(targets.len());
    for (i, &t) in targets.iter().enumerate() {
        if pdt.post_dominates(call_block, t) {
            bits.set(i);
        }
    }
    bits
}

pub fn control_dependence(f: &FunctionDef, pdt: &PostDomTree) -> ControlDepMap {
    let mut out = ControlDepMap::new();
    for cs in &f.call_sites {
        let mut candidates = Vec::new();
        for br in &f.branches {
            // The call runs before the decision is made.
            if br.block == cs.block {
                continue;
            }
            let bits = target_bits(pdt, cs.block, &br.targets);
            if bits.is_mixed() {
                let target = bits.lowest_set().expect("mixed vector has a set bit") as u32;
                candidates.push((br.block, br.id, target));
            }
        }
        let key = match candidates.len() {
            0 => DepKey::Independent,
            1 => DepKey::On {
                branch: candidates[0].1,
                target: candidates[0].2,
            },
            _ => {
                // Several branches qualify: take the nearest one walking
                // backwards from the call's block.
                let dist = backward_distances(f, cs.block);
                let &(_, branch, target) = candidates
                    .iter()
                    .min_by_key(|(blk, id, _)| (dist.get(blk).copied().unwrap_or(usize::MAX), *id))
                    .unwrap();
                DepKey::On { branch, target }
            }
        };
        out.insert(cs.site, key);
    }
    out
}

fn backward_distances(f: &FunctionDef, from: BlockId) -> HashMap<BlockId, usize> {
    let mut preds: HashMap<BlockId, Vec<BlockId>> = HashMap::new();
    for b in &f.blocks {
        for &s in &b.succs {
            preds.entry(s).or_default().push(b.id);
        }
    }
    let mut dist = HashMap::new();
    let mut queue = VecDeque::from([(from, 0usize)]);
    while let Some((b, d)) = queue.pop_front() {
        for &p in preds.get(&b).map(Vec::as_slice).unwrap_or(&[]) {
            if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(p) {
                e.insert(d + 1);
                queue.push_back((p, d + 1));
            }
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::tests::block;
    use crate::ir::{post_dominators, Branch, CallSite};

    fn diamond_with_call(call_block: BlockId) -> FunctionDef {
        FunctionDef {
            id: 0,
            name: "f".into(),
            entry: 0,
            exit: 3,
            blocks: vec![block(0, &[1, 2]), block(1, &[3]), block(2, &[3]), block(3, &[])],
            branches: vec![Branch {
                id: 7,
                block: 0,
                targets: vec![1, 2],
            }],
            loops: vec![],
            call_sites: vec![CallSite {
                site: 1,
                block: call_block,
                callee: 1,
            }],
        }
    }

    #[test]
    fn join_block_is_independent() {
        let f = diamond_with_call(3);
        let m = control_dependence(&f, &post_dominators(&f).unwrap());
        assert_eq!(m[&1], DepKey::Independent);
    }

    #[test]
    fn true_arm_depends_on_target_zero() {
        let f = diamond_with_call(1);
        let pdt = post_dominators(&f).unwrap();
        let bits = target_bits(&pdt, 1, &[1, 2]);
        assert!(bits.get(0) && !bits.get(1));
        let m = control_dependence(&f, &pdt);
        assert_eq!(m[&1], DepKey::On { branch: 7, target: 0 });
    }

    #[test]
    fn call_in_branch_block_is_independent() {
        let f = diamond_with_call(0);
        let m = control_dependence(&f, &post_dominators(&f).unwrap());
        assert_eq!(m[&1], DepKey::Independent);
    }

    #[test]
    fn switch_with_two_of_three_targets() {
        // 0 -> {1,2,3}; 1 -> 4; 3 -> 4; 4 -> 5; 2 -> 5
        let f = FunctionDef {
            id: 0,
            name: "s".into(),
            entry: 0,
            exit: 5,
            blocks: vec![
                block(0, &[1, 2, 3]),
                block(1, &[4]),
                block(2, &[5]),
                block(3, &[4]),
                block(4, &[5]),
                block(5, &[]),
            ],
            branches: vec![Branch {
                id: 0,
                block: 0,
                targets: vec![1, 2, 3],
            }],
            loops: vec![],
            call_sites: vec![CallSite {
                site: 9,
                block: 4,
                callee: 0,
            }],
        };
        let pdt = post_dominators(&f).unwrap();
        let bits = target_bits(&pdt, 4, &[1, 2, 3]);
        assert_eq!((bits.get(0), bits.get(1), bits.get(2)), (true, false, true));
        assert!(bits.is_mixed());
        let m = control_dependence(&f, &pdt);
        assert_eq!(m[&9], DepKey::On { branch: 0, target: 0 });
    }

    #[test]
    fn wide_switch_bits() {
        let mut bits = TargetBits::new(70);
        for i in 0..70 {
            bits.set(i);
        }
        assert!(!bits.is_mixed());
        let mut half = TargetBits::new(70);
        half.set(65);
        assert!(half.is_mixed());
        assert_eq!(half.lowest_set(), Some(65));
        assert!(!TargetBits::new(3).is_mixed());
    }

    #[test]
    fn key_encoding() {
        assert_eq!(DepKey::Independent.encode(), 0);
        assert_ne!(DepKey::On { branch: 0, target: 0 }.encode(), 0);
    }
}
