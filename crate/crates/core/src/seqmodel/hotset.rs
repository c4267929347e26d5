use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::vocab::Token;
use crate::ir::FuncId;
use crate::region::PathCodebook;
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HotClass {
    #[default]
    FrequencyHot,
    RuntimeHotspot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotSetPrediction {
    /// Descending by count, ties by ascending id.
    pub ranked: Vec<(FuncId, u64)>,
    pub k: usize,
    pub class: HotClass,
    pub coverage: f64,
}

impl HotSetPrediction {
    pub fn top(&self) -> Vec<FuncId> {
        self.ranked.iter().take(self.k).map(|&(f, _)| f).collect()
    }

    /// Functions whose count reaches `t`.
    pub fn above(&self, t: u64) -> Vec<FuncId> {
        self.ranked.iter().filter(|&&(_, c)| c >= t).map(|&(f, _)| f).collect()
    }
}

/// Raw call counts of a token sequence. Chain bodies count `repeat` times,
/// path codes count as their bodies, augmentation groups and loop markers
/// count nothing. Unknown codes are skipped. The sequence may come from a
/// model, so unbalanced markers are tolerated.
pub fn call_counts(seq: &[Token], cb: &PathCodebook) -> BTreeMap<FuncId, u64> {
    let mut counts = BTreeMap::new();
    let mut mult = 1u64;
    let mut in_aug = false;
    let mut add = |f: FuncId, n: u64| *counts.entry(f).or_insert(0u64) += n;
    for &t in seq {
        match t {
            Token::AugBegin => in_aug = true,
            Token::AugEnd => in_aug = false,
            _ if in_aug => {}
            Token::Chain(r) => mult = r,
            Token::ChainEnd => mult = 1,
            Token::Call(f) => add(f, mult),
            Token::Code(c) => {
                for &f in cb.body(c).unwrap_or(&[]) {
                    add(f, mult);
                }
            }
            Token::LoopEnter(_) | Token::LoopExit(_) => {}
        }
    }
    counts
}

pub fn trace_counts(t: &Trace, cb: &PathCodebook) -> BTreeMap<FuncId, u64> {
    let toks: Vec<Token> = t.events.iter().map(|&e| Token::from(e)).collect();
    call_counts(&toks, cb)
}

pub fn rank(counts: &BTreeMap<FuncId, u64>) -> Vec<(FuncId, u64)> {
    let mut r: Vec<(FuncId, u64)> = counts.iter().map(|(&f, &c)| (f, c)).collect();
    r.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    r
}

pub fn hot_set_from_counts(counts: &BTreeMap<FuncId, u64>, k: usize, class: HotClass) -> HotSetPrediction {
    let ranked = rank(counts);
    let total: u64 = ranked.iter().map(|r| r.1).sum();
    let top: u64 = ranked.iter().take(k).map(|r| r.1).sum();
    HotSetPrediction {
        ranked,
        k,
        class,
        coverage: if total == 0 { 0.0 } else { top as f64 / total as f64 },
    }
}

pub fn hot_set(seq: &[Token], cb: &PathCodebook, k: usize, class: HotClass) -> HotSetPrediction {
    hot_set_from_counts(&call_counts(seq, cb), k, class)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub k: usize,
    pub predicted: Vec<FuncId>,
    pub actual: Vec<FuncId>,
    /// `|top-k predicted ∩ top-k actual| / k`.
    pub overlap: f64,
    /// Share of actual calls that go to the predicted top-k.
    pub coverage: f64,
}

/// Compares a prediction with a ground-truth trace (raw or compacted; path
/// codes resolve through `cb`).
pub fn evaluate(pred: &HotSetPrediction, truth: &Trace, cb: &PathCodebook, k: usize) -> Evaluation {
    let counts = trace_counts(truth, cb);
    let actual: Vec<FuncId> = rank(&counts).into_iter().take(k).map(|r| r.0).collect();
    let predicted: Vec<FuncId> = pred.ranked.iter().take(k).map(|r| r.0).collect();
    let a: BTreeSet<_> = actual.iter().collect();
    let hits = predicted.iter().filter(|f| a.contains(f)).count();
    let total: u64 = counts.values().sum();
    let covered: u64 = predicted.iter().map(|f| counts.get(f).copied().unwrap_or(0)).sum();
    Evaluation {
        k,
        overlap: if k == 0 { 0.0 } else { hits as f64 / k as f64 },
        coverage: if total == 0 { 0.0 } else { covered as f64 / total as f64 },
        predicted,
        actual,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::CodeEntry;
    use crate::trace::TraceEvent::*;

    fn cb() -> PathCodebook {
        PathCodebook {
            program_id: "p".into(),
            code_base: 1012,
            entries: vec![CodeEntry {
                code: 1013,
                body: vec![11, 12],
            }],
        }
    }

    #[test]
    fn counts_expand_chains_and_codes() {
        let seq = [
            Token::Call(0),
            Token::Chain(20),
            Token::Call(10),
            Token::Code(1013),
            Token::ChainEnd,
            Token::Call(9),
            Token::AugBegin,
            Token::Call(8),
            Token::AugEnd,
        ];
        let c = call_counts(&seq, &cb());
        assert_eq!(c, BTreeMap::from([(0, 1), (9, 1), (10, 20), (11, 20), (12, 20)]));
        let h = hot_set(&seq, &cb(), 3, HotClass::FrequencyHot);
        assert_eq!(h.top(), vec![10, 11, 12]);
        assert!((h.coverage - 60.0 / 62.0).abs() < 1e-12);
        assert_eq!(h.above(2), vec![10, 11, 12]);
    }

    #[test]
    fn coverage_edge_cases() {
        let seq: Vec<Token> = (0..4).map(Token::Call).collect();
        let h = hot_set(&seq, &cb(), 1, HotClass::RuntimeHotspot);
        assert_eq!(h.coverage, 0.25);
        assert_eq!(hot_set(&seq, &cb(), 9, HotClass::FrequencyHot).coverage, 1.0);
        assert_eq!(hot_set(&[], &cb(), 3, HotClass::FrequencyHot).coverage, 0.0);
    }

    #[test]
    fn evaluation_against_truth() {
        let truth = Trace::new("p", "big", vec![Call(0), Call(1), Call(1), Call(2), Call(2), Call(2), PathCode(1013)]);
        let pred = hot_set(&[Token::Call(2), Token::Call(2), Token::Call(5)], &cb(), 2, HotClass::FrequencyHot);
        let e = evaluate(&pred, &truth, &cb(), 2);
        assert_eq!(e.actual, vec![2, 1]);
        assert_eq!(e.predicted, vec![2, 5]);
        assert_eq!(e.overlap, 0.5);
        assert!((e.coverage - 3.0 / 8.0).abs() < 1e-12);
    }
}
