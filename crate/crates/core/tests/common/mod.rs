//! Brute-force oracles and acceptance checks shared by the test targets.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use callcast::compaction::{compact_stream, expand};
use callcast::dynamis::{
    emit_profile, extract_artifacts, parse_profile, run_dynamis, ArtifactOptions, ClientError, CountScheme, DynamisConfig,
    HeuristicClient, LlmClient, LlmResponse, MockClient,
};
use callcast::dynamis::response::RankedFunction;
use callcast::ir::{
    control_dependence, interprocedural_loop_depth, parse_program_graph, post_dominators, recursion_closure, BlockId,
    BranchId, ControlDepMap, DepKey, FuncId, FunctionDef, LoopId, ProgramGraph, ENTRY,
};
use callcast::pipeline::{front_end, run_pipeline, PipelineConfig};
use callcast::region::{apply_codebook, decode_codebook, derive_codebook, derive_with_runs};
use callcast::seqmodel::{Rnn, Token, Vocab};
use callcast::synth::{random_cfg, random_program, random_script, SynthParams};
use callcast::trace::{execute_with_sites, Decider, DecisionScript, ExecError, Limits, Trace, TraceEvent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

pub fn lbm() -> ProgramGraph {
    parse_program_graph(&fixture("lbm.json")).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- graphs

fn succs(f: &FunctionDef) -> HashMap<BlockId, Vec<BlockId>> {
    f.blocks.iter().map(|b| (b.id, b.succs.clone())).collect()
}

/// Can `v` reach the exit without passing through `avoid`?
fn reaches_exit_avoiding(f: &FunctionDef, v: BlockId, avoid: BlockId) -> bool {
    let s = succs(f);
    let mut seen = HashSet::new();
    let mut stack = vec![v];
    while let Some(b) = stack.pop() {
        if b == avoid || !seen.insert(b) {
            continue;
        }
        if b == f.exit {
            return true;
        }
        stack.extend(&s[&b]);
    }
    false
}

/// Every (p, v) with p post-dominating v, by path search.
pub fn brute_postdom(f: &FunctionDef) -> BTreeSet<(BlockId, BlockId)> {
    let mut out = BTreeSet::new();
    for v in &f.blocks {
        for p in &f.blocks {
            if p.id == v.id || !reaches_exit_avoiding(f, v.id, p.id) {
                out.insert((p.id, v.id));
            }
        }
    }
    out
}

/// Dependence key of each call site: among branches (outside the call's
/// block) whose targets are split into post-dominated and not, the nearest
/// one walking backwards, keyed by its first post-dominated target.
pub fn brute_cdep(f: &FunctionDef) -> ControlDepMap {
    let pd = brute_postdom(f);
    let mut preds: HashMap<BlockId, Vec<BlockId>> = HashMap::new();
    for b in &f.blocks {
        for &s in &b.succs {
            preds.entry(s).or_default().push(b.id);
        }
    }
    let mut out = ControlDepMap::new();
    for cs in &f.call_sites {
        let mut dist: HashMap<BlockId, usize> = HashMap::new();
        let mut q = VecDeque::from([(cs.block, 0usize)]);
        while let Some((b, d)) = q.pop_front() {
            if dist.contains_key(&b) {
                continue;
            }
            dist.insert(b, d);
            for &p in preds.get(&b).into_iter().flatten() {
                q.push_back((p, d + 1));
            }
        }
        let mut best: Option<(usize, BranchId, u32)> = None;
        for br in &f.branches {
            if br.block == cs.block {
                continue;
            }
            let hit: Vec<bool> = br.targets.iter().map(|&t| pd.contains(&(cs.block, t))).collect();
            if hit.iter().all(|&h| h) || !hit.iter().any(|&h| h) {
                continue;
            }
            let target = hit.iter().position(|&h| h).unwrap() as u32;
            let d = dist.get(&br.block).copied().unwrap_or(usize::MAX);
            if best.is_none_or(|(bd, bid, _)| (d, br.id) < (bd, bid)) {
                best = Some((d, br.id, target));
            }
        }
        out.insert(
            cs.site,
            best.map_or(DepKey::Independent, |(_, branch, target)| DepKey::On { branch, target }),
        );
    }
    out
}

/// Transitive closure, Warshall style.
pub fn brute_closure(g: &ProgramGraph) -> Vec<Vec<bool>> {
    let n = g.len();
    let mut m = vec![vec![false; n]; n];
    for e in &g.call_edges {
        m[e.caller as usize][e.callee as usize] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if m[i][k] {
                for j in 0..n {
                    if m[k][j] {
                        m[i][j] = true;
                    }
                }
            }
        }
    }
    m
}

/// Best summed loop depth over call walks from the entry ending at each
/// function, each call edge counted at most once per walk. On acyclic graphs
/// walks are paths and get enumerated one by one; otherwise the search runs
/// over (function, used edges) states. `None` when the search is too large.
pub fn brute_loop_depth(g: &ProgramGraph) -> Option<Vec<Option<u32>>> {
    let edges = &g.call_edges;
    let mut best: Vec<Option<u32>> = vec![None; g.len()];
    let mut note = |f: FuncId, sum: u32| {
        let b = &mut best[f as usize];
        *b = Some(b.map_or(sum, |x| x.max(sum)));
    };
    let cyclic = brute_closure(g).iter().enumerate().any(|(i, row)| row[i]);
    if !cyclic {
        let mut stack = vec![(ENTRY, 0u32)];
        let mut paths = 0usize;
        while let Some((f, sum)) = stack.pop() {
            paths += 1;
            if paths > 2_000_000 {
                return None;
            }
            note(f, sum);
            for e in edges.iter().filter(|e| e.caller == f) {
                stack.push((e.callee, sum + e.depth));
            }
        }
        return Some(best);
    }
    if edges.len() > 16 {
        return None;
    }
    let mut seen: HashSet<(FuncId, u32)> = HashSet::new();
    let mut stack = vec![(ENTRY, 0u32)];
    while let Some((f, used)) = stack.pop() {
        if !seen.insert((f, used)) {
            continue;
        }
        let sum: u32 = (0..edges.len()).filter(|i| used >> i & 1 == 1).map(|i| edges[i].depth).sum();
        note(f, sum);
        for (i, e) in edges.iter().enumerate() {
            if e.caller == f {
                stack.push((e.callee, used | 1 << i));
            }
        }
    }
    Some(best)
}

/// Checks closure and recursion always, loop depth when the oracle can
/// afford it. Returns whether loop depth was checked.
pub fn check_analyses(g: &ProgramGraph) -> Result<bool, String> {
    let cl = brute_closure(g);
    let info = recursion_closure(g);
    for f in 0..g.len() {
        let want: BTreeSet<FuncId> = (0..g.len()).filter(|&j| cl[f][j]).map(|j| j as FuncId).collect();
        if info.closure[&(f as FuncId)] != want {
            return Err(format!("closure of {f}"));
        }
        if info.recursive.contains(&(f as FuncId)) != cl[f][f] {
            return Err(format!("recursion flag of {f}"));
        }
    }
    if let Some(want) = brute_loop_depth(g) {
        let got = interprocedural_loop_depth(g);
        for (f, w) in want.iter().enumerate() {
            let ok = match w {
                Some(d) => got.depth[f] == *d && !got.unreachable.contains(&(f as FuncId)),
                None => got.depth[f] == 0 && got.unreachable.contains(&(f as FuncId)),
            };
            if !ok {
                return Err(format!("loop depth of {f}: want {w:?}, got {}", got.depth[f]));
            }
        }
        return Ok(true);
    }
    Ok(false)
}

pub fn check_cfg(f: &FunctionDef) -> Result<(), String> {
    let pdt = post_dominators(f).map_err(|e| e.to_string())?;
    let want = brute_postdom(f);
    for v in &f.blocks {
        for p in &f.blocks {
            if pdt.post_dominates(p.id, v.id) != want.contains(&(p.id, v.id)) {
                return Err(format!("post-dominance {} over {}", p.id, v.id));
            }
        }
    }
    if control_dependence(f, &pdt) != brute_cdep(f) {
        return Err("control dependence".into());
    }
    Ok(())
}

pub fn random_analysis_instance(seed: u64) -> ProgramGraph {
    let mut r = rng(seed);
    let p = if seed.is_multiple_of(2) {
        SynthParams::default()
    } else {
        SynthParams {
            max_funcs: 7,
            max_stmts: 3,
            p_recursion: 0.5,
            ..Default::default()
        }
    };
    random_program(&mut r, &p)
}

pub fn random_cfg_instance(seed: u64) -> FunctionDef {
    let mut r = rng(seed);
    let n = r.gen_range(1..=12);
    let sites = r.gen_range(0..5);
    random_cfg(&mut r, n, 0.35, sites)
}

// ------------------------------------------------------------- compaction

/// Longest substring with two non-overlapping occurrences; among windows of
/// that length, the one with most greedy occurrences, then the earliest.
pub fn brute_longest_repeat(s: &[u32]) -> Option<(Vec<u32>, Vec<usize>)> {
    let n = s.len();
    for len in (1..=n / 2).rev() {
        let mut best: Option<(Vec<u32>, Vec<usize>)> = None;
        for i in 0..=n - len {
            let w = &s[i..i + len];
            let mut occ = Vec::new();
            let mut j = 0;
            while j + len <= n {
                if &s[j..j + len] == w {
                    occ.push(j);
                    j += len;
                } else {
                    j += 1;
                }
            }
            if occ.len() >= 2 && best.as_ref().is_none_or(|(_, b)| occ.len() > b.len() || (occ.len() == b.len() && occ[0] < b[0])) {
                best = Some((w.to_vec(), occ));
            }
        }
        if best.is_some() {
            return best;
        }
    }
    None
}

pub fn small_limits() -> Limits {
    Limits {
        max_calls: 10_000,
        max_steps: 200_000,
        ..Limits::default()
    }
}

/// A random graph and a script whose trace stays within `small_limits`.
pub fn random_pair(seed: u64) -> (ProgramGraph, DecisionScript, Trace) {
    let mut r = rng(seed);
    let p = SynthParams {
        p_recursion: 0.1,
        ..Default::default()
    };
    loop {
        let g = random_program(&mut r, &p);
        for max_trips in [64, 16, 4, 1] {
            let s = random_script(&mut r, &g, 6, max_trips);
            if let Ok(t) = s.run(&g, &small_limits()) {
                return (g, s, t);
            }
        }
    }
}

pub fn check_lossless(t: &Trace) -> Result<(), String> {
    let c = compact_stream(t).map_err(|e| e.to_string())?;
    let back = expand(&c).map_err(|e| e.to_string())?;
    if back.calls() != t.calls() {
        return Err("expansion differs".into());
    }
    if c.token_count != t.token_count {
        return Err("token count changed".into());
    }
    Ok(())
}

/// One codebook per graph, ten scripts: each trace survives
/// compact, encode, decode and expand, and re-deriving gives the same bytes.
pub fn check_input_consistency(seed: u64) -> Result<(), String> {
    let (g, _, _) = random_pair(seed);
    let cb = derive_codebook(&g);
    let bytes = cb.to_json();
    let mut r = rng(seed ^ 0x5eed);
    for i in 0..10 {
        let s = random_script(&mut r, &g, 6, 1 + i % 6);
        let Ok(t) = s.run(&g, &small_limits()) else { continue };
        let c = compact_stream(&t).map_err(|e| e.to_string())?;
        let enc = apply_codebook(&cb, &c).map_err(|e| e.to_string())?;
        let dec = decode_codebook(&cb, &enc).map_err(|e| e.to_string())?;
        if dec != c {
            return Err(format!("script {i}: decode differs"));
        }
        if expand(&dec).map_err(|e| e.to_string())?.calls() != t.calls() {
            return Err(format!("script {i}: expansion differs"));
        }
        if derive_codebook(&g).to_json() != bytes {
            return Err("re-derivation differs".into());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- lemma 1

/// Walks the decision tree of a program depth-first. Decisions past `cap`
/// take outcome 0 (zero trips); loop trip counts range over `0..=max_trips`.
pub struct Explorer {
    prefix: Vec<usize>,
    taken: Vec<(usize, usize)>,
    cap: usize,
    max_trips: u64,
}

impl Explorer {
    pub fn new(cap: usize, max_trips: u64) -> Self {
        Self {
            prefix: Vec::new(),
            taken: Vec::new(),
            cap,
            max_trips,
        }
    }

    fn choose(&mut self, arity: usize) -> usize {
        let i = self.taken.len();
        let arity = if i >= self.cap { 1 } else { arity };
        let c = self.prefix.get(i).copied().unwrap_or(0);
        self.taken.push((c, arity));
        c
    }

    /// Moves to the next unexplored path; false when the tree is done.
    pub fn advance(&mut self) -> bool {
        let mut t = std::mem::take(&mut self.taken);
        while let Some((c, a)) = t.pop() {
            if c + 1 < a {
                self.prefix = t.iter().map(|x| x.0).chain([c + 1]).collect();
                return true;
            }
        }
        false
    }
}

impl Decider for Explorer {
    fn branch(&mut self, _: FuncId, _: BranchId, arity: usize) -> Result<usize, ExecError> {
        Ok(self.choose(arity))
    }

    fn trips(&mut self, _: FuncId, _: LoopId) -> Result<u64, ExecError> {
        Ok(self.choose(self.max_trips as usize + 1) as u64)
    }
}

/// Runs every path of the decision tree and checks that each executed run
/// start is followed by its full body. Returns the number of executions.
pub fn check_lemma(g: &ProgramGraph, cap: usize, max_runs: usize) -> Result<usize, String> {
    let (cb, runs) = derive_with_runs(g);
    let by_site: HashMap<u32, &Vec<FuncId>> = runs.iter().map(|r| (r.site, &r.body)).collect();
    let mut ex = Explorer::new(cap, 2);
    let mut n = 0;
    loop {
        let (t, sites) = execute_with_sites(g, &mut ex, &small_limits()).map_err(|e| e.to_string())?;
        n += 1;
        for (i, s) in sites.iter().enumerate() {
            let Some(body) = s.and_then(|s| by_site.get(&s)) else { continue };
            let got = &t.events[i..(i + body.len()).min(t.events.len())];
            let want: Vec<TraceEvent> = body.iter().map(|&f| TraceEvent::Call(f)).collect();
            if got != want.as_slice() {
                return Err(format!("body {body:?} split at event {i}: {got:?}"));
            }
        }
        // The encoded trace decodes back to the raw one.
        let c = compact_stream(&t).map_err(|e| e.to_string())?;
        let enc = apply_codebook(&cb, &c).map_err(|e| e.to_string())?;
        if decode_codebook(&cb, &enc).map_err(|e| e.to_string())? != c {
            return Err("decode differs".into());
        }
        if !ex.advance() {
            return Ok(n);
        }
        if n >= max_runs {
            return Err(format!("decision tree larger than {max_runs} paths"));
        }
    }
}

pub fn lemma_instance(seed: u64) -> ProgramGraph {
    let mut r = rng(seed);
    let p = SynthParams {
        max_funcs: 6,
        max_stmts: 4,
        max_branches: 4,
        max_loops: 1,
        ..Default::default()
    };
    random_program(&mut r, &p)
}

// ------------------------------------------------------------------ model

/// Worst relative error per block between analytic and central-difference
/// gradients of a vocab-8, H-16 f64 model.
pub fn gradient_errors() -> Vec<f64> {
    let mut r = rng(11);
    let mut m: Rnn<f64> = Rnn::random(Vocab::new((0..8).map(Token::Call)), 16, &mut r);
    // Non-zero biases so every block has a generic gradient.
    for (i, b) in m.blocks[3].iter_mut().enumerate() {
        *b = 0.05 * ((i % 5) as f64 - 1.0);
    }
    for (i, b) in m.blocks[4].iter_mut().enumerate() {
        *b = 0.1 * (i as f64).sin();
    }
    let ids = [0usize, 3, 7, 1, 1, 5, 2, 6, 4, 0, 3, 2];
    let (_, g) = m.loss_and_grads(&ids);
    let eps = 1e-5;
    (0..5)
        .map(|b| {
            let (mut diff, mut scale) = (0.0f64, 0.0f64);
            for i in 0..m.blocks[b].len() {
                let w = m.blocks[b][i];
                m.blocks[b][i] = w + eps;
                let up = m.sequence_loss(&ids);
                m.blocks[b][i] = w - eps;
                let down = m.sequence_loss(&ids);
                m.blocks[b][i] = w;
                let num = (up - down) / (2.0 * eps);
                diff += (num - g.0[b][i]).powi(2);
                scale += num.powi(2).max(g.0[b][i].powi(2));
            }
            if scale == 0.0 {
                f64::INFINITY
            } else {
                diff.sqrt() / scale.sqrt()
            }
        })
        .collect()
}

/// Default-hyperparameter pipeline on the lbm fixture, scored against the
/// held-out script. Returns (coverage, top-3).
pub fn lbm_hot_set(seed: u64) -> Result<(f64, Vec<FuncId>), String> {
    let g = lbm();
    let small = DecisionScript::from_json(&fixture("lbm_small.json")).unwrap();
    let large = DecisionScript::from_json(&fixture("lbm_large.json")).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.train.seed = seed;
    let run = run_pipeline(&g, &[small], Some(&large), &cfg).map_err(|e| e.to_string())?;
    if run.report.sizes.raw_tokens != 75 {
        return Err(format!("small trace has {} calls", run.report.sizes.raw_tokens));
    }
    let e = run.report.evaluation.unwrap();
    Ok((e.coverage, e.predicted))
}

// ------------------------------------------------------------ compression

/// Program whose main runs one loop calling 1, 2, 3.
pub fn loop3() -> ProgramGraph {
    let doc = serde_json::json!({
        "functions": [
            {"id": 0, "name": "main", "entry": 0, "exit": 3,
             "blocks": [{"id": 0, "succs": [1]}, {"id": 1, "succs": [2, 3]}, {"id": 2, "succs": [1]}, {"id": 3}],
             "loops": [{"header": 1, "exits": [3], "loop_id": 0, "depth": 1}],
             "call_sites": [{"site": 0, "block": 2, "callee": 1}, {"site": 1, "block": 2, "callee": 2},
                            {"site": 2, "block": 2, "callee": 3}]},
            {"id": 1, "name": "a", "entry": 0, "exit": 0, "blocks": [{"id": 0}]},
            {"id": 2, "name": "b", "entry": 0, "exit": 0, "blocks": [{"id": 0}]},
            {"id": 3, "name": "c", "entry": 0, "exit": 0, "blocks": [{"id": 0}]}
        ],
        "call_edges": [
            {"caller": 0, "callee": 1, "depth": 1, "site": 0},
            {"caller": 0, "callee": 2, "depth": 1, "site": 1},
            {"caller": 0, "callee": 3, "depth": 1, "site": 2}
        ]
    });
    parse_program_graph(&doc.to_string()).unwrap()
}

/// Compression ratio of `loop3` at about `calls` calls, cross-checked by
/// decoding and expanding back to the raw calls.
pub fn loop_ratio(calls: u64) -> Result<f64, String> {
    let g = loop3();
    let s = DecisionScript {
        loop_fallback: Some((calls - 1) / 3),
        ..Default::default()
    };
    let fe = front_end(&g, &[s], callcast::compaction::DEFAULT_WINDOW, &Limits::default(), None).map_err(|e| e.to_string())?;
    let dec = decode_codebook(&fe.codebook, &fe.encoded).map_err(|e| e.to_string())?;
    let back = expand(&dec).map_err(|e| e.to_string())?;
    if back.calls() != fe.raw.calls() {
        return Err("expansion differs".into());
    }
    let (raw, _, enc) = fe.sizes();
    let recomputed = back.calls().len() as f64 / enc as f64;
    if recomputed != fe.compression_ratio() || raw != back.calls().len() as u64 {
        return Err("ratio does not match the expansion".into());
    }
    Ok(fe.compression_ratio())
}

// ---------------------------------------------------------------- dynamis

struct Recording<'a> {
    inner: &'a dyn LlmClient,
    mock: MockClient,
}

impl LlmClient for Recording<'_> {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let r = self.inner.complete(prompt)?;
        self.mock.record(prompt, &r).unwrap();
        Ok(r)
    }
}

/// Records replies for the lbm prompts, then replays them twice through the
/// mock client. Returns the two serialized runs and the last run.
pub fn dynamis_replay(dir: &std::path::Path) -> Result<(String, String, callcast::dynamis::DynamisRun), String> {
    let g = lbm();
    let b = extract_artifacts(
        &g,
        &ArtifactOptions {
            program_name: "lbm".into(),
            domain_hint: None,
            obfuscate: false,
        },
    );
    let cfg = DynamisConfig::default();
    let input = "3000 time steps on a 100x100x130 grid, lid-driven cavity";
    let heur = HeuristicClient::new(&b);
    let rec = Recording {
        inner: &heur,
        mock: MockClient::new(dir),
    };
    run_dynamis(&b, input, &cfg, &rec).map_err(|e| e.to_string())?;
    let mock = MockClient::new(dir);
    let ser = |r: &callcast::dynamis::DynamisRun| serde_json::to_string(r).unwrap() + &r.profile.to_text();
    let a = run_dynamis(&b, input, &cfg, &mock).map_err(|e| e.to_string())?;
    let c = run_dynamis(&b, input, &cfg, &mock).map_err(|e| e.to_string())?;
    Ok((ser(&a), ser(&c), c))
}

pub fn profile_round_trip(k: usize) -> Result<(), String> {
    let names: Vec<String> = (0..k).map(|i| format!("kernel_{i}")).collect();
    let resp = LlmResponse {
        ranked: names
            .iter()
            .enumerate()
            .map(|(i, n)| RankedFunction {
                name: n.clone(),
                rank: i as u32 + 1,
                rationale: None,
            })
            .collect(),
        domain: None,
        raw: String::new(),
        unknown: vec![],
    };
    for scheme in [CountScheme::default(), CountScheme::Linear { base: 10 }] {
        let p = emit_profile(&resp, scheme).map_err(|e| e.to_string())?;
        let back = parse_profile(&p.to_text()).map_err(|e| e.to_string())?;
        if back != p || back.ranking() != names {
            return Err(format!("k = {k}: round trip differs"));
        }
    }
    Ok(())
}
