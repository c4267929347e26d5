//! End-to-end front end: trace, compact, encode, augment, train, predict.
//!
//! [`run_pipeline`] returns every intermediate artifact in memory;
//! [`write_artifacts`] lays them out under one directory with fixed names.
//! Wall-clock timings live apart from the report so the report file stays
//! byte-reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment, UnifiedProfile};
use crate::compaction::compact_stream_with;
use crate::ir::ProgramGraph;
use crate::region::{apply_codebook, derive_codebook, PathCodebook};
use crate::seqmodel::{evaluate, hot_set, train, Evaluation, HotClass, HotSetPrediction, RnnModel, Token, TrainConfig, TrainReport};
use crate::trace::{unique_token_fraction, write_trace, DecisionScript, Limits, Magic, Trace};

pub const REPORT_VERSION: u32 = 1;

pub const RAW_FILE: &str = "raw.wpp";
pub const COMPACTED_FILE: &str = "compacted.wpp";
pub const CODEBOOK_FILE: &str = "codebook.json";
pub const ENCODED_FILE: &str = "encoded.wpp";
pub const UNIFIED_FILE: &str = "unified.uprf";
pub const MODEL_FILE: &str = "model.rnnm";
pub const TRAIN_FILE: &str = "train.json";
pub const PREDICTION_FILE: &str = "prediction.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Error)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

fn at<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub k: usize,
    pub class: HotClass,
    pub window: usize,
    pub limits: Limits,
    /// Generation length as a multiple of the training corpus length.
    pub generate_factor: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            k: 3,
            class: HotClass::FrequencyHot,
            window: crate::compaction::DEFAULT_WINDOW,
            limits: Limits::default(),
            generate_factor: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSizes {
    pub raw_tokens: u64,
    pub compacted_events: usize,
    pub encoded_events: usize,
    pub unified_events: usize,
}

impl StageSizes {
    pub fn of(raw: &Trace, compacted: &Trace, encoded: &Trace, unified: &UnifiedProfile) -> Self {
        Self {
            raw_tokens: raw.token_count,
            compacted_events: compacted.events.len(),
            encoded_events: encoded.events.len(),
            unified_events: unified.events().len(),
        }
    }

    /// Raw calls per event of the encoded trace.
    pub fn compression_ratio(&self) -> f64 {
        self.raw_tokens as f64 / self.encoded_events.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub report_version: u32,
    pub program_id: String,
    pub inputs: Vec<String>,
    pub sizes: StageSizes,
    pub compression_ratio: f64,
    pub unique_token_fraction: Option<f64>,
    pub codebook_entries: usize,
    pub augmented_chains: usize,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub predicted_top: Vec<u32>,
    pub predicted_coverage: f64,
    pub evaluation: Option<Evaluation>,
}

impl PipelineReport {
    pub fn to_table(&self, timing: Option<&BTreeMap<String, f64>>) -> String {
        let mut s = String::new();
        let mut row = |k: &str, v: String| {
            let _ = writeln!(s, "{k:<24} {v}");
        };
        row("program", self.program_id.clone());
        row("inputs", self.inputs.join(", "));
        row("raw tokens", self.sizes.raw_tokens.to_string());
        row("compacted events", self.sizes.compacted_events.to_string());
        row("encoded events", self.sizes.encoded_events.to_string());
        row("unified events", self.sizes.unified_events.to_string());
        row("compression ratio", format!("{:.2}", self.compression_ratio));
        row(
            "unique token fraction",
            self.unique_token_fraction.map_or("-".into(), |f| format!("{f:.4}")),
        );
        row("codebook entries", self.codebook_entries.to_string());
        row("augmented chains", self.augmented_chains.to_string());
        row("epochs", self.epochs_run.to_string());
        row("final loss", format!("{:.6}", self.final_loss));
        row("predicted top", format!("{:?}", self.predicted_top));
        row("predicted coverage", format!("{:.4}", self.predicted_coverage));
        if let Some(e) = &self.evaluation {
            row("actual top", format!("{:?}", e.actual));
            row("overlap", format!("{:.4}", e.overlap));
            row("coverage", format!("{:.4}", e.coverage));
        }
        if let Some(t) = timing {
            for (stage, secs) in t {
                row(&format!("time {stage}"), format!("{secs:.3}s"));
            }
        }
        s
    }
}

pub struct PipelineRun {
    pub raw: Trace,
    pub compacted: Trace,
    pub codebook: PathCodebook,
    pub encoded: Trace,
    pub unified: UnifiedProfile,
    pub model: RnnModel,
    pub train: TrainReport,
    pub prediction: HotSetPrediction,
    pub report: PipelineReport,
    /// Seconds per stage.
    pub timing: BTreeMap<String, f64>,
}

/// Traces each script and joins the traces in order.
pub fn trace_scripts(g: &ProgramGraph, scripts: &[DecisionScript], limits: &Limits) -> Result<Trace, PipelineError> {
    let mut events = Vec::new();
    let mut ids = Vec::new();
    for s in scripts {
        let t = s.run(g, limits).map_err(at("trace"))?;
        events.extend(t.events);
        ids.push(t.input_id);
    }
    Ok(Trace::new(g.fingerprint(), ids.join("+"), events))
}

pub struct FrontEnd {
    pub raw: Trace,
    pub compacted: Trace,
    pub codebook: PathCodebook,
    pub encoded: Trace,
}

impl FrontEnd {
    pub fn sizes(&self) -> (u64, usize, usize) {
        (self.raw.token_count, self.compacted.events.len(), self.encoded.events.len())
    }

    pub fn compression_ratio(&self) -> f64 {
        self.raw.token_count as f64 / self.encoded.events.len().max(1) as f64
    }
}

/// Trace, compact and encode. `lap` is called after each stage.
pub fn front_end(
    g: &ProgramGraph,
    scripts: &[DecisionScript],
    window: usize,
    limits: &Limits,
    mut lap: Option<&mut dyn FnMut(&str)>,
) -> Result<FrontEnd, PipelineError> {
    if scripts.is_empty() {
        return Err(at("trace")("no scripts given"));
    }
    let mut tick = |s: &str| {
        if let Some(f) = lap.as_mut() {
            f(s)
        }
    };
    let raw = trace_scripts(g, scripts, limits)?;
    tick("trace");
    let compacted = compact_stream_with(&raw, window).map_err(at("compact"))?;
    tick("compact");
    let codebook = derive_codebook(g);
    let encoded = apply_codebook(&codebook, &compacted).map_err(at("encode"))?;
    tick("encode");
    Ok(FrontEnd {
        raw,
        compacted,
        codebook,
        encoded,
    })
}

/// Greedy continuation from the first corpus token, ranked by call count.
pub fn predict(model: &RnnModel, unified: &UnifiedProfile, cb: &PathCodebook, cfg: &PipelineConfig) -> Result<HotSetPrediction, PipelineError> {
    let events = unified.events();
    let start = Token::from(*events.first().ok_or_else(|| at("predict")("empty profile"))?);
    let mut seq = vec![start];
    seq.extend(
        model
            .generate(start, events.len() * cfg.generate_factor)
            .map_err(at("predict"))?,
    );
    Ok(hot_set(&seq, cb, cfg.k, cfg.class))
}

struct Laps {
    last: Instant,
    times: BTreeMap<String, f64>,
}

impl Laps {
    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.times.insert(stage.to_string(), (now - self.last).as_secs_f64());
        self.last = now;
    }
}

/// Runs every stage. `truth`, when given, is traced and scored against the
/// prediction.
pub fn run_pipeline(
    g: &ProgramGraph,
    scripts: &[DecisionScript],
    truth: Option<&DecisionScript>,
    cfg: &PipelineConfig,
) -> Result<PipelineRun, PipelineError> {
    let mut clock = Laps {
        last: Instant::now(),
        times: BTreeMap::new(),
    };

    let FrontEnd {
        raw,
        compacted,
        codebook,
        encoded,
    } = front_end(g, scripts, cfg.window, &cfg.limits, Some(&mut |stage: &str| clock.lap(stage)))?;
    let unified = augment(g, &codebook, &encoded).map_err(at("augment"))?;
    clock.lap("augment");
    let (model, train_report) = train(&unified, &cfg.train).map_err(at("train"))?;
    clock.lap("train");
    let prediction = predict(&model, &unified, &codebook, cfg)?;
    clock.lap("predict");
    let evaluation = match truth {
        Some(s) => {
            let t = s.run(g, &cfg.limits).map_err(at("evaluate"))?;
            let e = evaluate(&prediction, &t, &codebook, cfg.k);
            clock.lap("evaluate");
            Some(e)
        }
        None => None,
    };

    let sizes = StageSizes::of(&raw, &compacted, &encoded, &unified);
    let report = PipelineReport {
        report_version: REPORT_VERSION,
        program_id: raw.program_id.clone(),
        inputs: scripts.iter().map(DecisionScript::fingerprint).collect(),
        sizes,
        compression_ratio: sizes.compression_ratio(),
        unique_token_fraction: unique_token_fraction(&raw),
        codebook_entries: codebook.entries.len(),
        augmented_chains: unified.augmented_chains.len(),
        epochs_run: train_report.epoch_losses.len(),
        final_loss: train_report.final_loss,
        predicted_top: prediction.top(),
        predicted_coverage: prediction.coverage,
        evaluation,
    };
    Ok(PipelineRun {
        raw,
        compacted,
        codebook,
        encoded,
        unified,
        model,
        train: train_report,
        prediction,
        report,
        timing: clock.times,
    })
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Writes every artifact of `run` under `dir`, which must exist.
pub fn write_artifacts(run: &PipelineRun, dir: &Path) -> Result<(), PipelineError> {
    write_trace(dir.join(RAW_FILE), &run.raw, Magic::Trace).map_err(at("write"))?;
    write_trace(dir.join(COMPACTED_FILE), &run.compacted, Magic::Trace).map_err(at("write"))?;
    std::fs::write(dir.join(CODEBOOK_FILE), run.codebook.to_json()).map_err(at("write"))?;
    write_trace(dir.join(ENCODED_FILE), &run.encoded, Magic::Trace).map_err(at("write"))?;
    write_trace(dir.join(UNIFIED_FILE), &run.unified.to_trace(), Magic::Unified).map_err(at("write"))?;
    run.model.save(dir.join(MODEL_FILE)).map_err(at("write"))?;
    std::fs::write(dir.join(TRAIN_FILE), json(&run.train)).map_err(at("write"))?;
    std::fs::write(dir.join(PREDICTION_FILE), json(&run.prediction)).map_err(at("write"))?;
    if let Some(e) = &run.report.evaluation {
        std::fs::write(dir.join(EVALUATION_FILE), json(e)).map_err(at("write"))?;
    }
    std::fs::write(dir.join(REPORT_FILE), json(&run.report)).map_err(at("write"))?;
    std::fs::write(dir.join(TIMING_FILE), json(&run.timing)).map_err(at("write"))?;
    Ok(())
}
