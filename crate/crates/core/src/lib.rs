//! Call-profile toolkit: traces, compaction, path codes, sequence models and
//! LLM-assisted hot-function prediction over a JSON program representation.

pub mod ir;
pub mod trace;
pub mod synth;
pub mod compaction;
pub mod region;
pub mod augment;
pub mod seqmodel;
pub mod dynamis;
pub mod pipeline;
