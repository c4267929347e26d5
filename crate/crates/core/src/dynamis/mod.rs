//! Profile-free hot-function prediction: static artifacts go into phased
//! prompts, an LLM (or a stand-in) ranks functions, and the ranking becomes
//! a sample profile.

pub mod artifacts;
pub mod client;
pub mod profile;
pub mod prompt;
pub mod response;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use artifacts::{extract_artifacts, ArtifactBundle, ArtifactOptions};
pub use client::{prompt_hash, ClientError, HttpClient, LlmClient, MockClient};
pub use profile::{emit_profile, parse_profile, CountScheme, ProfileError, ProfileFile};
pub use prompt::{build_prompt, context_budget, PromptBundle, PromptOptions, TemplateError};
pub use response::{format_reply, parse_response, LlmResponse, ParseError};

use crate::seqmodel::HotClass;

#[derive(Debug, Error)]
pub enum DynamisError {
    #[error("phase {0} prompt: {1}")]
    Template(u8, TemplateError),
    #[error("phase {0} query: {1}")]
    Client(u8, ClientError),
    #[error("phase {0} reply: {1}")]
    Parse(u8, ParseError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Sends a prompt and parses the reply, keeping at most `p.k` entries.
pub fn query(client: &dyn LlmClient, p: &PromptBundle, universe: &[String]) -> Result<LlmResponse, DynamisError> {
    let raw = client.complete(&p.rendered_text).map_err(|e| DynamisError::Client(p.phase, e))?;
    let mut r = parse_response(&raw, universe).map_err(|e| DynamisError::Parse(p.phase, e))?;
    r.ranked.truncate(p.k);
    r.unknown.retain(|n| r.ranked.iter().any(|x| &x.name == n));
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamisRun {
    pub prompts: Vec<PromptBundle>,
    pub responses: Vec<LlmResponse>,
    pub profile: ProfileFile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamisConfig {
    /// Last phase to run; phases run in order starting from 1.
    pub phase: u8,
    pub k: usize,
    pub class: HotClass,
    pub scheme: CountScheme,
    pub budget_tokens: Option<usize>,
}

impl Default for DynamisConfig {
    fn default() -> Self {
        Self {
            phase: 3,
            k: 15,
            class: HotClass::FrequencyHot,
            scheme: CountScheme::default(),
            budget_tokens: None,
        }
    }
}

/// Runs phases `1..=cfg.phase`, each seeing the domain reported by the one
/// before, and turns the last ranking into a profile.
pub fn run_dynamis(
    b: &ArtifactBundle,
    input: &str,
    cfg: &DynamisConfig,
    client: &dyn LlmClient,
) -> Result<DynamisRun, DynamisError> {
    let mut prompts = Vec::new();
    let mut responses: Vec<LlmResponse> = Vec::new();
    for phase in 1..=cfg.phase {
        let opts = PromptOptions {
            domain: responses.last().and_then(|r| r.domain.clone()),
            budget_tokens: cfg.budget_tokens,
        };
        let p = build_prompt(b, phase, cfg.k, cfg.class, input, &opts).map_err(|e| DynamisError::Template(phase, e))?;
        responses.push(query(client, &p, &b.function_universe)?);
        prompts.push(p);
    }
    if prompts.is_empty() {
        return Err(DynamisError::Template(cfg.phase, TemplateError::BadPhase(cfg.phase)));
    }
    let profile = emit_profile(responses.last().unwrap(), cfg.scheme)?;
    Ok(DynamisRun {
        prompts,
        responses,
        profile,
    })
}

/// Offline stand-in for a model: ranks functions by interprocedural loop
/// depth, then by how many loop call sites reach them, then by id. It
/// ignores the prompt text.
#[derive(Debug, Clone)]
pub struct HeuristicClient {
    reply: String,
}

impl HeuristicClient {
    pub fn new(b: &ArtifactBundle) -> Self {
        let mut loop_sites: BTreeMap<&str, u32> = BTreeMap::new();
        for e in &b.intra_depths {
            *loop_sites.entry(e.callee.as_str()).or_default() += e.depth;
        }
        let mut order: Vec<(usize, &String, u32)> = b
            .inter_depths
            .iter()
            .enumerate()
            .map(|(i, (n, d))| (i, n, *d))
            .collect();
        order.sort_by(|a, b| {
            b.2.cmp(&a.2)
                .then(loop_sites.get(b.1.as_str()).cmp(&loop_sites.get(a.1.as_str())))
                .then(a.0.cmp(&b.0))
        });
        let names: Vec<String> = order.into_iter().map(|(_, n, _)| n.clone()).collect();
        let domain = b.domain_hint.clone().unwrap_or_else(|| "unknown".into());
        Self {
            reply: format_reply(&domain, &names),
        }
    }
}

impl LlmClient for HeuristicClient {
    fn complete(&self, _prompt: &str) -> Result<String, ClientError> {
        Ok(self.reply.clone())
    }
}
