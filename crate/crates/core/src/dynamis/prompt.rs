use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::artifacts::ArtifactBundle;
use crate::seqmodel::HotClass;

pub const TEMPLATE_VERSION: &str = "v1";

const PHASE1: &str = include_str!("../../templates/v1/phase1.txt");
const PHASE2: &str = include_str!("../../templates/v1/phase2.txt");
const PHASE3: &str = include_str!("../../templates/v1/phase3.txt");
const REPLY_FORMAT: &str = include_str!("../../templates/v1/reply_format.txt");

/// Characters per token for budget estimates.
pub const CHARS_PER_TOKEN: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("phase must be 1, 2 or 3, got {0}")]
    BadPhase(u8),
    #[error("k must be at least 1")]
    BadK,
    #[error("template placeholder {{{{{0}}}}} has no value")]
    Unfilled(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub phase: u8,
    pub template_version: String,
    pub rendered_text: String,
    pub input_descriptor: String,
    pub k: usize,
    pub target_class: HotClass,
    /// Depth-table rows dropped to fit the token budget.
    pub trimmed_rows: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptOptions {
    /// Domain reported by an earlier phase.
    pub domain: Option<String>,
    /// Token budget; the depth table loses its shallowest rows first.
    pub budget_tokens: Option<usize>,
}

pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(CHARS_PER_TOKEN)
}

/// Estimated share of a `window`-token context the prompt uses.
pub fn context_budget(p: &PromptBundle, window: usize) -> f64 {
    estimate_tokens(&p.rendered_text) as f64 / window as f64
}

pub fn request_phrase(k: usize, class: HotClass) -> String {
    match class {
        HotClass::FrequencyHot => format!("{k} most frequently executed functions"),
        HotClass::RuntimeHotspot => {
            format!("{k} runtime hotspot functions (each taking at least 5% of total execution time)")
        }
    }
}

fn render(template: &str, vars: &[(&str, String)]) -> Result<String, TemplateError> {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    if let Some(i) = out.find("{{") {
        let rest = &out[i + 2..];
        let name = rest.split("}}").next().unwrap_or(rest);
        return Err(TemplateError::Unfilled(name.to_string()));
    }
    Ok(out)
}

fn list(items: &[String]) -> String {
    if items.is_empty() {
        "  (none)".into()
    } else {
        items.iter().map(|s| format!("  {s}")).collect::<Vec<_>>().join("\n")
    }
}

fn mapping<'a>(m: impl Iterator<Item = (&'a String, &'a Vec<String>)>) -> String {
    let rows: Vec<String> = m
        .map(|(k, v)| if v.is_empty() { format!("{k}:") } else { format!("{k}: {}", v.join(", ")) })
        .collect();
    list(&rows)
}

/// One row per function and one per call site inside a loop, deepest
/// first. Each row carries its depth for trimming.
fn depth_rows(b: &ArtifactBundle) -> Vec<(u32, String)> {
    let mut funcs: Vec<(u32, String)> = b
        .inter_depths
        .iter()
        .map(|(n, d)| (*d, format!("function {n}: interprocedural depth {d}")))
        .collect();
    let mut sites: Vec<(u32, String)> = b
        .intra_depths
        .iter()
        .filter(|e| e.depth > 0)
        .map(|e| (e.depth, format!("call {} -> {}: loop depth {}", e.caller, e.callee, e.depth)))
        .collect();
    funcs.append(&mut sites);
    funcs.sort_by(|a, b| b.0.cmp(&a.0));
    funcs
}

pub fn build_prompt(
    b: &ArtifactBundle,
    phase: u8,
    k: usize,
    class: HotClass,
    input: &str,
    opts: &PromptOptions,
) -> Result<PromptBundle, TemplateError> {
    if k == 0 {
        return Err(TemplateError::BadK);
    }
    let template = match phase {
        1 => PHASE1,
        2 => PHASE2,
        3 => PHASE3,
        p => return Err(TemplateError::BadPhase(p)),
    };
    let mut vars = vec![
        ("program", b.program_name.clone()),
        ("input", input.to_string()),
        ("request", request_phrase(k, class)),
        ("reply_format", REPLY_FORMAT.trim_end().to_string()),
        (
            "hint",
            b.domain_hint
                .as_ref()
                .map(|h| format!("Hint: {h}\n"))
                .unwrap_or_default(),
        ),
        (
            "domain",
            opts.domain
                .as_ref()
                .or(b.domain_hint.as_ref())
                .map(|d| format!("Domain: {d}\n"))
                .unwrap_or_default(),
        ),
    ];
    if phase >= 2 {
        let recursion = if b.recursive_set.is_empty() {
            list(&[])
        } else {
            mapping(b.recursive_closure.iter())
        };
        vars.extend([
            ("universe", list(&b.function_universe)),
            ("call_graph", mapping(b.call_graph.iter())),
            ("recursion", recursion),
        ]);
    }
    let mut rows = if phase >= 3 { depth_rows(b) } else { vec![] };
    let mut trimmed = 0;
    loop {
        let mut v = vars.clone();
        if phase >= 3 {
            let mut table = String::new();
            for (_, r) in &rows {
                writeln!(table, "  {r}").unwrap();
            }
            if rows.is_empty() {
                table.push_str("  (none)");
            }
            v.push(("loop_functions", mapping(b.loop_called.iter())));
            v.push(("depth_table", table.trim_end().to_string()));
        }
        let text = render(template, &v)?;
        let over = opts.budget_tokens.is_some_and(|cap| estimate_tokens(&text) > cap);
        if over && !rows.is_empty() {
            rows.pop();
            trimmed += 1;
            continue;
        }
        return Ok(PromptBundle {
            phase,
            template_version: TEMPLATE_VERSION.into(),
            rendered_text: text,
            input_descriptor: input.to_string(),
            k,
            target_class: class,
            trimmed_rows: trimmed,
        });
    }
}
