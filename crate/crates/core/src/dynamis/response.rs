use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("reply has no fenced JSON array")]
    NoJson,
    #[error("ranking entry {0} is malformed: {1}")]
    BadEntry(usize, String),
    #[error("ranks must be 1..{0} without gaps or repeats")]
    BadRanks(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedFunction {
    pub name: String,
    pub rank: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    /// Sorted by rank.
    pub ranked: Vec<RankedFunction>,
    pub domain: Option<String>,
    pub raw: String,
    /// Ranked names missing from the function universe.
    pub unknown: Vec<String>,
}

/// Contents of each ``` fenced block, in order.
fn fenced_blocks(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Option<String> = None;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            match cur.take() {
                Some(b) => out.push(b),
                None => cur = Some(String::new()),
            }
        } else if let Some(b) = cur.as_mut() {
            b.push_str(line);
            b.push('\n');
        }
    }
    out
}

fn domain_line(text: &str) -> Option<String> {
    text.lines().find_map(|l| {
        let l = l.trim();
        let (head, rest) = l.split_once(':')?;
        (head.eq_ignore_ascii_case("domain") && !rest.trim().is_empty()).then(|| rest.trim().to_string())
    })
}

/// Parses a reply. Only the first fenced block holding a JSON array counts;
/// names outside `universe` are kept and listed in `unknown`.
pub fn parse_response(raw: &str, universe: &[String]) -> Result<LlmResponse, ParseError> {
    let arr = fenced_blocks(raw)
        .into_iter()
        .find_map(|b| match serde_json::from_str::<serde_json::Value>(&b) {
            Ok(serde_json::Value::Array(a)) => Some(a),
            _ => None,
        })
        .ok_or(ParseError::NoJson)?;
    let mut ranked = arr
        .into_iter()
        .enumerate()
        .map(|(i, v)| serde_json::from_value::<RankedFunction>(v).map_err(|e| ParseError::BadEntry(i, e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    ranked.sort_by_key(|r| r.rank);
    if ranked.iter().enumerate().any(|(i, r)| r.rank as usize != i + 1) {
        return Err(ParseError::BadRanks(ranked.len()));
    }
    let known: BTreeSet<&str> = universe.iter().map(String::as_str).collect();
    let unknown = ranked
        .iter()
        .filter(|r| !known.contains(r.name.as_str()))
        .map(|r| r.name.clone())
        .collect();
    Ok(LlmResponse {
        ranked,
        domain: domain_line(raw),
        raw: raw.to_string(),
        unknown,
    })
}

/// A reply in the format the prompts ask for.
pub fn format_reply(domain: &str, names: &[String]) -> String {
    let entries: Vec<RankedFunction> = names
        .iter()
        .enumerate()
        .map(|(i, n)| RankedFunction {
            name: n.clone(),
            rank: i as u32 + 1,
            rationale: None,
        })
        .collect();
    format!(
        "Domain: {domain}\n```json\n{}\n```\n",
        serde_json::to_string_pretty(&entries).expect("serializes")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uni() -> Vec<String> {
        ["main", "collide", "swap"].map(String::from).to_vec()
    }

    #[test]
    fn parses_fenced_ranking() {
        let raw = "Some words.\nDomain: fluid dynamics\n```text\nnot json\n```\n```json\n[{\"name\":\"swap\",\"rank\":2},\n {\"name\":\"collide\",\"rank\":1,\"rationale\":\"inner sweep\"},\n {\"name\":\"ghost\",\"rank\":3}]\n```\n";
        let r = parse_response(raw, &uni()).unwrap();
        assert_eq!(r.domain.as_deref(), Some("fluid dynamics"));
        let names: Vec<_> = r.ranked.iter().map(|x| x.name.as_str()).collect();
        assert_eq!(names, ["collide", "swap", "ghost"]);
        assert_eq!(r.unknown, ["ghost"]);
    }

    #[test]
    fn rejects_bad_replies() {
        assert_eq!(parse_response("no fence here", &uni()), Err(ParseError::NoJson));
        assert_eq!(parse_response("```json\n{\"a\":1}\n```", &uni()), Err(ParseError::NoJson));
        let gap = "```json\n[{\"name\":\"main\",\"rank\":1},{\"name\":\"swap\",\"rank\":3}]\n```";
        assert_eq!(parse_response(gap, &uni()), Err(ParseError::BadRanks(2)));
        let bad = "```json\n[{\"name\":\"main\"}]\n```";
        assert!(matches!(parse_response(bad, &uni()), Err(ParseError::BadEntry(0, _))));
    }

    #[test]
    fn formatted_reply_parses_back() {
        let r = parse_response(&format_reply("x", &uni()), &uni()).unwrap();
        assert_eq!(r.ranked.iter().map(|x| x.name.clone()).collect::<Vec<_>>(), uni());
        assert!(r.unknown.is_empty());
    }
}
