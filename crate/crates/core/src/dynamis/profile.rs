//! Sample-profile text output.
//!
//! One record per function: a `name:total:head` header line and a single
//! indented body line `0: total`.

use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::response::LlmResponse;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProfileError {
    #[error("ranking has no known functions")]
    EmptyRanking,
    #[error("counter scheme does not give strictly decreasing positive counts for k = {0}")]
    BadScheme(usize),
    #[error("line {0}: {1}")]
    Parse(usize, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CountScheme {
    /// Rank `i` of `k` gets `base * ratio^(k - i)`.
    Geometric { base: f64, ratio: f64 },
    /// Rank `i` of `k` gets `base * (k - i + 1)`.
    Linear { base: u64 },
}

impl Default for CountScheme {
    fn default() -> Self {
        CountScheme::Geometric { base: 1e6, ratio: 2.0 }
    }
}

impl CountScheme {
    /// Counts for ranks `1..=k`.
    pub fn counts(&self, k: usize) -> Result<Vec<u64>, ProfileError> {
        let raw: Vec<f64> = (1..=k)
            .map(|i| match *self {
                CountScheme::Geometric { base, ratio } => base * ratio.powi((k - i) as i32),
                CountScheme::Linear { base } => base as f64 * (k - i + 1) as f64,
            })
            .collect();
        if raw.iter().any(|c| !c.is_finite() || *c < 1.0 || *c >= u64::MAX as f64) {
            return Err(ProfileError::BadScheme(k));
        }
        let counts: Vec<u64> = raw.iter().map(|c| c.round() as u64).collect();
        if counts.windows(2).any(|w| w[0] <= w[1]) {
            return Err(ProfileError::BadScheme(k));
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub name: String,
    pub total: u64,
    pub head: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProfileFile {
    pub entries: Vec<ProfileEntry>,
}

/// Turns a ranking into counters. Names flagged as unknown are left out.
pub fn emit_profile(r: &LlmResponse, scheme: CountScheme) -> Result<ProfileFile, ProfileError> {
    let names: Vec<&str> = r
        .ranked
        .iter()
        .filter(|x| !r.unknown.contains(&x.name))
        .map(|x| x.name.as_str())
        .collect();
    if names.is_empty() {
        return Err(ProfileError::EmptyRanking);
    }
    let counts = scheme.counts(names.len())?;
    Ok(ProfileFile {
        entries: names
            .into_iter()
            .zip(counts)
            .map(|(n, c)| ProfileEntry {
                name: n.to_string(),
                total: c,
                head: c,
            })
            .collect(),
    })
}

impl ProfileFile {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            writeln!(out, "{}:{}:{}", e.name, e.total, e.head).unwrap();
            writeln!(out, " 0: {}", e.total).unwrap();
        }
        out
    }

    /// Names from hottest to coldest.
    pub fn ranking(&self) -> Vec<String> {
        let mut e: Vec<&ProfileEntry> = self.entries.iter().collect();
        e.sort_by(|a, b| b.total.cmp(&a.total));
        e.into_iter().map(|x| x.name.clone()).collect()
    }
}

pub fn parse_profile(text: &str) -> Result<ProfileFile, ProfileError> {
    let mut entries: Vec<ProfileEntry> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let num = |s: &str| s.trim().parse::<u64>().map_err(|_| ProfileError::Parse(n, format!("bad count {s:?}")));
        if line.starts_with(char::is_whitespace) {
            if entries.is_empty() {
                return Err(ProfileError::Parse(n, "body line before any function".into()));
            }
            let (off, count) = line
                .trim()
                .split_once(':')
                .ok_or_else(|| ProfileError::Parse(n, "body line needs offset: count".into()))?;
            if off.trim().parse::<u32>().is_err() {
                return Err(ProfileError::Parse(n, format!("bad offset {off:?}")));
            }
            num(count)?;
        } else {
            let mut parts = line.rsplitn(3, ':');
            let (head, total, name) = (parts.next(), parts.next(), parts.next());
            let (Some(head), Some(total), Some(name)) = (head, total, name) else {
                return Err(ProfileError::Parse(n, "header needs name:total:head".into()));
            };
            if name.is_empty() {
                return Err(ProfileError::Parse(n, "empty function name".into()));
            }
            entries.push(ProfileEntry {
                name: name.to_string(),
                total: num(total)?,
                head: num(head)?,
            });
        }
    }
    Ok(ProfileFile { entries })
}

#[cfg(test)]
mod tests {
    use super::super::response::RankedFunction;
    use super::*;

    fn resp(names: &[&str], unknown: &[&str]) -> LlmResponse {
        LlmResponse {
            ranked: names
                .iter()
                .enumerate()
                .map(|(i, n)| RankedFunction {
                    name: n.to_string(),
                    rank: i as u32 + 1,
                    rationale: None,
                })
                .collect(),
            domain: None,
            raw: String::new(),
            unknown: unknown.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn geometric_counts() {
        let p = emit_profile(&resp(&["A", "B", "C"], &[]), CountScheme::default()).unwrap();
        let totals: Vec<u64> = p.entries.iter().map(|e| e.total).collect();
        assert_eq!(totals, [4_000_000, 2_000_000, 1_000_000]);
        assert_eq!(p.to_text(), "A:4000000:4000000\n 0: 4000000\nB:2000000:2000000\n 0: 2000000\nC:1000000:1000000\n 0: 1000000\n");
        let one = emit_profile(&resp(&["A"], &[]), CountScheme::default()).unwrap();
        assert_eq!(one.entries[0].total, 1_000_000);
    }

    #[test]
    fn linear_and_bad_schemes() {
        assert_eq!(CountScheme::Linear { base: 10 }.counts(3).unwrap(), [30, 20, 10]);
        assert!(CountScheme::Geometric { base: 1.0, ratio: 1.0 }.counts(2).is_err());
        assert!(CountScheme::Geometric { base: 1e6, ratio: 2.0 }.counts(80).is_err());
    }

    #[test]
    fn unknown_names_are_dropped() {
        let p = emit_profile(&resp(&["A", "ghost", "B"], &["ghost"]), CountScheme::default()).unwrap();
        assert_eq!(p.ranking(), ["A", "B"]);
        assert_eq!(emit_profile(&resp(&["ghost"], &["ghost"]), CountScheme::default()), Err(ProfileError::EmptyRanking));
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let p = emit_profile(&resp(&["ns::f", "g"], &[]), CountScheme::default()).unwrap();
        assert_eq!(parse_profile(&p.to_text()).unwrap(), p);
        assert!(matches!(parse_profile(" 0: 5\n"), Err(ProfileError::Parse(1, _))));
        assert!(matches!(parse_profile("f:x:1\n"), Err(ProfileError::Parse(1, _))));
        assert!(matches!(parse_profile("f:1:1\n 0 5\n"), Err(ProfileError::Parse(2, _))));
    }
}
