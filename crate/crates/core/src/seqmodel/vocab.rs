use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::trace::TraceEvent;

/// One symbol of the model's language. Chain priorities are dropped; the
/// repeat count is part of the symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Call(u32),
    Code(u32),
    Chain(u64),
    ChainEnd,
    AugBegin,
    AugEnd,
    LoopEnter(u32),
    LoopExit(u32),
}

impl From<TraceEvent> for Token {
    fn from(e: TraceEvent) -> Self {
        match e {
            TraceEvent::Call(f) => Token::Call(f),
            TraceEvent::PathCode(c) => Token::Code(c),
            TraceEvent::ChainBegin { repeat, .. } => Token::Chain(repeat),
            TraceEvent::ChainEnd => Token::ChainEnd,
            TraceEvent::AugBegin => Token::AugBegin,
            TraceEvent::AugEnd => Token::AugEnd,
            TraceEvent::LoopEnter(l) => Token::LoopEnter(l),
            TraceEvent::LoopExit(l) => Token::LoopExit(l),
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Call(x) => write!(f, "f{x}"),
            Token::Code(x) => write!(f, "p{x}"),
            Token::Chain(r) => write!(f, "x{r}"),
            Token::ChainEnd => f.write_str("x/"),
            Token::AugBegin => f.write_str("aug"),
            Token::AugEnd => f.write_str("aug/"),
            Token::LoopEnter(l) => write!(f, "l{l}"),
            Token::LoopExit(l) => write!(f, "l/{l}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not a token: {0:?}")]
pub struct BadToken(pub String);

impl FromStr for Token {
    type Err = BadToken;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BadToken(s.to_string());
        match s {
            "x/" => return Ok(Token::ChainEnd),
            "aug" => return Ok(Token::AugBegin),
            "aug/" => return Ok(Token::AugEnd),
            _ => {}
        }
        if let Some(n) = s.strip_prefix("l/") {
            return n.parse().map(Token::LoopExit).map_err(|_| bad());
        }
        let (head, n) = s.split_at(s.char_indices().nth(1).map_or(s.len(), |(i, _)| i));
        match head {
            "f" => n.parse().map(Token::Call).map_err(|_| bad()),
            "p" => n.parse().map(Token::Code).map_err(|_| bad()),
            "x" => n.parse().map(Token::Chain).map_err(|_| bad()),
            "l" => n.parse().map(Token::LoopEnter).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

/// Sorted token list with a reverse index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Token>,
    index: HashMap<Token, usize>,
}

impl Vocab {
    pub fn new(tokens: impl IntoIterator<Item = Token>) -> Self {
        let tokens: Vec<Token> = tokens.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let index = tokens.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, t: Token) -> Option<usize> {
        self.index.get(&t).copied()
    }

    pub fn token(&self, i: usize) -> Token {
        self.tokens[i]
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }
}
