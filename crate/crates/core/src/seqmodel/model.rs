//! Precision-erased model handle and the `RNNM` model file.
//!
//! Layout: `RNNM`, version byte, precision byte (bytes per float), hidden
//! width and vocabulary size as little-endian u32, one LEB128-length string
//! per token, then the five weight blocks row-major in little-endian floats.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::rnn::{Real, Rnn, BLOCK_NAMES};
use super::vocab::{Token, Vocab};
use super::SeqError;

const MAGIC: &[u8; 4] = b"RNNM";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RnnModel {
    F32(Rnn<f32>),
    F64(Rnn<f64>),
}

macro_rules! each {
    ($self:expr, $m:ident => $e:expr) => {
        match $self {
            RnnModel::F32($m) => $e,
            RnnModel::F64($m) => $e,
        }
    };
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockInfo {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelInfo {
    pub precision: Precision,
    pub hidden: usize,
    pub vocab_size: usize,
    pub vocab: Vec<String>,
    pub blocks: Vec<BlockInfo>,
}

fn block_bytes<T: Real>(b: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(b.len() * T::BYTES);
    b.iter().for_each(|&x| x.put(&mut out));
    out
}

impl RnnModel {
    pub fn precision(&self) -> Precision {
        match self {
            RnnModel::F32(_) => Precision::F32,
            RnnModel::F64(_) => Precision::F64,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        each!(self, m => &m.vocab)
    }

    pub fn hidden(&self) -> usize {
        each!(self, m => m.hidden)
    }

    /// One step with the state kept in f64 at the boundary.
    pub fn step(&self, tok: Token, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>), SeqError> {
        fn go<T: Real>(m: &Rnn<T>, tok: Token, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>), SeqError> {
            let h: Vec<T> = h.iter().map(|&x| T::of(x)).collect();
            let (p, h2) = m.step(tok, &h)?;
            Ok((p.iter().map(|x| x.f64()).collect(), h2.iter().map(|x| x.f64()).collect()))
        }
        each!(self, m => go(m, tok, h))
    }

    pub fn generate(&self, start: Token, max_steps: usize) -> Result<Vec<Token>, SeqError> {
        each!(self, m => m.generate(start, max_steps))
    }

    pub fn sample<R: rand::Rng>(&self, start: Token, max_steps: usize, temperature: f64, rng: &mut R) -> Result<Vec<Token>, SeqError> {
        each!(self, m => m.sample(start, max_steps, temperature, rng))
    }

    pub fn sequence_loss(&self, tokens: &[Token]) -> Result<f64, SeqError> {
        each!(self, m => {
            let ids = tokens.iter().map(|&t| m.token_id(t)).collect::<Result<Vec<_>, _>>()?;
            Ok(m.sequence_loss(&ids))
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        fn go<T: Real>(m: &Rnn<T>, out: &mut Vec<u8>) {
            out.push(T::BYTES as u8);
            out.extend_from_slice(&(m.hidden as u32).to_le_bytes());
            out.extend_from_slice(&(m.vocab.len() as u32).to_le_bytes());
            for t in m.vocab.tokens() {
                let s = t.to_string();
                leb128::write::unsigned(out, s.len() as u64).unwrap();
                out.extend_from_slice(s.as_bytes());
            }
            for b in &m.blocks {
                out.extend(block_bytes(b));
            }
        }
        let mut out = MAGIC.to_vec();
        out.push(VERSION);
        each!(self, m => go(m, &mut out));
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, SeqError> {
        let bad = |s: &str| SeqError::ModelFile(s.to_string());
        if buf.len() < 14 || &buf[..4] != MAGIC {
            return Err(bad("not a model file"));
        }
        if buf[4] != VERSION {
            return Err(bad(&format!("unsupported version {}", buf[4])));
        }
        let width = buf[5];
        let hidden = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        let v = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
        let mut rest = &buf[14..];
        let mut tokens = Vec::with_capacity(v.min(1 << 16));
        for _ in 0..v {
            let n = leb128::read::unsigned(&mut rest).map_err(|_| bad("truncated vocabulary"))? as usize;
            if rest.len() < n {
                return Err(bad("truncated vocabulary"));
            }
            let s = std::str::from_utf8(&rest[..n]).map_err(|_| bad("vocabulary is not UTF-8"))?;
            tokens.push(s.parse::<Token>().map_err(|e| bad(&e.to_string()))?);
            rest = &rest[n..];
        }
        let vocab = Vocab::new(tokens);
        if vocab.len() != v || v < 2 || hidden == 0 {
            return Err(bad("bad dimensions or repeated tokens"));
        }
        fn load<T: Real>(vocab: Vocab, hidden: usize, mut rest: &[u8]) -> Result<Rnn<T>, SeqError> {
            let mut m: Rnn<T> = Rnn::zeros(vocab, hidden);
            for b in m.blocks.iter_mut() {
                let n = b.len() * T::BYTES;
                if rest.len() < n {
                    return Err(SeqError::ModelFile("truncated weights".into()));
                }
                for (x, c) in b.iter_mut().zip(rest[..n].chunks_exact(T::BYTES)) {
                    *x = T::get(c);
                }
                rest = &rest[n..];
            }
            if !rest.is_empty() {
                return Err(SeqError::ModelFile("trailing bytes".into()));
            }
            if !m.is_finite() {
                return Err(SeqError::ModelFile("non-finite weights".into()));
            }
            Ok(m)
        }
        match width {
            4 => Ok(RnnModel::F32(load(vocab, hidden, rest)?)),
            8 => Ok(RnnModel::F64(load(vocab, hidden, rest)?)),
            w => Err(bad(&format!("unsupported precision {w}"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SeqError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SeqError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn inspect(&self) -> ModelInfo {
        fn go<T: Real>(m: &Rnn<T>, precision: Precision) -> ModelInfo {
            ModelInfo {
                precision,
                hidden: m.hidden,
                vocab_size: m.vocab.len(),
                vocab: m.vocab.tokens().iter().map(|t| t.to_string()).collect(),
                blocks: (0..5)
                    .map(|i| {
                        let (rows, cols) = m.shape(i);
                        BlockInfo {
                            name: BLOCK_NAMES[i],
                            rows,
                            cols,
                            sha256: hex::encode(Sha256::digest(block_bytes(&m.blocks[i]))),
                        }
                    })
                    .collect(),
            }
        }
        let p = self.precision();
        each!(self, m => go(m, p))
    }
}
