//! Binary trace files.
//!
//! Layout: 4-byte magic (`WPPF` for traces, `UPRF` for unified profiles), a
//! version byte, then `program_id` and `input_id` as LEB128 length + UTF-8,
//! `token_count` as little-endian u64, and finally one record per event: a
//! tag byte followed by LEB128 operands.

use std::io::{self, Read};
use std::path::Path;

use thiserror::Error;

use super::{check_nesting, NestingError, Trace, TraceEvent};

pub const VERSION: u8 = 1;

const TAG_CALL: u8 = 1;
const TAG_LOOP_ENTER: u8 = 2;
const TAG_LOOP_EXIT: u8 = 3;
const TAG_CHAIN_BEGIN: u8 = 4;
const TAG_CHAIN_END: u8 = 5;
const TAG_AUG_BEGIN: u8 = 6;
const TAG_AUG_END: u8 = 7;
const TAG_PATH_CODE: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Magic {
    Trace,
    Unified,
}

impl Magic {
    fn bytes(self) -> &'static [u8; 4] {
        match self {
            Magic::Trace => b"WPPF",
            Magic::Unified => b"UPRF",
        }
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("truncated record at byte {0}")]
    Truncated(usize),
    #[error("unknown event tag {tag} at byte {at}")]
    BadTag { tag: u8, at: usize },
    #[error("value out of range at byte {0}")]
    Overflow(usize),
    #[error("header string is not UTF-8")]
    BadUtf8,
    #[error(transparent)]
    Nesting(#[from] NestingError),
}

fn put(out: &mut Vec<u8>, v: u64) {
    leb128::write::unsigned(out, v).expect("writing to a Vec cannot fail");
}

pub fn write_trace_bytes(t: &Trace, magic: Magic) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + t.events.len() * 2);
    out.extend_from_slice(magic.bytes());
    out.push(VERSION);
    for s in [&t.program_id, &t.input_id] {
        put(&mut out, s.len() as u64);
        out.extend_from_slice(s.as_bytes());
    }
    out.extend_from_slice(&t.token_count.to_le_bytes());
    for e in &t.events {
        match *e {
            TraceEvent::Call(f) => {
                out.push(TAG_CALL);
                put(&mut out, f as u64);
            }
            TraceEvent::LoopEnter(l) => {
                out.push(TAG_LOOP_ENTER);
                put(&mut out, l as u64);
            }
            TraceEvent::LoopExit(l) => {
                out.push(TAG_LOOP_EXIT);
                put(&mut out, l as u64);
            }
            TraceEvent::ChainBegin { priority, repeat } => {
                out.push(TAG_CHAIN_BEGIN);
                put(&mut out, priority as u64);
                put(&mut out, repeat);
            }
            TraceEvent::ChainEnd => out.push(TAG_CHAIN_END),
            TraceEvent::AugBegin => out.push(TAG_AUG_BEGIN),
            TraceEvent::AugEnd => out.push(TAG_AUG_END),
            TraceEvent::PathCode(c) => {
                out.push(TAG_PATH_CODE);
                put(&mut out, c as u64);
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn byte(&mut self) -> Result<u8, FormatError> {
        let b = *self.buf.get(self.pos).ok_or(FormatError::Truncated(self.pos))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&[u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(FormatError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn varint(&mut self) -> Result<u64, FormatError> {
        let start = self.pos;
        let mut rest = &self.buf[self.pos..];
        let before = rest.len();
        match leb128::read::unsigned(&mut rest) {
            Ok(v) => {
                self.pos += before - rest.len();
                Ok(v)
            }
            Err(leb128::read::Error::Overflow) => Err(FormatError::Overflow(start)),
            Err(leb128::read::Error::IoError(_)) => Err(FormatError::Truncated(start)),
        }
    }

    fn varint_u32(&mut self) -> Result<u32, FormatError> {
        let at = self.pos;
        u32::try_from(self.varint()?).map_err(|_| FormatError::Overflow(at))
    }

    fn string(&mut self) -> Result<String, FormatError> {
        let at = self.pos;
        let n = usize::try_from(self.varint()?).map_err(|_| FormatError::Overflow(at))?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FormatError::BadUtf8)
    }
}

pub fn read_trace_bytes(buf: &[u8]) -> Result<(Trace, Magic), FormatError> {
    let mut c = Cursor { buf, pos: 0 };
    let m: [u8; 4] = c.take(4)?.try_into().unwrap();
    let magic = match &m {
        b"WPPF" => Magic::Trace,
        b"UPRF" => Magic::Unified,
        _ => return Err(FormatError::BadMagic(m)),
    };
    let v = c.byte()?;
    if v != VERSION {
        return Err(FormatError::BadVersion(v));
    }
    let program_id = c.string()?;
    let input_id = c.string()?;
    let token_count = u64::from_le_bytes(c.take(8)?.try_into().unwrap());
    let mut events = Vec::new();
    while c.pos < buf.len() {
        let at = c.pos;
        let e = match c.byte()? {
            TAG_CALL => TraceEvent::Call(c.varint_u32()?),
            TAG_LOOP_ENTER => TraceEvent::LoopEnter(c.varint_u32()?),
            TAG_LOOP_EXIT => TraceEvent::LoopExit(c.varint_u32()?),
            TAG_CHAIN_BEGIN => TraceEvent::ChainBegin {
                priority: c.varint_u32()?,
                repeat: c.varint()?,
            },
            TAG_CHAIN_END => TraceEvent::ChainEnd,
            TAG_AUG_BEGIN => TraceEvent::AugBegin,
            TAG_AUG_END => TraceEvent::AugEnd,
            TAG_PATH_CODE => TraceEvent::PathCode(c.varint_u32()?),
            tag => return Err(FormatError::BadTag { tag, at }),
        };
        events.push(e);
    }
    check_nesting(&events)?;
    Ok((
        Trace {
            program_id,
            input_id,
            events,
            token_count,
        },
        magic,
    ))
}

pub fn write_trace(path: impl AsRef<Path>, t: &Trace, magic: Magic) -> Result<(), FormatError> {
    std::fs::write(path, write_trace_bytes(t, magic))?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<(Trace, Magic), FormatError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    read_trace_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use TraceEvent::*;

    fn sample() -> Trace {
        Trace {
            program_id: "abc".into(),
            input_id: "small".into(),
            events: vec![
                Call(0),
                LoopEnter(300),
                ChainBegin {
                    priority: 1,
                    repeat: 1 << 40,
                },
                Call(10),
                PathCode(1013),
                ChainEnd,
                LoopExit(300),
                AugBegin,
                Call(8),
                AugEnd,
            ],
            token_count: 75,
        }
    }

    #[test]
    fn round_trip() {
        for magic in [Magic::Trace, Magic::Unified] {
            let bytes = write_trace_bytes(&sample(), magic);
            assert_eq!(read_trace_bytes(&bytes).unwrap(), (sample(), magic));
        }
    }

    #[test]
    fn header_only() {
        let t = Trace::new("p", "i", vec![]);
        let bytes = write_trace_bytes(&t, Magic::Trace);
        assert_eq!(bytes.len(), 4 + 1 + 2 + 2 + 8);
        assert_eq!(read_trace_bytes(&bytes).unwrap().0, t);
    }

    #[test]
    fn rejects_bad_input() {
        let mut t = Trace::new("p", "i", vec![ChainEnd, ChainBegin { priority: 1, repeat: 2 }]);
        t.token_count = 0;
        let bytes = write_trace_bytes(&t, Magic::Trace);
        assert!(matches!(read_trace_bytes(&bytes), Err(FormatError::Nesting(_))));

        let good = write_trace_bytes(&sample(), Magic::Trace);
        assert!(matches!(read_trace_bytes(b"NOPE\x01"), Err(FormatError::BadMagic(_))));
        // Cut inside the varint of LoopExit(300).
        assert!(matches!(read_trace_bytes(&good[..good.len() - 5]), Err(FormatError::Truncated(_))));
        let mut trunc = write_trace_bytes(&Trace::new("p", "i", vec![Call(300)]), Magic::Trace);
        trunc.pop();
        assert!(matches!(read_trace_bytes(&trunc), Err(FormatError::Truncated(_))));
        let mut tag = write_trace_bytes(&Trace::new("p", "i", vec![]), Magic::Trace);
        tag.push(99);
        assert!(matches!(read_trace_bytes(&tag), Err(FormatError::BadTag { tag: 99, .. })));
    }
}
