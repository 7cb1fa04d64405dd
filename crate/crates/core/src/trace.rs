//! Page-granular access traces
//!
//! Binary form: a sequence of 9-byte records, an op byte (`R` or `W`) followed by a
//! little-endian 64-bit page address. Text form: one `R 0x7f0000001000` record per line,
//! blank lines and `#` comments ignored.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::TraceError;
use crate::utils::{is_page_aligned, parse_hex};

const RECORD_SIZE: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
}

impl AccessKind {
    pub fn op_byte(&self) -> u8 {
        match self {
            AccessKind::Read => b'R',
            AccessKind::Write => b'W',
        }
    }

    fn from_op_byte(op: u8) -> Option<Self> {
        match op {
            b'R' => Some(AccessKind::Read),
            b'W' => Some(AccessKind::Write),
            _ => None,
        }
    }
}

/// One access to a page
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Access {
    pub kind: AccessKind,
    pub addr: u64,
}

impl Access {
    pub fn read(addr: u64) -> Self {
        Access {
            kind: AccessKind::Read,
            addr,
        }
    }

    pub fn write(addr: u64) -> Self {
        Access {
            kind: AccessKind::Write,
            addr,
        }
    }

    pub fn is_write(&self) -> bool {
        self.kind == AccessKind::Write
    }
}

/// An ordered sequence of page accesses
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessTrace {
    pub accesses: Vec<Access>,
}

impl FromIterator<Access> for AccessTrace {
    fn from_iter<T: IntoIterator<Item = Access>>(iter: T) -> Self {
        AccessTrace {
            accesses: iter.into_iter().collect(),
        }
    }
}

impl AccessTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.accesses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accesses.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Access> {
        self.accesses.iter()
    }

    /// Distinct pages in order of first access
    pub fn first_touch_order(&self) -> Vec<u64> {
        let mut seen = HashSet::with_capacity(self.accesses.len());
        self.accesses
            .iter()
            .filter(|a| seen.insert(a.addr))
            .map(|a| a.addr)
            .collect()
    }

    /// Distinct pages touched
    pub fn pages(&self) -> HashSet<u64> {
        self.accesses.iter().map(|a| a.addr).collect()
    }

    /// Distinct pages written at least once
    pub fn written_pages(&self) -> HashSet<u64> {
        self.accesses
            .iter()
            .filter(|a| a.is_write())
            .map(|a| a.addr)
            .collect()
    }

    /// Binary encoding
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.accesses.len() * RECORD_SIZE);
        for a in &self.accesses {
            out.push(a.kind.op_byte());
            out.extend_from_slice(&a.addr.to_le_bytes());
        }
        out
    }

    /// Text encoding
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.accesses.len() * 17);
        for a in &self.accesses {
            writeln!(out, "{} {:#x}", a.kind.op_byte() as char, a.addr).expect("write to string");
        }
        out
    }
}

/// Decode a trace, detecting its form
///
/// A trace is binary when its first record starts with an op byte followed by the low
/// byte of a page-aligned address (always zero); anything else is parsed as text.
pub fn parse_trace(bytes: &[u8]) -> Result<AccessTrace, TraceError> {
    let is_binary =
        bytes.len() >= 2 && AccessKind::from_op_byte(bytes[0]).is_some() && bytes[1] == 0;
    if is_binary {
        parse_binary(bytes)
    } else {
        parse_text(bytes)
    }
}

fn check_addr(index: usize, addr: u64) -> Result<u64, TraceError> {
    if is_page_aligned(addr) {
        Ok(addr)
    } else {
        Err(TraceError::BadTraceRecord {
            index,
            reason: format!("address {addr:#x} is not page aligned"),
        })
    }
}

fn parse_binary(bytes: &[u8]) -> Result<AccessTrace, TraceError> {
    let records = bytes.chunks(RECORD_SIZE);
    records
        .enumerate()
        .map(|(index, rec)| {
            if rec.len() != RECORD_SIZE {
                return Err(TraceError::BadTraceRecord {
                    index,
                    reason: format!("truncated record ({} B)", rec.len()),
                });
            }
            let kind =
                AccessKind::from_op_byte(rec[0]).ok_or_else(|| TraceError::BadTraceRecord {
                    index,
                    reason: format!("unknown op byte {:#04x}", rec[0]),
                })?;
            let addr = u64::from_le_bytes(rec[1..].try_into().expect("record size"));
            Ok(Access {
                kind,
                addr: check_addr(index, addr)?,
            })
        })
        .collect()
}

fn parse_text(bytes: &[u8]) -> Result<AccessTrace, TraceError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TraceError::BadTraceRecord {
        index: 0,
        reason: format!("neither binary nor UTF-8 text: {e}"),
    })?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(index, line)| {
            let bad = |reason: String| TraceError::BadTraceRecord { index, reason };
            let mut fields = line.split_whitespace();
            let (Some(op), Some(addr), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(bad(format!("expected `<R|W> <hex address>`, got {line:?}")));
            };
            let kind = match op {
                "R" | "r" => AccessKind::Read,
                "W" | "w" => AccessKind::Write,
                _ => return Err(bad(format!("unknown op {op:?}"))),
            };
            let addr = parse_hex(addr).ok_or_else(|| bad(format!("bad address {addr:?}")))?;
            Ok(Access {
                kind,
                addr: check_addr(index, addr)?,
            })
        })
        .collect()
}

/// Load a trace file (binary or text)
pub fn load_trace(path: impl AsRef<Path>) -> Result<AccessTrace, TraceError> {
    parse_trace(&std::fs::read(path)?)
}

/// Write a trace file in binary form
pub fn write_trace(path: impl AsRef<Path>, trace: &AccessTrace) -> Result<(), TraceError> {
    std::fs::write(path, trace.to_binary())?;
    Ok(())
}
