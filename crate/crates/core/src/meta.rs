//! Process metadata: compact codec, lazy file-descriptor resolution and a replay cost
//! model
//!
//! Encoding: a little-endian `u32` record count, then one tag-length-value record per
//! resource (`u8` tag, `u32` payload length, payload). Records are emitted per class in
//! a fixed order: threads, fds, signal handlers, timers, cwd, environment. Empty
//! collections (and an empty cwd) emit no record.
//!
//! | tag | class   | payload                                                        |
//! |-----|---------|----------------------------------------------------------------|
//! | 1   | thread  | tid `u32`, sp `u64`, register blob (rest)                      |
//! | 2   | fd      | fd `u32`, offset `u64`, flags `u32`, lazy `u8`, path (rest)    |
//! | 3   | signal  | signo `u8`, handler `u64`, mask `u64`, flags `u64`             |
//! | 4   | timer   | id `u32`, interval ns `u64`, remaining ns `u64`                |
//! | 5   | cwd     | path                                                           |
//! | 6   | env     | `key=value`                                                    |

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use crate::error::{FdError, MetaError};
use crate::utils::parse_hex;

const TAG_THREAD: u8 = 1;
const TAG_FD: u8 = 2;
const TAG_SIGNAL: u8 = 3;
const TAG_TIMER: u8 = 4;
const TAG_CWD: u8 = 5;
const TAG_ENV: u8 = 6;

/// Highest valid signal number
pub const MAX_SIGNO: u8 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ThreadRecord {
    pub tid: u32,
    /// Opaque, architecture-specific register state
    pub regs: Vec<u8>,
    pub sp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FdRecord {
    pub fd_num: u32,
    pub path: String,
    pub offset: u64,
    pub flags: u32,
    /// Resolved on first use rather than at restore time
    pub lazy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SigHandler {
    pub signo: u8,
    pub handler: u64,
    pub mask: u64,
    pub flags: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TimerRecord {
    pub id: u32,
    pub interval_ns: u64,
    pub remaining_ns: u64,
}

/// Kernel-visible state of a process
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProcessMeta {
    pub threads: Vec<ThreadRecord>,
    pub fds: Vec<FdRecord>,
    pub sighandlers: Vec<SigHandler>,
    pub timers: Vec<TimerRecord>,
    pub cwd: String,
    /// `key=value` entries
    pub env: Vec<String>,
}

impl ProcessMeta {
    /// Check the invariants: unique tids, unique fd numbers, signal numbers in `[1; 64]`
    pub fn check(&self) -> Result<(), MetaError> {
        let mut tids = HashSet::new();
        if let Some(t) = self.threads.iter().find(|t| !tids.insert(t.tid)) {
            return Err(MetaError::InvariantViolation(format!(
                "duplicate tid {}",
                t.tid
            )));
        }
        let mut fds = HashSet::new();
        if let Some(fd) = self.fds.iter().find(|fd| !fds.insert(fd.fd_num)) {
            return Err(MetaError::InvariantViolation(format!(
                "duplicate fd {}",
                fd.fd_num
            )));
        }
        if let Some(sig) = self
            .sighandlers
            .iter()
            .find(|s| s.signo == 0 || s.signo > MAX_SIGNO)
        {
            return Err(MetaError::InvariantViolation(format!(
                "signal number {} out of [1; {MAX_SIGNO}]",
                sig.signo
            )));
        }
        Ok(())
    }

    /// Number of records in the encoding
    pub fn n_records(&self) -> usize {
        self.threads.len()
            + self.fds.len()
            + self.sighandlers.len()
            + self.timers.len()
            + usize::from(!self.cwd.is_empty())
            + self.env.len()
    }

    pub fn n_lazy_fds(&self) -> usize {
        self.fds.iter().filter(|fd| fd.lazy).count()
    }
}

fn push_record(out: &mut Vec<u8>, tag: u8, payload: &[u8]) {
    out.push(tag);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Serialize process metadata
pub fn encode_meta(meta: &ProcessMeta) -> Result<Vec<u8>, MetaError> {
    meta.check()?;

    let mut out = Vec::new();
    out.extend_from_slice(&(meta.n_records() as u32).to_le_bytes());
    let mut payload = Vec::new();

    for t in &meta.threads {
        payload.clear();
        payload.extend_from_slice(&t.tid.to_le_bytes());
        payload.extend_from_slice(&t.sp.to_le_bytes());
        payload.extend_from_slice(&t.regs);
        push_record(&mut out, TAG_THREAD, &payload);
    }
    for fd in &meta.fds {
        payload.clear();
        payload.extend_from_slice(&fd.fd_num.to_le_bytes());
        payload.extend_from_slice(&fd.offset.to_le_bytes());
        payload.extend_from_slice(&fd.flags.to_le_bytes());
        payload.push(fd.lazy as u8);
        payload.extend_from_slice(fd.path.as_bytes());
        push_record(&mut out, TAG_FD, &payload);
    }
    for sig in &meta.sighandlers {
        payload.clear();
        payload.push(sig.signo);
        payload.extend_from_slice(&sig.handler.to_le_bytes());
        payload.extend_from_slice(&sig.mask.to_le_bytes());
        payload.extend_from_slice(&sig.flags.to_le_bytes());
        push_record(&mut out, TAG_SIGNAL, &payload);
    }
    for timer in &meta.timers {
        payload.clear();
        payload.extend_from_slice(&timer.id.to_le_bytes());
        payload.extend_from_slice(&timer.interval_ns.to_le_bytes());
        payload.extend_from_slice(&timer.remaining_ns.to_le_bytes());
        push_record(&mut out, TAG_TIMER, &payload);
    }
    if !meta.cwd.is_empty() {
        push_record(&mut out, TAG_CWD, meta.cwd.as_bytes());
    }
    for var in &meta.env {
        push_record(&mut out, TAG_ENV, var.as_bytes());
    }
    Ok(out)
}

/// Cursor over a record payload
struct Payload<'a> {
    index: usize,
    bytes: &'a [u8],
}

impl<'a> Payload<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MetaError> {
        if self.bytes.len() < n {
            return Err(MetaError::MalformedRecord {
                index: self.index,
                reason: format!(
                    "payload too short ({} B left, {n} B needed)",
                    self.bytes.len()
                ),
            });
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, MetaError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, MetaError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("sized")))
    }

    fn u64(&mut self) -> Result<u64, MetaError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("sized")))
    }

    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.bytes)
    }

    fn string(&mut self) -> Result<String, MetaError> {
        let index = self.index;
        String::from_utf8(self.rest().to_vec()).map_err(|e| MetaError::MalformedRecord {
            index,
            reason: format!("invalid UTF-8: {e}"),
        })
    }

    fn finish(&self) -> Result<(), MetaError> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(MetaError::MalformedRecord {
                index: self.index,
                reason: format!("{} unexpected payload byte(s)", self.bytes.len()),
            })
        }
    }
}

/// Deserialize process metadata in a single forward pass
pub fn decode_meta(blob: &[u8]) -> Result<ProcessMeta, MetaError> {
    let Some((count, mut rest)) = blob.split_first_chunk::<4>() else {
        return Err(MetaError::TruncatedRecord { index: 0 });
    };
    let count = u32::from_le_bytes(*count) as usize;
    let mut meta = ProcessMeta::default();
    let mut has_cwd = false;

    for index in 0..count {
        let Some((&tag, after_tag)) = rest.split_first() else {
            return Err(MetaError::TruncatedRecord { index });
        };
        let Some((len, after_len)) = after_tag.split_first_chunk::<4>() else {
            return Err(MetaError::TruncatedRecord { index });
        };
        let len = u32::from_le_bytes(*len) as usize;
        if after_len.len() < len {
            return Err(MetaError::TruncatedRecord { index });
        }
        let (bytes, next) = after_len.split_at(len);
        rest = next;
        let mut p = Payload { index, bytes };

        match tag {
            TAG_THREAD => meta.threads.push(ThreadRecord {
                tid: p.u32()?,
                sp: p.u64()?,
                regs: p.rest().to_vec(),
            }),
            TAG_FD => {
                let fd_num = p.u32()?;
                let offset = p.u64()?;
                let flags = p.u32()?;
                let lazy = match p.u8()? {
                    0 => false,
                    1 => true,
                    other => {
                        return Err(MetaError::MalformedRecord {
                            index,
                            reason: format!("lazy flag {other}"),
                        })
                    }
                };
                meta.fds.push(FdRecord {
                    fd_num,
                    path: p.string()?,
                    offset,
                    flags,
                    lazy,
                });
            }
            TAG_SIGNAL => meta.sighandlers.push(SigHandler {
                signo: p.u8()?,
                handler: p.u64()?,
                mask: p.u64()?,
                flags: p.u64()?,
            }),
            TAG_TIMER => meta.timers.push(TimerRecord {
                id: p.u32()?,
                interval_ns: p.u64()?,
                remaining_ns: p.u64()?,
            }),
            TAG_CWD => {
                if has_cwd {
                    return Err(MetaError::MalformedRecord {
                        index,
                        reason: "second cwd record".into(),
                    });
                }
                has_cwd = true;
                meta.cwd = p.string()?;
            }
            TAG_ENV => meta.env.push(p.string()?),
            _ => return Err(MetaError::UnknownTag { index, tag }),
        }
        p.finish()?;
    }

    if !rest.is_empty() {
        return Err(MetaError::TrailingBytes(rest.len()));
    }
    meta.check()?;
    Ok(meta)
}

/// Emitted the first time a lazy descriptor is used
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FdResolution {
    pub fd_num: u32,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct FdState {
    record: FdRecord,
    resolved: bool,
}

/// Per-restore table of file descriptors
///
/// Eager descriptors start out resolved; lazy ones get resolved by their first use.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FdTable {
    fds: BTreeMap<u32, FdState>,
    events: Vec<FdResolution>,
}

impl FdTable {
    pub fn new(meta: &ProcessMeta) -> Self {
        FdTable {
            fds: meta
                .fds
                .iter()
                .map(|fd| {
                    (
                        fd.fd_num,
                        FdState {
                            record: fd.clone(),
                            resolved: !fd.lazy,
                        },
                    )
                })
                .collect(),
            events: Vec::new(),
        }
    }

    /// Resolve a lazy descriptor
    pub fn resolve(&mut self, fd_num: u32) -> Result<(FdRecord, FdResolution), FdError> {
        let state = self.fds.get_mut(&fd_num).ok_or(FdError::NoSuchFd(fd_num))?;
        if state.resolved {
            return Err(FdError::AlreadyResolved(fd_num));
        }
        state.resolved = true;
        let event = FdResolution {
            fd_num,
            path: state.record.path.clone(),
        };
        self.events.push(event.clone());
        Ok((state.record.clone(), event))
    }

    /// Use a descriptor: resolves it on its first use
    ///
    /// Returns whether this use triggered a resolution.
    pub fn use_fd(&mut self, fd_num: u32) -> Result<bool, FdError> {
        match self.resolve(fd_num) {
            Ok(_) => Ok(true),
            Err(FdError::AlreadyResolved(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }

    pub fn is_resolved(&self, fd_num: u32) -> Option<bool> {
        self.fds.get(&fd_num).map(|s| s.resolved)
    }

    /// Resolution events so far
    pub fn events(&self) -> &[FdResolution] {
        &self.events
    }
}

/// Resolve a lazy file descriptor on its first use
pub fn lazy_resolve_fd(
    table: &mut FdTable,
    fd_num: u32,
) -> Result<(FdRecord, FdResolution), FdError> {
    table.resolve(fd_num)
}

/// Syscalls needed to recreate each resource by replaying its creation
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayCoefficients {
    /// `open`, `lseek`, `dup`, `fcntl`
    pub per_fd: u64,
    pub per_vma: u64,
    /// thread creation and register restoration
    pub per_thread: u64,
    pub per_sighandler: u64,
    /// timer creation and arming
    pub per_timer: u64,
}

impl Default for ReplayCoefficients {
    fn default() -> Self {
        ReplayCoefficients {
            per_fd: 4,
            per_vma: 1,
            per_thread: 2,
            per_sighandler: 1,
            per_timer: 2,
        }
    }
}

/// Modeled number of syscalls of a replay-based restore (a model, not a measurement)
pub fn replay_cost_estimate(meta: &ProcessMeta, n_vmas: u64) -> u64 {
    replay_cost_with(meta, n_vmas, &ReplayCoefficients::default())
}

pub fn replay_cost_with(meta: &ProcessMeta, n_vmas: u64, coef: &ReplayCoefficients) -> u64 {
    meta.fds.len() as u64 * coef.per_fd
        + n_vmas * coef.per_vma
        + meta.threads.len() as u64 * coef.per_thread
        + meta.sighandlers.len() as u64 * coef.per_sighandler
        + meta.timers.len() as u64 * coef.per_timer
}

/// Number of calls of a batched restore from the compact encoding: always one
pub fn batched_restore_cost(_meta: &ProcessMeta) -> u64 {
    1
}

fn hex_bytes(bytes: &[u8]) -> String {
    if bytes.is_empty() {
        return "-".into();
    }
    bytes
        .iter()
        .fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
            write!(s, "{b:02x}").expect("write to string");
            s
        })
}

fn parse_hex_bytes(s: &str) -> Option<Vec<u8>> {
    if s == "-" {
        return Some(Vec::new());
    }
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

/// Render metadata as the tab-separated `meta.tsv` debug format
///
/// ```text
/// thread  <tid>  <sp hex>  <regs hex or ->
/// fd      <num>  <path>  <offset>  <flags hex>  <lazy 0|1>
/// sig     <signo>  <handler hex>  <mask hex>  <flags hex>
/// timer   <id>  <interval ns>  <remaining ns>
/// cwd     <path>
/// env     <key=value>
/// ```
pub fn to_meta_tsv(meta: &ProcessMeta) -> String {
    let mut out = String::new();
    let mut line = |l: String| {
        out.push_str(&l);
        out.push('\n');
    };
    for t in &meta.threads {
        line(format!(
            "thread\t{}\t{:#x}\t{}",
            t.tid,
            t.sp,
            hex_bytes(&t.regs)
        ));
    }
    for fd in &meta.fds {
        line(format!(
            "fd\t{}\t{}\t{}\t{:#x}\t{}",
            fd.fd_num, fd.path, fd.offset, fd.flags, fd.lazy as u8
        ));
    }
    for s in &meta.sighandlers {
        line(format!(
            "sig\t{}\t{:#x}\t{:#x}\t{:#x}",
            s.signo, s.handler, s.mask, s.flags
        ));
    }
    for t in &meta.timers {
        line(format!(
            "timer\t{}\t{}\t{}",
            t.id, t.interval_ns, t.remaining_ns
        ));
    }
    if !meta.cwd.is_empty() {
        line(format!("cwd\t{}", meta.cwd));
    }
    for var in &meta.env {
        line(format!("env\t{var}"));
    }
    out
}

/// Parse the `meta.tsv` debug format (see [`to_meta_tsv`])
pub fn parse_meta_tsv(text: &str) -> Result<ProcessMeta, MetaError> {
    let mut meta = ProcessMeta::default();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let err = |msg: &str| MetaError::Text {
            line,
            msg: format!("{msg}: {raw:?}"),
        };
        let fields: Vec<&str> = raw.split('\t').collect();
        let dec = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| err("bad decimal field"))
        };
        let hex = |s: &str| parse_hex(s).ok_or_else(|| err("bad hex field"));

        match (fields[0], fields.len()) {
            ("thread", 4) => meta.threads.push(ThreadRecord {
                tid: dec(fields[1])? as u32,
                sp: hex(fields[2])?,
                regs: parse_hex_bytes(fields[3]).ok_or_else(|| err("bad register blob"))?,
            }),
            ("fd", 6) => meta.fds.push(FdRecord {
                fd_num: dec(fields[1])? as u32,
                path: fields[2].to_string(),
                offset: dec(fields[3])?,
                flags: hex(fields[4])? as u32,
                lazy: match fields[5].trim() {
                    "0" => false,
                    "1" => true,
                    _ => return Err(err("lazy flag must be 0 or 1")),
                },
            }),
            ("sig", 5) => meta.sighandlers.push(SigHandler {
                signo: u8::try_from(dec(fields[1])?).map_err(|_| err("bad signal number"))?,
                handler: hex(fields[2])?,
                mask: hex(fields[3])?,
                flags: hex(fields[4])?,
            }),
            ("timer", 4) => meta.timers.push(TimerRecord {
                id: dec(fields[1])? as u32,
                interval_ns: dec(fields[2])?,
                remaining_ns: dec(fields[3])?,
            }),
            ("cwd", 2) => meta.cwd = fields[1].to_string(),
            ("env", 2) => meta.env.push(fields[1].to_string()),
            _ => return Err(err("unknown record or wrong field count")),
        }
    }
    meta.check()?;
    Ok(meta)
}
