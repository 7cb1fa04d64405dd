//! Error types

use crate::format::Finding;

pub type JifResult<T> = Result<T, JifError>;
pub type ITreeResult<T> = Result<T, ITreeError>;

/// Errors concerning the JIF container as a whole
#[derive(Debug, thiserror::Error)]
pub enum JifError {
    #[error("bad magic number: {found:x?}")]
    BadMagic { found: [u8; 4] },

    #[error("bad table checksum: header says {expected:#010x}, tables hash to {computed:#010x}")]
    BadChecksum { expected: u32, computed: u32 },

    #[error("truncated file: {section} needs {needed} B, only {available} B available")]
    TruncatedFile {
        section: &'static str,
        needed: u64,
        available: u64,
    },

    #[error("table invariant violated ({invariant}): {} finding(s), first: {}", .findings.len(), .findings[0])]
    TableInvariantViolation {
        invariant: &'static str,
        findings: Vec<Finding>,
    },

    #[error("image invariant violated ({}): {} finding(s)", .findings[0].code, .findings.len())]
    InvariantViolation { findings: Vec<Finding> },

    #[error("trace address {addr:#x} is not mapped by any VMA")]
    TraceOutOfRange { addr: u64 },

    #[error("invalid interval tree: {0}")]
    InvalidITree(#[from] ITreeError),
}

/// Errors building an interval tree
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum ITreeError {
    #[error("interval [{start:#x}; {end:#x}) is empty or not page aligned")]
    InvalidInterval { start: u64, end: u64 },

    #[error("intervals are not sorted: [{:#x}; {:#x}) comes before [{:#x}; {:#x})", .first.0, .first.1, .second.0, .second.1)]
    UnsortedInput {
        first: (u64, u64),
        second: (u64, u64),
    },

    #[error("intervals [{:#x}; {:#x}) and [{:#x}; {:#x}) overlap", .first.0, .first.1, .second.0, .second.1)]
    OverlappingIntervals {
        first: (u64, u64),
        second: (u64, u64),
    },
}

/// Errors resolving a virtual page into its source
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ResolveError {
    #[error("address {addr:#x} is not mapped (segmentation fault)")]
    Unmapped { addr: u64 },

    #[error("address {addr:#x} is not page aligned")]
    Unaligned { addr: u64 },
}

/// Errors reading from backing files
#[derive(Debug, thiserror::Error)]
pub enum BackingError {
    #[error("missing backing file {path}")]
    MissingBackingFile { path: String },

    #[error("failed to read backing file {path} at offset {offset:#x}: {source}")]
    ShortBackingRead {
        path: String,
        offset: u64,
        #[source]
        source: std::io::Error,
    },
}

/// Errors materializing the content of a VMA
#[derive(Debug, thiserror::Error)]
pub enum MaterializeError {
    #[error(transparent)]
    Resolve(#[from] ResolveError),

    #[error(transparent)]
    Backing(#[from] BackingError),

    #[error("private page at data offset {offset:#x} lies outside of the data section")]
    DataOutOfBounds { offset: u64 },
}

/// Errors in the snapshot preparation pipeline
#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error(transparent)]
    Backing(#[from] BackingError),

    #[error("lazy-free range [{begin:#x}; {end:#x}) is not page aligned or not inside a VMA")]
    RangeOutsideVma { begin: u64, end: u64 },

    #[error("stack pointer {sp:#x} of thread {thread} lies outside of its stack VMA")]
    StackPointerOutsideVma { thread: usize, sp: u64 },

    #[error("inconsistent raw snapshot: {0}")]
    InvalidRawSnapshot(String),

    #[error(transparent)]
    Tree(#[from] ITreeError),

    #[error(transparent)]
    Meta(#[from] MetaError),

    #[error(transparent)]
    Jif(#[from] JifError),
}

/// Errors reading or writing the raw snapshot interchange directory
#[derive(Debug, thiserror::Error)]
pub enum RawIoError {
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
}

/// Errors loading access traces
#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("bad trace record #{index}: {reason}")]
    BadTraceRecord { index: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors in the process-metadata codec
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum MetaError {
    #[error("metadata invariant violated: {0}")]
    InvariantViolation(String),

    #[error("record #{index} is truncated")]
    TruncatedRecord { index: usize },

    #[error("record #{index} has unknown tag {tag:#04x}")]
    UnknownTag { index: usize, tag: u8 },

    #[error("record #{index} is malformed: {reason}")]
    MalformedRecord { index: usize, reason: String },

    #[error("{0} trailing byte(s) after the last record")]
    TrailingBytes(usize),

    #[error("meta.tsv line {line}: {msg}")]
    Text { line: usize, msg: String },
}

/// Errors resolving lazy file descriptors
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum FdError {
    #[error("no such file descriptor: {0}")]
    NoSuchFd(u32),

    #[error("file descriptor {0} is already resolved")]
    AlreadyResolved(u32),
}

/// Errors in the restore simulator
#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("simulated crash: access to unmapped address {addr:#x}")]
    SimCrash { addr: u64 },

    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("working set estimation needs at least one trace")]
    EmptyInput,

    #[error(transparent)]
    Fd(#[from] FdError),

    #[error(transparent)]
    Meta(#[from] MetaError),
}
