//! Joint Image Format (JIF) toolkit
//!
//! A JIF is a single self-contained snapshot of a process: its serialized kernel
//! metadata, its memory layout (one descriptor per overlay VMA), a compact pre-balanced
//! interval tree per VMA telling which pages are private, zero-filled or shared with the
//! backing file, an access ordering, and the private page data itself.
//!
//! The crate is organized as follows:
//!  - [`format`]: the bit-exact on-disk container (parse, write, validate, canonicalize, stats)
//!  - [`overlay`]: overlay interval trees and per-page fault-source resolution
//!  - [`builder`]: turning a raw memory dump into a lean, reordered image
//!  - [`meta`]: compact process-metadata codec, lazy fd resolution and a replay cost model
//!  - [`sim`]: a deterministic restore simulator (fault accounting and prefetch strategies)
//!  - [`trace`]: access traces (binary and text forms)
//!  - [`backing`]: providers for the content of backing files

pub mod backing;
pub mod builder;
pub mod error;
pub mod format;
pub mod meta;
pub mod overlay;
pub mod sim;
pub mod trace;
pub mod utils;

#[cfg(feature = "testkit")]
pub mod testkit;

pub use error::*;
pub use format::{parse_jif, write_jif, JifImage};
pub use utils::PAGE_SIZE;
