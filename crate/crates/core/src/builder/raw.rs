//! The raw snapshot interchange directory
//!
//! ```text
//! <dir>/vmas.tsv       vbegin  vend  prot  path|-  file_offset   (hex, tab-separated)
//! <dir>/mem.bin        VMA contents, concatenated in table order
//! <dir>/stacks.tsv     vma_index  sp                             (optional)
//! <dir>/lazyfree.tsv   begin  end                                (optional)
//! <dir>/meta.tsv       process metadata                          (optional)
//! <dir>/backing/...    backing files, under their absolute path  (optional)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::{RawSnapshot, RawVma, ThreadStack};
use crate::backing::MemBacking;
use crate::error::RawIoError;
use crate::format::prot;
use crate::meta::{parse_meta_tsv, to_meta_tsv, ProcessMeta};
use crate::utils::parse_hex;

fn io_err(file: &Path) -> impl FnOnce(std::io::Error) -> RawIoError + '_ {
    move |source| RawIoError::Io {
        file: file.display().to_string(),
        source,
    }
}

fn read_optional(path: &Path) -> Result<Option<String>, RawIoError> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path)(e)),
    }
}

/// Non-empty, non-comment lines of a table with their (1-based) line numbers
fn table_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(n, l)| (n + 1, l.split('\t').map(str::trim).collect()))
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> RawIoError {
    RawIoError::Parse {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Load a raw snapshot directory
pub fn load_raw_snapshot(dir: impl AsRef<Path>) -> Result<RawSnapshot, RawIoError> {
    let dir = dir.as_ref();
    let vmas_path = dir.join("vmas.tsv");
    let vmas_text = std::fs::read_to_string(&vmas_path).map_err(io_err(&vmas_path))?;
    let mem_path = dir.join("mem.bin");
    let mem = std::fs::read(&mem_path).map_err(io_err(&mem_path))?;

    let mut raw = RawSnapshot::default();
    let mut cursor = 0usize;
    for (line, fields) in table_lines(&vmas_text) {
        let err = |msg: &str| parse_err("vmas.tsv", line, msg);
        let [vbegin, vend, prot_letters, path, offset] = fields[..] else {
            return Err(err("expected 5 tab-separated fields"));
        };
        let vbegin = parse_hex(vbegin).ok_or_else(|| err("bad vbegin"))?;
        let vend = parse_hex(vend).ok_or_else(|| err("bad vend"))?;
        if vend < vbegin {
            return Err(err("vend < vbegin"));
        }
        let prot = prot::from_letters(prot_letters).ok_or_else(|| err("bad protection"))?;
        let file_offset = parse_hex(offset).ok_or_else(|| err("bad file offset"))?;
        let len = (vend - vbegin) as usize;
        let data = mem
            .get(cursor..cursor + len)
            .ok_or_else(|| err("mem.bin is shorter than the VMA table"))?
            .to_vec();
        cursor += len;
        raw.vmas.push(RawVma {
            vbegin,
            vend,
            prot,
            path: (path != "-").then(|| path.to_string()),
            file_offset,
            data,
        });
    }
    if cursor != mem.len() {
        return Err(parse_err(
            "mem.bin",
            0,
            format!("{} trailing bytes after the last VMA", mem.len() - cursor),
        ));
    }

    if let Some(text) = read_optional(&dir.join("stacks.tsv"))? {
        for (line, fields) in table_lines(&text) {
            let err = |msg: &str| parse_err("stacks.tsv", line, msg);
            let [vma, sp] = fields[..] else {
                return Err(err("expected 2 tab-separated fields"));
            };
            raw.thread_stacks.push(ThreadStack {
                vma: vma.parse().map_err(|_| err("bad VMA index"))?,
                sp: parse_hex(sp).ok_or_else(|| err("bad stack pointer"))?,
            });
        }
    }

    if let Some(text) = read_optional(&dir.join("lazyfree.tsv"))? {
        for (line, fields) in table_lines(&text) {
            let err = |msg: &str| parse_err("lazyfree.tsv", line, msg);
            let [begin, end] = fields[..] else {
                return Err(err("expected 2 tab-separated fields"));
            };
            raw.lazy_free_ranges.push((
                parse_hex(begin).ok_or_else(|| err("bad range start"))?,
                parse_hex(end).ok_or_else(|| err("bad range end"))?,
            ));
        }
    }

    Ok(raw)
}

/// Load the process metadata of a raw snapshot directory (empty if absent)
pub fn load_raw_meta(dir: impl AsRef<Path>) -> Result<ProcessMeta, RawIoError> {
    match read_optional(&dir.as_ref().join("meta.tsv"))? {
        None => Ok(ProcessMeta::default()),
        Some(text) => parse_meta_tsv(&text).map_err(|e| parse_err("meta.tsv", 0, e.to_string())),
    }
}

/// Write a raw snapshot directory, including backing files under `<dir>/backing`
pub fn save_raw_dir(
    dir: impl AsRef<Path>,
    raw: &RawSnapshot,
    meta: &ProcessMeta,
    backing: &MemBacking,
) -> Result<(), RawIoError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, content: &[u8]| {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(io_err(&path))
    };

    let mut vmas = String::new();
    let mut mem = Vec::new();
    for vma in &raw.vmas {
        writeln!(
            vmas,
            "{:#x}\t{:#x}\t{}\t{}\t{:#x}",
            vma.vbegin,
            vma.vend,
            prot::to_letters(vma.prot),
            vma.path.as_deref().unwrap_or("-"),
            vma.file_offset
        )
        .expect("write to string");
        mem.extend_from_slice(&vma.data);
    }
    write("vmas.tsv", vmas.as_bytes())?;
    write("mem.bin", &mem)?;

    if !raw.thread_stacks.is_empty() {
        let text: String = raw
            .thread_stacks
            .iter()
            .map(|s| format!("{}\t{:#x}\n", s.vma, s.sp))
            .collect();
        write("stacks.tsv", text.as_bytes())?;
    }
    if !raw.lazy_free_ranges.is_empty() {
        let text: String = raw
            .lazy_free_ranges
            .iter()
            .map(|(b, e)| format!("{b:#x}\t{e:#x}\n"))
            .collect();
        write("lazyfree.tsv", text.as_bytes())?;
    }
    if *meta != ProcessMeta::default() {
        write("meta.tsv", to_meta_tsv(meta).as_bytes())?;
    }

    for (path, content) in backing.iter() {
        let host = dir.join("backing").join(path.trim_start_matches('/'));
        if let Some(parent) = host.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        std::fs::write(&host, content).map_err(io_err(&host))?;
    }
    Ok(())
}
