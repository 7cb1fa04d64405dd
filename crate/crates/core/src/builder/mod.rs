//! Snapshot preparation: from a raw memory dump to a lean JIF
//!
//! The pipeline ([`build_jif`]) runs:
//!  1. [`apply_lazy_free`]: lazily freed ranges become zero
//!  2. [`trim_stack`]: the unused part of each thread stack becomes zero
//!  3. [`diff_against_backing`]: pages equal to their backing file are dropped, zero pages
//!     are elided, the rest is stored privately
//!  4. [`classify_write_sets`]: private pages known to be written get flagged eager-writable
//!  5. tree generation and metadata encoding
//!  6. [`reorder_by_trace`] (when a trace is supplied)
//!  7. [`canonicalize`]

mod raw;
mod reorder;

pub use raw::{load_raw_meta, load_raw_snapshot, save_raw_dir};
pub use reorder::reorder_by_trace;

use std::collections::BTreeSet;

use crate::backing::Backing;
use crate::error::{BuildError, JifError};
use crate::format::{
    canonicalize, JifImage, VmaDescriptor, ANON_PATH, VFLAG_EAGER_WRITABLE_PRESENT,
};
use crate::meta::{encode_meta, ProcessMeta};
use crate::overlay::{build_itree, Interval, IntervalSource};
use crate::trace::AccessTrace;
use crate::utils::{is_page_aligned, is_zero_page, page_floor, PAGE_SIZE, PAGE_SIZE_U64};

/// Default stack redzone (in Bytes)
pub const DEFAULT_REDZONE: u64 = 128;

/// A VMA of the raw dump, with its content
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawVma {
    pub vbegin: u64,
    pub vend: u64,
    pub prot: u8,
    /// Absolute path of the backing file (`None` if anonymous)
    pub path: Option<String>,
    pub file_offset: u64,
    /// `vend - vbegin` bytes of memory content
    pub data: Vec<u8>,
}

impl RawVma {
    pub fn contains(&self, addr: u64) -> bool {
        self.vbegin <= addr && addr < self.vend
    }

    pub fn n_pages(&self) -> usize {
        ((self.vend - self.vbegin) / PAGE_SIZE_U64) as usize
    }

    /// Content of the page at `addr`
    pub fn page(&self, addr: u64) -> &[u8] {
        let off = (addr - self.vbegin) as usize;
        &self.data[off..off + PAGE_SIZE]
    }

    fn zero_range(&mut self, begin: u64, end: u64) {
        let (b, e) = ((begin - self.vbegin) as usize, (end - self.vbegin) as usize);
        self.data[b..e].fill(0);
    }
}

/// Stack pointer of a thread, with the index of its stack VMA
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreadStack {
    pub vma: usize,
    pub sp: u64,
}

/// A full-memory checkpoint
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawSnapshot {
    /// sorted by address
    pub vmas: Vec<RawVma>,
    pub thread_stacks: Vec<ThreadStack>,
    /// page-aligned `[begin; end)` ranges freed lazily by the process
    pub lazy_free_ranges: Vec<(u64, u64)>,
}

impl RawSnapshot {
    /// Check the VMA table: aligned, sorted, disjoint, content of the right size
    pub fn check(&self) -> Result<(), BuildError> {
        let bad = |msg: String| Err(BuildError::InvalidRawSnapshot(msg));
        for (i, vma) in self.vmas.iter().enumerate() {
            if vma.vbegin >= vma.vend || !is_page_aligned(vma.vbegin) || !is_page_aligned(vma.vend)
            {
                return bad(format!(
                    "VMA {i} [{:#x}; {:#x}) is empty or unaligned",
                    vma.vbegin, vma.vend
                ));
            }
            if vma.data.len() as u64 != vma.vend - vma.vbegin {
                return bad(format!(
                    "VMA {i} holds {} B of content for {} B of address space",
                    vma.data.len(),
                    vma.vend - vma.vbegin
                ));
            }
            if vma.path.is_none() && vma.file_offset != 0 {
                return bad(format!("anonymous VMA {i} has a file offset"));
            }
            if vma.path.is_some() && !is_page_aligned(vma.file_offset) {
                return bad(format!("VMA {i} has an unaligned file offset"));
            }
            if i > 0 && self.vmas[i - 1].vend > vma.vbegin {
                return bad(format!("VMAs {} and {i} are unsorted or overlap", i - 1));
            }
        }
        Ok(())
    }

    /// Index of the VMA containing `addr`
    pub fn find_vma(&self, addr: u64) -> Option<usize> {
        let idx = self.vmas.partition_point(|v| v.vbegin <= addr);
        (idx > 0 && self.vmas[idx - 1].contains(addr)).then(|| idx - 1)
    }
}

/// Pages observed written across profiling runs
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WriteSet {
    pub pages: BTreeSet<u64>,
    pub runs_observed: u32,
}

impl WriteSet {
    /// Union of the written pages of several profiling traces
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a AccessTrace>) -> Self {
        let mut ws = WriteSet::default();
        for trace in traces {
            ws.pages.extend(trace.written_pages());
            ws.runs_observed += 1;
        }
        ws
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.pages.contains(&addr)
    }
}

/// Per-VMA intervals together with the private data they reference
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overlay {
    /// one (sorted) list per VMA of the snapshot
    pub intervals: Vec<Vec<Interval>>,
    pub data: Vec<u8>,
}

/// Zero every lazily freed range
pub fn apply_lazy_free(raw: &RawSnapshot) -> Result<RawSnapshot, BuildError> {
    let mut out = raw.clone();
    for &(begin, end) in &raw.lazy_free_ranges {
        let outside = BuildError::RangeOutsideVma { begin, end };
        if begin >= end || !is_page_aligned(begin) || !is_page_aligned(end) {
            return Err(outside);
        }
        let idx = out.find_vma(begin).ok_or(outside)?;
        let vma = &mut out.vmas[idx];
        if end > vma.vend {
            return Err(BuildError::RangeOutsideVma { begin, end });
        }
        vma.zero_range(begin, end);
    }
    Ok(out)
}

/// Zero the unused part of every thread stack
///
/// Stacks grow downwards: every page lying wholly below `page_floor(sp - redzone)` is
/// unused. When several threads share a stack VMA, only the region unused by all of
/// them is trimmed.
pub fn trim_stack(raw: &RawSnapshot, redzone: u64) -> Result<RawSnapshot, BuildError> {
    let mut limits: Vec<Option<u64>> = vec![None; raw.vmas.len()];
    for (thread, stack) in raw.thread_stacks.iter().enumerate() {
        let vma = raw.vmas.get(stack.vma).ok_or_else(|| {
            BuildError::InvalidRawSnapshot(format!(
                "thread {thread} references stack VMA {} out of {}",
                stack.vma,
                raw.vmas.len()
            ))
        })?;
        if stack.sp < vma.vbegin || stack.sp > vma.vend {
            return Err(BuildError::StackPointerOutsideVma {
                thread,
                sp: stack.sp,
            });
        }
        let limit = page_floor(stack.sp.saturating_sub(redzone)).max(vma.vbegin);
        let slot = &mut limits[stack.vma];
        *slot = Some(slot.map_or(limit, |l| l.min(limit)));
    }

    let mut out = raw.clone();
    for (vma, limit) in out.vmas.iter_mut().zip(limits) {
        if let Some(limit) = limit {
            let begin = vma.vbegin;
            vma.zero_range(begin, limit);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PageClass {
    Shared,
    Zero,
    Private,
}

/// Classify every page against its backing file and emit maximal intervals
///
/// File-backed pages equal to the backing page are left uncovered (shared). All-zero
/// pages become zero intervals. Any other page is stored privately, in address order.
pub fn diff_against_backing(
    raw: &RawSnapshot,
    backing: &dyn Backing,
) -> Result<Overlay, BuildError> {
    let mut overlay = Overlay::default();
    let mut backing_page = vec![0u8; PAGE_SIZE];

    for vma in &raw.vmas {
        let mut ivals: Vec<Interval> = Vec::new();
        for p in 0..vma.n_pages() {
            let addr = vma.vbegin + p as u64 * PAGE_SIZE_U64;
            let page = vma.page(addr);
            let class = match &vma.path {
                Some(path) => {
                    backing.read_at(
                        path,
                        vma.file_offset + p as u64 * PAGE_SIZE_U64,
                        &mut backing_page,
                    )?;
                    if page == backing_page.as_slice() {
                        PageClass::Shared
                    } else if is_zero_page(page) {
                        PageClass::Zero
                    } else {
                        PageClass::Private
                    }
                }
                None if is_zero_page(page) => PageClass::Zero,
                None => PageClass::Private,
            };

            let ival = match class {
                PageClass::Shared => continue,
                PageClass::Zero => Interval::zero(addr, addr + PAGE_SIZE_U64),
                PageClass::Private => {
                    let offset = overlay.data.len() as u64;
                    overlay.data.extend_from_slice(page);
                    Interval::private(addr, addr + PAGE_SIZE_U64, offset, false)
                }
            };
            match ivals.last_mut() {
                Some(last) if last.continued_by(&ival) => last.end = ival.end,
                _ => ivals.push(ival),
            }
        }
        overlay.intervals.push(ivals);
    }
    Ok(overlay)
}

/// Split private intervals at write-set boundaries and flag the written pages
/// eager-writable
pub fn classify_write_sets(ws: &WriteSet, intervals: &[Vec<Interval>]) -> Vec<Vec<Interval>> {
    intervals
        .iter()
        .map(|ivals| {
            let mut out: Vec<Interval> = Vec::with_capacity(ivals.len());
            for ival in ivals {
                let IntervalSource::Private { offset, .. } = ival.source else {
                    out.push(*ival);
                    continue;
                };
                let first = out.len();
                for p in 0..ival.n_pages() {
                    let addr = ival.start + p * PAGE_SIZE_U64;
                    let page = Interval::private(
                        addr,
                        addr + PAGE_SIZE_U64,
                        offset + p * PAGE_SIZE_U64,
                        ws.contains(addr),
                    );
                    match out[first..].last_mut() {
                        Some(last) if last.continued_by(&page) => last.end = page.end,
                        _ => out.push(page),
                    }
                }
            }
            out
        })
        .collect()
}

/// Assemble an image from a snapshot layout and its overlay
pub fn assemble_image(
    raw: &RawSnapshot,
    overlay: Overlay,
    metadata: Vec<u8>,
) -> Result<JifImage, BuildError> {
    if overlay.intervals.len() != raw.vmas.len() {
        return Err(BuildError::InvalidRawSnapshot(format!(
            "{} interval lists for {} VMAs",
            overlay.intervals.len(),
            raw.vmas.len()
        )));
    }

    let mut strings: Vec<u8> = Vec::new();
    let mut vmas = Vec::with_capacity(raw.vmas.len());
    let mut nodes = Vec::new();
    for (vma, ivals) in raw.vmas.iter().zip(&overlay.intervals) {
        let ref_path = match &vma.path {
            None => ANON_PATH,
            Some(path) => {
                let offset = strings.len() as u32;
                strings.extend_from_slice(path.as_bytes());
                strings.push(0);
                offset
            }
        };
        let tree = build_itree(ivals)?;
        let eager = ivals.iter().any(|i| {
            matches!(
                i.source,
                IntervalSource::Private {
                    eager_writable: true,
                    ..
                }
            )
        });
        vmas.push(VmaDescriptor {
            vbegin: vma.vbegin,
            vend: vma.vend,
            ref_path,
            ref_file_offset: vma.file_offset,
            itree_first: nodes.len() as u32,
            itree_count: tree.nodes().len() as u32,
            prot: vma.prot,
            vflags: if eager {
                VFLAG_EAGER_WRITABLE_PRESENT
            } else {
                0
            },
        });
        nodes.extend_from_slice(tree.nodes());
    }

    // dedup the string table (and everything else) through canonicalization
    let img = JifImage::from_parts(vmas, nodes, vec![], strings, metadata, overlay.data);
    Ok(canonicalize(&img)?)
}

/// Knobs of the build pipeline
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    pub redzone: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            redzone: DEFAULT_REDZONE,
        }
    }
}

/// The snapshot after lazy-free translation and stack trimming: the content a built
/// image materializes to
pub fn post_trim(raw: &RawSnapshot, opts: &BuildOptions) -> Result<RawSnapshot, BuildError> {
    raw.check()?;
    trim_stack(&apply_lazy_free(raw)?, opts.redzone)
}

/// Run the whole preparation pipeline
pub fn build_jif(
    raw: &RawSnapshot,
    backing: &dyn Backing,
    ws: &WriteSet,
    trace: Option<&AccessTrace>,
    meta: &ProcessMeta,
    opts: &BuildOptions,
) -> Result<JifImage, BuildError> {
    let trimmed = post_trim(raw, opts)?;
    let mut overlay = diff_against_backing(&trimmed, backing)?;
    overlay.intervals = classify_write_sets(ws, &overlay.intervals);
    let img = assemble_image(&trimmed, overlay, encode_meta(meta)?)?;

    let img = match trace {
        Some(trace) => reorder_by_trace(&img, trace)?,
        None => img,
    };
    let findings = crate::format::validate(&img);
    if !findings.is_empty() {
        return Err(JifError::InvariantViolation { findings }.into());
    }
    Ok(img)
}

#[cfg(test)]
pub(crate) mod test {
    use super::*;
    use crate::backing::MemBacking;
    use crate::format::prot;
    use crate::overlay::{materialize_vma, resolve_page, PageSource};

    pub(crate) const BASE: u64 = 0x5500_0000_0000;
    pub(crate) const PAGE: u64 = PAGE_SIZE_U64;

    pub(crate) fn anon(vbegin: u64, n_pages: u64, fill: impl Fn(u64) -> u8) -> RawVma {
        let mut data = vec![0u8; (n_pages * PAGE) as usize];
        for p in 0..n_pages {
            data[(p * PAGE) as usize..((p + 1) * PAGE) as usize].fill(fill(p));
        }
        RawVma {
            vbegin,
            vend: vbegin + n_pages * PAGE,
            prot: prot::READ | prot::WRITE,
            path: None,
            file_offset: 0,
            data,
        }
    }

    #[test]
    fn identical_to_backing() {
        let file: Vec<u8> = (0..8 * PAGE).map(|i| (i % 251) as u8).collect();
        let raw = RawSnapshot {
            vmas: vec![RawVma {
                vbegin: BASE,
                vend: BASE + 4 * PAGE,
                prot: prot::READ,
                path: Some("/lib/a.so".into()),
                file_offset: 2 * PAGE,
                data: file[2 * PAGE as usize..6 * PAGE as usize].to_vec(),
            }],
            ..Default::default()
        };
        let backing = MemBacking::from_iter([("/lib/a.so".into(), file)]);
        let overlay = diff_against_backing(&raw, &backing).unwrap();
        assert_eq!(overlay.intervals, vec![vec![]]);

        let img = build_jif(
            &raw,
            &backing,
            &WriteSet::default(),
            None,
            &ProcessMeta::default(),
            &BuildOptions::default(),
        )
        .unwrap();
        assert!(img.data.is_empty());
        assert_eq!(
            resolve_page(&img, BASE + PAGE),
            Ok(PageSource::Shared {
                path: "/lib/a.so",
                file_offset: 3 * PAGE
            })
        );
    }

    #[test]
    fn zero_anonymous() {
        let raw = RawSnapshot {
            vmas: vec![anon(BASE, 16, |_| 0)],
            ..Default::default()
        };
        let overlay = diff_against_backing(&raw, &MemBacking::new()).unwrap();
        assert_eq!(
            overlay.intervals,
            vec![vec![Interval::zero(BASE, BASE + 16 * PAGE)]]
        );
        let img = build_jif(
            &raw,
            &MemBacking::new(),
            &WriteSet::default(),
            None,
            &ProcessMeta::default(),
            &BuildOptions::default(),
        )
        .unwrap();
        assert_eq!(img.data.len(), 0);
    }

    #[test]
    fn missing_backing() {
        let mut vma = anon(BASE, 1, |_| 1);
        vma.path = Some("/missing".into());
        let raw = RawSnapshot {
            vmas: vec![vma],
            ..Default::default()
        };
        assert!(matches!(
            diff_against_backing(&raw, &MemBacking::new()),
            Err(BuildError::Backing(_))
        ));
    }

    #[test]
    fn lazy_free() {
        let raw = RawSnapshot {
            vmas: vec![anon(BASE, 4, |p| p as u8 + 1)],
            lazy_free_ranges: vec![(BASE + PAGE, BASE + 2 * PAGE)],
            ..Default::default()
        };
        let freed = apply_lazy_free(&raw).unwrap();
        assert!(is_zero_page(freed.vmas[0].page(BASE + PAGE)));
        assert_eq!(freed.vmas[0].page(BASE)[0], 1);
        assert_eq!(freed.vmas[0].page(BASE + 2 * PAGE)[0], 3);

        let img = build_jif(
            &raw,
            &MemBacking::new(),
            &WriteSet::default(),
            None,
            &ProcessMeta::default(),
            &BuildOptions::default(),
        )
        .unwrap();
        assert_eq!(resolve_page(&img, BASE + PAGE), Ok(PageSource::Zero));

        let mut empty = raw.clone();
        empty.lazy_free_ranges.clear();
        assert_eq!(apply_lazy_free(&empty).unwrap(), empty);

        let mut outside = raw;
        outside.lazy_free_ranges = vec![(BASE + 3 * PAGE, BASE + 5 * PAGE)];
        assert!(matches!(
            apply_lazy_free(&outside),
            Err(BuildError::RangeOutsideVma { .. })
        ));
    }

    fn stack(sp: u64) -> RawSnapshot {
        RawSnapshot {
            vmas: vec![anon(BASE, 16, |_| 0xee)],
            thread_stacks: vec![ThreadStack { vma: 0, sp }],
            ..Default::default()
        }
    }

    fn trimmed_pages(raw: &RawSnapshot) -> usize {
        let vma = &raw.vmas[0];
        (0..vma.n_pages())
            .filter(|p| is_zero_page(vma.page(vma.vbegin + *p as u64 * PAGE)))
            .count()
    }

    #[test]
    fn trim() {
        // lowest address: nothing to trim
        let raw = stack(BASE);
        assert_eq!(trim_stack(&raw, 128).unwrap(), raw);

        // top of the stack: all but the top page
        let trimmed = trim_stack(&stack(BASE + 16 * PAGE), 128).unwrap();
        assert_eq!(trimmed_pages(&trimmed), 15);
        assert!(!is_zero_page(trimmed.vmas[0].page(BASE + 15 * PAGE)));

        // sp - redzone straddles a page boundary: both pages kept
        let trimmed = trim_stack(&stack(BASE + 8 * PAGE + 64), 128).unwrap();
        assert_eq!(trimmed_pages(&trimmed), 7);
        assert!(!is_zero_page(trimmed.vmas[0].page(BASE + 7 * PAGE)));
        assert!(!is_zero_page(trimmed.vmas[0].page(BASE + 8 * PAGE)));

        assert!(matches!(
            trim_stack(&stack(BASE + 17 * PAGE), 128),
            Err(BuildError::StackPointerOutsideVma { thread: 0, .. })
        ));
    }

    #[test]
    fn write_set_split() {
        let ivals = vec![vec![Interval::private(BASE, BASE + 5 * PAGE, 0, false)]];
        assert_eq!(classify_write_sets(&WriteSet::default(), &ivals), ivals);

        let ws = WriteSet {
            pages: [BASE + 2 * PAGE].into_iter().collect(),
            runs_observed: 1,
        };
        let split = classify_write_sets(&ws, &ivals);
        assert_eq!(
            split,
            vec![vec![
                Interval::private(BASE, BASE + 2 * PAGE, 0, false),
                Interval::private(BASE + 2 * PAGE, BASE + 3 * PAGE, 2 * PAGE, true),
                Interval::private(BASE + 3 * PAGE, BASE + 5 * PAGE, 3 * PAGE, false),
            ]]
        );
    }

    #[test]
    fn content_preserved() {
        let file: Vec<u8> = (0..6 * PAGE).map(|i| (i / PAGE) as u8 + 10).collect();
        let mut mapped = file.clone();
        mapped[PAGE as usize] = 0; // modified page
        mapped[3 * PAGE as usize..4 * PAGE as usize].fill(0); // zeroed page
        let raw = RawSnapshot {
            vmas: vec![
                anon(BASE, 6, |p| if p % 2 == 0 { 0 } else { p as u8 }),
                RawVma {
                    vbegin: BASE + 0x100 * PAGE,
                    vend: BASE + 0x106 * PAGE,
                    prot: prot::READ | prot::WRITE,
                    path: Some("/data/f".into()),
                    file_offset: 0,
                    data: mapped,
                },
            ],
            ..Default::default()
        };
        let backing = MemBacking::from_iter([("/data/f".into(), file)]);
        let ws = WriteSet {
            pages: [BASE + PAGE].into_iter().collect(),
            runs_observed: 1,
        };
        let img = build_jif(
            &raw,
            &backing,
            &ws,
            None,
            &ProcessMeta::default(),
            &BuildOptions::default(),
        )
        .unwrap();
        for (vma, raw_vma) in img.vmas.iter().zip(&raw.vmas) {
            assert_eq!(materialize_vma(&img, vma, &backing).unwrap(), raw_vma.data);
        }
        // 3 nonzero anonymous pages and one modified file page
        assert_eq!(img.data.len() as u64, 4 * PAGE);
        assert_eq!(
            resolve_page(&img, BASE + 0x103 * PAGE),
            Ok(PageSource::Zero)
        );
        assert_eq!(img.vmas[0].vflags, VFLAG_EAGER_WRITABLE_PRESENT);
    }
}
