//! Structural validation of a [`JifImage`]
//!
//! Validation never stops at the first problem: every violated invariant yields a
//! [`Finding`]. The table checksum is deliberately not part of validation (it is a
//! property of the serialized bytes, checked by [`super::parse_jif`]); see
//! [`checksum_finding`] for callers that want it reported alongside the others.

use std::fmt;

use super::*;
use crate::overlay::{Interval, IntervalSource};
use crate::utils::is_page_aligned;

/// A single invariant violation
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    /// Short machine-readable name of the violated invariant (e.g. `vma-overlap`)
    pub code: &'static str,
    /// Indices of the offending records (VMA, node or ord-segment indices depending on
    /// the code)
    pub indices: Vec<usize>,
    pub detail: String,
}

impl Finding {
    pub fn new(code: &'static str, indices: Vec<usize>, detail: impl Into<String>) -> Self {
        Finding {
            code,
            indices,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code)?;
        if !self.indices.is_empty() {
            let idx = self
                .indices
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",");
            write!(f, " [{idx}]")?;
        }
        write!(f, ": {}", self.detail)
    }
}

/// Report a checksum mismatch as a finding (empty if the checksum is correct)
pub fn checksum_finding(img: &JifImage) -> Option<Finding> {
    let computed = img.compute_checksum();
    (computed != img.header.table_checksum).then(|| {
        Finding::new(
            "bad-checksum",
            vec![],
            format!(
                "header says {:#010x}, tables hash to {computed:#010x}",
                img.header.table_checksum
            ),
        )
    })
}

/// Check every invariant of the image
pub fn validate(img: &JifImage) -> Vec<Finding> {
    let mut v = Validator {
        img,
        findings: Vec::new(),
    };
    v.header();
    v.vmas();
    v.trees();
    v.data();
    v.ord();
    v.findings
}

struct Validator<'a> {
    img: &'a JifImage,
    findings: Vec<Finding>,
}

impl Validator<'_> {
    fn push(&mut self, code: &'static str, indices: Vec<usize>, detail: impl Into<String>) {
        self.findings.push(Finding::new(code, indices, detail));
    }

    fn header(&mut self) {
        let img = self.img;
        let h = &img.header;
        if h.magic != JIF_MAGIC {
            self.push("bad-magic", vec![], format!("{:x?}", h.magic));
        }
        if h.version != JIF_VERSION {
            self.push(
                "unsupported-version",
                vec![],
                format!("version {}", h.version),
            );
        }
        if h.flags != 0 {
            self.push("unknown-flags", vec![], format!("flags {:#06x}", h.flags));
        }

        let counts = [
            ("n_vmas", h.n_vmas as u64, img.vmas.len() as u64),
            (
                "n_itree_nodes",
                h.n_itree_nodes as u64,
                img.nodes.len() as u64,
            ),
            (
                "n_ord_segments",
                h.n_ord_segments as u64,
                img.ord.len() as u64,
            ),
            (
                "strings_size",
                h.strings_size as u64,
                img.strings.len() as u64,
            ),
            ("metadata_size", h.metadata_size, img.metadata.len() as u64),
        ];
        for (field, declared, actual) in counts {
            if declared != actual {
                self.push(
                    "count-mismatch",
                    vec![],
                    format!("header {field} = {declared}, tables hold {actual}"),
                );
            }
        }

        if !is_page_aligned(h.data_offset) {
            self.push(
                "data-offset-unaligned",
                vec![],
                format!("data offset {:#x}", h.data_offset),
            );
        }
        if h.data_offset < img.tables_end() {
            self.push(
                "data-offset-overlap",
                vec![],
                format!(
                    "data offset {:#x} lies before the end of the tables ({:#x})",
                    h.data_offset,
                    img.tables_end()
                ),
            );
        }
        if !is_page_aligned(img.data.len() as u64) {
            self.push(
                "data-unaligned",
                vec![],
                format!("data section is {} B long", img.data.len()),
            );
        }
        if !img.strings.is_empty() && img.strings.last() != Some(&0) {
            self.push(
                "strings-unterminated",
                vec![],
                "string table does not end with NUL",
            );
        }
    }

    fn vmas(&mut self) {
        let img = self.img;
        for (i, vma) in img.vmas.iter().enumerate() {
            if vma.vbegin >= vma.vend {
                self.push(
                    "vma-empty",
                    vec![i],
                    format!("[{:#x}; {:#x})", vma.vbegin, vma.vend),
                );
            }
            if !is_page_aligned(vma.vbegin) || !is_page_aligned(vma.vend) {
                self.push(
                    "vma-unaligned",
                    vec![i],
                    format!("[{:#x}; {:#x})", vma.vbegin, vma.vend),
                );
            }
            if vma.prot & !prot::ALL != 0 {
                self.push("vma-bad-prot", vec![i], format!("prot {:#04x}", vma.prot));
            }
            if vma.vflags & !VFLAG_EAGER_WRITABLE_PRESENT != 0 {
                self.push(
                    "vma-bad-flags",
                    vec![i],
                    format!("vflags {:#04x}", vma.vflags),
                );
            }
            if vma.is_anonymous() {
                if vma.ref_file_offset != 0 {
                    self.push(
                        "vma-anon-offset",
                        vec![i],
                        format!("anonymous VMA with file offset {:#x}", vma.ref_file_offset),
                    );
                }
            } else {
                if !self.valid_path_offset(vma.ref_path) {
                    self.push(
                        "vma-path-invalid",
                        vec![i],
                        format!("string table offset {:#x}", vma.ref_path),
                    );
                }
                if !is_page_aligned(vma.ref_file_offset) {
                    self.push(
                        "vma-file-offset-unaligned",
                        vec![i],
                        format!("file offset {:#x}", vma.ref_file_offset),
                    );
                }
            }
            let end = vma.itree_first as u64 + vma.itree_count as u64;
            if end > img.nodes.len() as u64 {
                self.push(
                    "vma-itree-oob",
                    vec![i],
                    format!(
                        "nodes [{}; {}) but only {} nodes",
                        vma.itree_first,
                        end,
                        img.nodes.len()
                    ),
                );
            }
        }

        for i in 1..img.vmas.len() {
            let (a, b) = (&img.vmas[i - 1], &img.vmas[i]);
            if a.vbegin > b.vbegin {
                self.push(
                    "vma-unsorted",
                    vec![i - 1, i],
                    format!("{:#x} comes before {:#x}", a.vbegin, b.vbegin),
                );
            }
        }

        // overlaps, detected on a sorted view so that unsorted tables are handled too
        let mut order: Vec<usize> = (0..img.vmas.len()).collect();
        order.sort_by_key(|i| (img.vmas[*i].vbegin, *i));
        let mut reach: Option<usize> = None; // VMA reaching furthest so far
        for &i in &order {
            let vma = &img.vmas[i];
            if let Some(r) = reach {
                if img.vmas[r].vend > vma.vbegin {
                    let (lo, hi) = (r.min(i), r.max(i));
                    self.push(
                        "vma-overlap",
                        vec![lo, hi],
                        format!(
                            "[{:#x}; {:#x}) and [{:#x}; {:#x})",
                            img.vmas[lo].vbegin,
                            img.vmas[lo].vend,
                            img.vmas[hi].vbegin,
                            img.vmas[hi].vend
                        ),
                    );
                }
            }
            if reach.is_none_or(|r| vma.vend > img.vmas[r].vend) {
                reach = Some(i);
            }
        }
    }

    fn valid_path_offset(&self, offset: u32) -> bool {
        let strings = &self.img.strings;
        let o = offset as usize;
        if o >= strings.len() || (o > 0 && strings[o - 1] != 0) {
            return false;
        }
        self.img.path_at(offset).is_some_and(|p| !p.is_empty())
    }

    fn trees(&mut self) {
        let img = self.img;
        let mut owner: Vec<Option<usize>> = vec![None; img.nodes.len()];

        for (i, vma) in img.vmas.iter().enumerate() {
            let Some(nodes) = img.nodes.get(vma.itree_range()) else {
                continue;
            };
            for n in vma.itree_range() {
                match owner[n] {
                    Some(other) => self.push(
                        "itree-node-shared",
                        vec![other, i],
                        format!("node {n} belongs to two VMAs"),
                    ),
                    None => owner[n] = Some(i),
                }
            }
            self.tree(i, vma, nodes);
        }

        for (n, o) in owner.iter().enumerate() {
            if o.is_none() {
                self.push(
                    "itree-orphan-node",
                    vec![n],
                    format!("node {n} belongs to no VMA"),
                );
            }
        }
    }

    fn tree(&mut self, vma_idx: usize, vma: &VmaDescriptor, nodes: &[TreeNode]) {
        let first = vma.itree_first as usize;
        let mut slots_ok = true;
        let mut has_eager = false;

        for (k, node) in nodes.iter().enumerate() {
            let node_idx = first + k;
            let mut seen_unused = false;
            for slot in &node.slots {
                if slot.is_unused() {
                    if slot.off != 0 {
                        self.push(
                            "node-unused-nonzero",
                            vec![node_idx],
                            format!("unused slot with offset {:#x}", slot.off),
                        );
                    }
                    seen_unused = true;
                    continue;
                }
                if seen_unused {
                    slots_ok = false;
                    self.push(
                        "node-slot-order",
                        vec![node_idx],
                        "used slot after an unused one",
                    );
                }
                if slot.start >= slot.end
                    || !is_page_aligned(slot.start)
                    || !is_page_aligned(slot.end)
                {
                    slots_ok = false;
                    self.push(
                        "node-slot-invalid",
                        vec![node_idx],
                        format!("[{:#x}; {:#x})", slot.start, slot.end),
                    );
                    continue;
                }
                match decode_offset(slot.off) {
                    None => self.push(
                        "node-offset-range",
                        vec![node_idx],
                        format!("stored offset {:#x}", slot.off),
                    ),
                    Some(IntervalSource::Private { eager_writable, .. }) => {
                        has_eager |= eager_writable
                    }
                    Some(IntervalSource::Zero) => {}
                }
                if slot.start < vma.vbegin || slot.end > vma.vend {
                    self.push(
                        "itree-out-of-vma",
                        vec![vma_idx, node_idx],
                        format!(
                            "[{:#x}; {:#x}) outside of [{:#x}; {:#x})",
                            slot.start, slot.end, vma.vbegin, vma.vend
                        ),
                    );
                }
            }
        }

        let expect_eager = vma.vflags & VFLAG_EAGER_WRITABLE_PRESENT != 0;
        if has_eager != expect_eager {
            self.push(
                "vma-eager-flag",
                vec![vma_idx],
                format!(
                    "EAGER_WRITABLE_PRESENT is {expect_eager} but eager intervals {}",
                    if has_eager { "exist" } else { "do not exist" }
                ),
            );
        }

        if !slots_ok {
            // the search structure is meaningless if slots are malformed
            return;
        }

        let view = TreeView::new(nodes);
        let in_order = view.in_order();
        for w in in_order.windows(2) {
            if w[0].start >= w[1].start {
                self.push(
                    "itree-unsorted",
                    vec![vma_idx],
                    format!("{:#x} comes before {:#x} in order", w[0].start, w[1].start),
                );
            } else if w[0].end > w[1].start {
                self.push(
                    "itree-overlap",
                    vec![vma_idx],
                    format!(
                        "[{:#x}; {:#x}) and [{:#x}; {:#x})",
                        w[0].start, w[0].end, w[1].start, w[1].end
                    ),
                );
            }
        }
        let n_intervals = in_order.len();
        if n_intervals > 0 && nodes.len() != n_intervals.div_ceil(N_SLOTS) {
            self.push(
                "itree-unbalanced",
                vec![vma_idx],
                format!(
                    "{} nodes for {} intervals (expected {})",
                    nodes.len(),
                    n_intervals,
                    n_intervals.div_ceil(N_SLOTS)
                ),
            );
        }
        if n_intervals == 0 && !nodes.is_empty() {
            self.push(
                "itree-unbalanced",
                vec![vma_idx],
                format!("{} nodes without intervals", nodes.len()),
            );
        }
        // every interval must be reachable through the search path
        for ival in &in_order {
            if view.query(ival.start).map(|found| found.start) != Some(ival.start) {
                self.push(
                    "itree-unreachable",
                    vec![vma_idx],
                    format!(
                        "interval starting at {:#x} is not found by search",
                        ival.start
                    ),
                );
            }
        }
    }

    fn data(&mut self) {
        let img = self.img;
        let data_len = img.data.len() as u64;
        let mut extents: Vec<(u64, u64, usize)> = Vec::new();

        for (i, vma) in img.vmas.iter().enumerate() {
            let Some(nodes) = img.nodes.get(vma.itree_range()) else {
                continue;
            };
            for slot in nodes.iter().flat_map(|n| n.slots.iter()) {
                let Some(Interval {
                    start,
                    end,
                    source: IntervalSource::Private { offset, .. },
                }) = slot.interval()
                else {
                    continue;
                };
                if start >= end {
                    continue;
                }
                let len = end - start;
                if offset.checked_add(len).is_none_or(|e| e > data_len) {
                    self.push(
                        "data-oob",
                        vec![i],
                        format!(
                            "[{start:#x}; {end:#x}) stored at [{offset:#x}; +{len:#x}) past data end {data_len:#x}"
                        ),
                    );
                    continue;
                }
                extents.push((offset, offset + len, i));
            }
        }

        extents.sort_unstable();
        for w in extents.windows(2) {
            if w[0].1 > w[1].0 {
                self.push(
                    "data-overlap",
                    vec![w[0].2, w[1].2],
                    format!(
                        "data ranges [{:#x}; {:#x}) and [{:#x}; {:#x}) overlap",
                        w[0].0, w[0].1, w[1].0, w[1].1
                    ),
                );
            }
        }
    }

    fn ord(&mut self) {
        let img = self.img;
        for (i, seg) in img.ord.iter().enumerate() {
            if seg.n_pages == 0 {
                self.push("ord-empty", vec![i], format!("segment at {:#x}", seg.vaddr));
                continue;
            }
            if !is_page_aligned(seg.vaddr) {
                self.push("ord-unaligned", vec![i], format!("vaddr {:#x}", seg.vaddr));
                continue;
            }
            let vma = img.find_vma(seg.vaddr).map(|v| &img.vmas[v]);
            let Some(vma) = vma.filter(|v| {
                seg.vaddr
                    .checked_add(seg.n_pages as u64 * PAGE_SIZE_U64)
                    .is_some_and(|e| e <= v.vend)
            }) else {
                self.push(
                    "ord-out-of-vma",
                    vec![i],
                    format!(
                        "[{:#x}; +{} pages) is not inside a single VMA",
                        seg.vaddr, seg.n_pages
                    ),
                );
                continue;
            };

            let tree = img.tree(vma);
            let mismatch = seg.pages().find(|addr| {
                let kind = match tree.query(*addr).map(|ival| ival.source) {
                    Some(IntervalSource::Private { .. }) => SegmentKind::Private,
                    Some(IntervalSource::Zero) => SegmentKind::Zero,
                    None if vma.is_anonymous() => SegmentKind::Zero,
                    None => SegmentKind::Shared,
                };
                kind != seg.kind
            });
            if let Some(addr) = mismatch {
                self.push(
                    "ord-kind-mismatch",
                    vec![i],
                    format!("page {addr:#x} does not resolve as {}", seg.kind.name()),
                );
            }
        }
    }
}
