//! Overlay interval trees and fault-source resolution
//!
//! Each overlay VMA carries a pre-balanced search tree of intervals telling which
//! pages come from the private data section and which are zero-filled. Any page not
//! covered by an interval is served from the VMA's backing file (or is zero when the
//! VMA is anonymous).
//!
//! Trees are stored as a flat array of [`TreeNode`]s: node `i` has its `j`-th child
//! (`0 <= j <= 4`) at index `5 * i + j + 1`, when that index is within the array.
//! Child `j < 4` holds the intervals before slot `j`, child 4 those after the last slot.

use crate::backing::Backing;
use crate::error::{ITreeError, ITreeResult, MaterializeError, ResolveError};
use crate::format::{JifImage, TreeNode, TreeSlot, VmaDescriptor, N_CHILDREN, N_SLOTS};
use crate::utils::{is_page_aligned, PAGE_SIZE, PAGE_SIZE_U64};

/// Where the content of an interval comes from
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntervalSource {
    /// Stored in the data section at `offset`
    Private { offset: u64, eager_writable: bool },
    /// Zero-filled
    Zero,
}

/// A half-open `[start; end)` range of virtual addresses with its source
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Interval {
    pub start: u64,
    pub end: u64,
    pub source: IntervalSource,
}

impl Interval {
    pub fn private(start: u64, end: u64, offset: u64, eager_writable: bool) -> Self {
        Interval {
            start,
            end,
            source: IntervalSource::Private {
                offset,
                eager_writable,
            },
        }
    }

    pub fn zero(start: u64, end: u64) -> Self {
        Interval {
            start,
            end,
            source: IntervalSource::Zero,
        }
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.start <= addr && addr < self.end
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn n_pages(&self) -> u64 {
        self.len() / PAGE_SIZE_U64
    }

    pub fn is_private(&self) -> bool {
        matches!(self.source, IntervalSource::Private { .. })
    }

    /// Data-section offset of a page inside a private interval
    pub fn data_offset_of(&self, addr: u64) -> Option<u64> {
        match self.source {
            IntervalSource::Private { offset, .. } => Some(offset + (addr - self.start)),
            IntervalSource::Zero => None,
        }
    }

    /// Source of the page at `addr` (which must lie inside the interval)
    pub fn page_source(&self, addr: u64) -> IntervalSource {
        match self.source {
            IntervalSource::Private {
                offset,
                eager_writable,
            } => IntervalSource::Private {
                offset: offset + (addr - self.start),
                eager_writable,
            },
            IntervalSource::Zero => IntervalSource::Zero,
        }
    }

    /// Whether `next` directly continues this interval (contiguous in address, in data
    /// offset and with the same flags)
    pub fn continued_by(&self, next: &Interval) -> bool {
        if self.end != next.start {
            return false;
        }
        match (self.source, next.source) {
            (IntervalSource::Zero, IntervalSource::Zero) => true,
            (
                IntervalSource::Private {
                    offset: a,
                    eager_writable: ea,
                },
                IntervalSource::Private {
                    offset: b,
                    eager_writable: eb,
                },
            ) => ea == eb && a + self.len() == b,
            _ => false,
        }
    }
}

/// A read-only view over a serialized overlay tree
#[derive(Debug, Clone, Copy)]
pub struct TreeView<'a> {
    nodes: &'a [TreeNode],
}

/// An owned overlay tree, as produced by [`build_itree`]
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OverlayTree {
    nodes: Vec<TreeNode>,
}

impl OverlayTree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn into_nodes(self) -> Vec<TreeNode> {
        self.nodes
    }

    pub fn view(&self) -> TreeView<'_> {
        TreeView::new(&self.nodes)
    }

    pub fn height(&self) -> usize {
        self.view().height()
    }

    pub fn query(&self, addr: u64) -> Option<Interval> {
        self.view().query(addr)
    }

    pub fn in_order(&self) -> Vec<Interval> {
        self.view().in_order()
    }
}

/// Upper bound on the height of a tree holding `n` intervals: `ceil(log5(n/4 + 1)) + 1`
///
/// Computed in integers as the smallest `k` with `4 * 5^k >= n + 4`, plus one.
pub fn height_bound(n_intervals: usize) -> usize {
    let mut k = 0;
    let mut cap = N_SLOTS;
    while cap < n_intervals + N_SLOTS {
        cap *= N_CHILDREN;
        k += 1;
    }
    k + 1
}

impl<'a> TreeView<'a> {
    pub fn new(nodes: &'a [TreeNode]) -> Self {
        TreeView { nodes }
    }

    pub fn nodes(&self) -> &'a [TreeNode] {
        self.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of levels of the (complete) node array
    pub fn height(&self) -> usize {
        let mut height = 0;
        let mut level_start = 0usize;
        let mut level_len = 1usize;
        while level_start < self.nodes.len() {
            height += 1;
            level_start += level_len;
            level_len *= N_CHILDREN;
        }
        height
    }

    /// Find the interval containing `addr`
    pub fn query(&self, addr: u64) -> Option<Interval> {
        self.query_counting(addr).0
    }

    /// Find the interval containing `addr`, also returning the number of visited nodes
    pub fn query_counting(&self, addr: u64) -> (Option<Interval>, usize) {
        let mut idx = 0;
        let mut visits = 0;
        while let Some(node) = self.nodes.get(idx) {
            visits += 1;
            let mut child = N_SLOTS;
            for (j, slot) in node.slots.iter().enumerate() {
                if slot.is_unused() || addr < slot.start {
                    child = j;
                    break;
                }
                if addr < slot.end {
                    return (slot.interval(), visits);
                }
            }
            idx = N_CHILDREN * idx + child + 1;
        }
        (None, visits)
    }

    /// All intervals in search order (ascending addresses for a valid tree)
    pub fn in_order(&self) -> Vec<Interval> {
        let mut out = Vec::new();
        self.walk(0, &mut out);
        out
    }

    fn walk(&self, idx: usize, out: &mut Vec<Interval>) {
        let Some(node) = self.nodes.get(idx) else {
            return;
        };
        for (j, slot) in node.slots.iter().enumerate() {
            self.walk(N_CHILDREN * idx + j + 1, out);
            if slot.is_unused() {
                return;
            }
            if let Some(ival) = slot.interval() {
                out.push(ival);
            }
        }
        self.walk(N_CHILDREN * idx + N_SLOTS + 1, out);
    }
}

/// Build a pre-balanced tree from sorted, disjoint, page-aligned intervals
///
/// The tree has exactly `ceil(n / 4)` nodes. Slots are filled in search order so that an
/// in-order traversal returns the input.
pub fn build_itree(intervals: &[Interval]) -> ITreeResult<OverlayTree> {
    for ival in intervals {
        if ival.start >= ival.end || !is_page_aligned(ival.start) || !is_page_aligned(ival.end) {
            return Err(ITreeError::InvalidInterval {
                start: ival.start,
                end: ival.end,
            });
        }
    }
    for w in intervals.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.start > b.start {
            return Err(ITreeError::UnsortedInput {
                first: (a.start, a.end),
                second: (b.start, b.end),
            });
        }
        if a.end > b.start {
            return Err(ITreeError::OverlappingIntervals {
                first: (a.start, a.end),
                second: (b.start, b.end),
            });
        }
    }

    let n_nodes = intervals.len().div_ceil(N_SLOTS);
    let mut nodes = vec![TreeNode::default(); n_nodes];
    let mut rest = intervals.iter();
    fill(&mut nodes, &mut rest, 0);
    debug_assert!(rest.next().is_none());
    Ok(OverlayTree { nodes })
}

/// Fill the subtree at `idx` in order; returns false once the input is exhausted
fn fill<'a>(
    nodes: &mut [TreeNode],
    rest: &mut impl Iterator<Item = &'a Interval>,
    idx: usize,
) -> bool {
    if idx >= nodes.len() {
        return true;
    }
    for j in 0..N_SLOTS {
        if !fill(nodes, rest, N_CHILDREN * idx + j + 1) {
            return false;
        }
        match rest.next() {
            Some(ival) => nodes[idx].slots[j] = TreeSlot::from_interval(ival),
            None => return false,
        }
    }
    fill(nodes, rest, N_CHILDREN * idx + N_SLOTS + 1)
}

/// Find the interval of a tree containing `addr`
pub fn query_interval(tree: &OverlayTree, addr: u64) -> Option<Interval> {
    tree.query(addr)
}

/// The source a page is restored from
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PageSource<'a> {
    /// Private page stored in the data section
    Private {
        data_offset: u64,
        eager_writable: bool,
    },
    /// Page shared with the backing file
    Shared { path: &'a str, file_offset: u64 },
    /// Fresh zero page
    Zero,
}

impl PageSource<'_> {
    pub fn kind(&self) -> crate::format::SegmentKind {
        use crate::format::SegmentKind;
        match self {
            PageSource::Private { .. } => SegmentKind::Private,
            PageSource::Shared { .. } => SegmentKind::Shared,
            PageSource::Zero => SegmentKind::Zero,
        }
    }
}

/// Resolve a page given the VMA containing it
pub fn resolve_in_vma<'a>(img: &'a JifImage, vma: &VmaDescriptor, addr: u64) -> PageSource<'a> {
    match img.tree(vma).query(addr).map(|ival| ival.page_source(addr)) {
        Some(IntervalSource::Private {
            offset,
            eager_writable,
        }) => PageSource::Private {
            data_offset: offset,
            eager_writable,
        },
        Some(IntervalSource::Zero) => PageSource::Zero,
        None => match img.vma_path(vma) {
            Some(path) => PageSource::Shared {
                path,
                file_offset: vma.ref_file_offset + (addr - vma.vbegin),
            },
            None => PageSource::Zero,
        },
    }
}

/// Decide where the page at `addr` is restored from
pub fn resolve_page(img: &JifImage, addr: u64) -> Result<PageSource<'_>, ResolveError> {
    if !is_page_aligned(addr) {
        return Err(ResolveError::Unaligned { addr });
    }
    let vma = img
        .find_vma(addr)
        .map(|idx| &img.vmas[idx])
        .ok_or(ResolveError::Unmapped { addr })?;
    Ok(resolve_in_vma(img, vma, addr))
}

/// Reassemble the full content of a VMA
pub fn materialize_vma(
    img: &JifImage,
    vma: &VmaDescriptor,
    backing: &dyn Backing,
) -> Result<Vec<u8>, MaterializeError> {
    let mut out = vec![0u8; (vma.vend - vma.vbegin) as usize];
    for (i, page) in out.chunks_exact_mut(PAGE_SIZE).enumerate() {
        let addr = vma.vbegin + i as u64 * PAGE_SIZE_U64;
        match resolve_in_vma(img, vma, addr) {
            PageSource::Private { data_offset, .. } => {
                let src = img
                    .data
                    .get(data_offset as usize..data_offset as usize + PAGE_SIZE)
                    .ok_or(MaterializeError::DataOutOfBounds {
                        offset: data_offset,
                    })?;
                page.copy_from_slice(src);
            }
            PageSource::Shared { path, file_offset } => backing.read_at(path, file_offset, page)?,
            PageSource::Zero => {}
        }
    }
    Ok(out)
}

/// Every delta interval of the image with the index of its VMA, in ascending address
/// order
///
/// A delta interval is a maximal run of private pages of one VMA that are contiguous
/// both in memory and in the data section and share the same eager-writable flag.
/// Stored intervals satisfying these conditions are coalesced.
pub fn iter_private_intervals(img: &JifImage) -> impl Iterator<Item = (usize, Interval)> + '_ {
    img.vmas.iter().enumerate().flat_map(move |(idx, vma)| {
        let mut runs: Vec<Interval> = Vec::new();
        for ival in img
            .tree(vma)
            .in_order()
            .into_iter()
            .filter(Interval::is_private)
        {
            match runs.last_mut() {
                Some(last) if last.continued_by(&ival) => last.end = ival.end,
                _ => runs.push(ival),
            }
        }
        runs.into_iter().map(move |ival| (idx, ival))
    })
}

/// Number of plain VMAs needed to express the image without overlay trees
///
/// Every stored interval and every gap between them (or towards the VMA boundaries)
/// becomes a separate mapping.
pub fn fragment_count(img: &JifImage) -> usize {
    img.vmas
        .iter()
        .map(|vma| {
            let ivals = img.tree(vma).in_order();
            let mut count = 0;
            let mut cursor = vma.vbegin;
            for ival in &ivals {
                if ival.start > cursor {
                    count += 1;
                }
                count += 1;
                cursor = ival.end;
            }
            if cursor < vma.vend {
                count += 1;
            }
            count.max(1)
        })
        .sum()
}
