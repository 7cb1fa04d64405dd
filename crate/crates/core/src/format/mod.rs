//! The on-disk JIF container
//!
//! Layout (all integers little-endian, all records packed):
//!
//! ```text
//! +----------------------+  0
//! | header (44 B)        |
//! +----------------------+
//! | VMA table            |  n_vmas × 38 B
//! | tree-node array      |  n_itree_nodes × 96 B
//! | ord-segment array    |  n_ord_segments × 13 B
//! | string table         |  strings_size B (NUL-terminated paths)
//! | metadata blob        |  metadata_size B
//! +----------------------+
//! | zero padding         |
//! +----------------------+  data_offset (multiple of 4096)
//! | data section         |  private pages
//! +----------------------+
//! ```
//!
//! The table checksum is a CRC-32 (IEEE) over every byte from the start of the VMA
//! table through the end of the metadata blob.

mod canon;
mod stats;
mod validate;

pub use canon::canonicalize;
pub use stats::{stats, StatsCounts, StatsRecord};
pub use validate::{checksum_finding, validate, Finding};

use crate::error::{JifError, JifResult};
use crate::overlay::{Interval, IntervalSource, TreeView};
use crate::utils::{page_align, PAGE_SIZE_U64};

/// Magic number: `wJIF`
pub const JIF_MAGIC: [u8; 4] = [0x77, 0x4a, 0x49, 0x46];
pub const JIF_VERSION: u16 = 1;

/// String-table offset meaning "anonymous VMA"
pub const ANON_PATH: u32 = u32::MAX;

/// Stored interval offset meaning "zero-filled interval"
pub const ZERO_OFFSET: u64 = u64::MAX;

/// Number of interval slots per tree node
pub const N_SLOTS: usize = 4;
/// Number of children per tree node
pub const N_CHILDREN: usize = N_SLOTS + 1;

/// VMA protection bits
pub mod prot {
    pub const READ: u8 = 1;
    pub const WRITE: u8 = 2;
    pub const EXEC: u8 = 4;
    pub const ALL: u8 = READ | WRITE | EXEC;

    /// Render protections as `rwx` letters (`-` when absent)
    pub fn to_letters(prot: u8) -> String {
        [(READ, 'r'), (WRITE, 'w'), (EXEC, 'x')]
            .iter()
            .map(|(bit, c)| if prot & bit != 0 { *c } else { '-' })
            .collect()
    }

    /// Parse `rwx-` letters
    pub fn from_letters(s: &str) -> Option<u8> {
        let mut prot = 0;
        for c in s.chars() {
            prot |= match c {
                'r' => READ,
                'w' => WRITE,
                'x' => EXEC,
                '-' | 'p' | 's' => 0,
                _ => return None,
            };
        }
        Some(prot)
    }
}

/// The VMA has at least one interval flagged eager-writable
pub const VFLAG_EAGER_WRITABLE_PRESENT: u8 = 1;

/// The fixed-size file header
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JifHeader {
    pub magic: [u8; 4],
    pub version: u16,
    pub flags: u16,
    pub n_vmas: u32,
    pub n_itree_nodes: u32,
    pub n_ord_segments: u32,
    pub strings_size: u32,
    pub metadata_size: u64,
    pub data_offset: u64,
    pub table_checksum: u32,
}

/// One overlay VMA
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VmaDescriptor {
    pub vbegin: u64,
    pub vend: u64,
    /// offset into the string table, or [`ANON_PATH`]
    pub ref_path: u32,
    pub ref_file_offset: u64,
    pub itree_first: u32,
    pub itree_count: u32,
    pub prot: u8,
    pub vflags: u8,
}

/// One interval slot of a tree node, exactly as serialized
///
/// `off` is either [`ZERO_OFFSET`] or `(data_offset >> 12) << 1 | eager_writable`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TreeSlot {
    pub start: u64,
    pub end: u64,
    pub off: u64,
}

/// A node of an overlay tree: [`N_SLOTS`] interval slots, used slots first
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TreeNode {
    pub slots: [TreeSlot; N_SLOTS],
}

/// Where the pages of an ordering segment come from
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum SegmentKind {
    Private = 0,
    Shared = 1,
    Zero = 2,
}

/// A run of pages in access order
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrdSegment {
    pub vaddr: u64,
    pub n_pages: u32,
    pub kind: SegmentKind,
}

/// In-memory model of a complete JIF
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JifImage {
    pub header: JifHeader,
    pub vmas: Vec<VmaDescriptor>,
    pub nodes: Vec<TreeNode>,
    pub ord: Vec<OrdSegment>,
    pub strings: Vec<u8>,
    pub metadata: Vec<u8>,
    pub data: Vec<u8>,
}

impl JifHeader {
    pub const SERIALIZED_SIZE: usize = 4 + 2 + 2 + 4 + 4 + 4 + 4 + 8 + 8 + 4;

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&self.n_vmas.to_le_bytes());
        out.extend_from_slice(&self.n_itree_nodes.to_le_bytes());
        out.extend_from_slice(&self.n_ord_segments.to_le_bytes());
        out.extend_from_slice(&self.strings_size.to_le_bytes());
        out.extend_from_slice(&self.metadata_size.to_le_bytes());
        out.extend_from_slice(&self.data_offset.to_le_bytes());
        out.extend_from_slice(&self.table_checksum.to_le_bytes());
    }

    fn read_from(r: &mut Reader) -> Self {
        JifHeader {
            magic: r.array(),
            version: r.u16(),
            flags: r.u16(),
            n_vmas: r.u32(),
            n_itree_nodes: r.u32(),
            n_ord_segments: r.u32(),
            strings_size: r.u32(),
            metadata_size: r.u64(),
            data_offset: r.u64(),
            table_checksum: r.u32(),
        }
    }

    /// Total size of the tables described by this header (excluding the header itself)
    fn tables_size(&self) -> u64 {
        self.n_vmas as u64 * VmaDescriptor::SERIALIZED_SIZE as u64
            + self.n_itree_nodes as u64 * TreeNode::SERIALIZED_SIZE as u64
            + self.n_ord_segments as u64 * OrdSegment::SERIALIZED_SIZE as u64
            + self.strings_size as u64
            + self.metadata_size
    }
}

impl VmaDescriptor {
    pub const SERIALIZED_SIZE: usize = 8 + 8 + 4 + 8 + 4 + 4 + 1 + 1;

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.vbegin.to_le_bytes());
        out.extend_from_slice(&self.vend.to_le_bytes());
        out.extend_from_slice(&self.ref_path.to_le_bytes());
        out.extend_from_slice(&self.ref_file_offset.to_le_bytes());
        out.extend_from_slice(&self.itree_first.to_le_bytes());
        out.extend_from_slice(&self.itree_count.to_le_bytes());
        out.push(self.prot);
        out.push(self.vflags);
    }

    fn read_from(r: &mut Reader) -> Self {
        VmaDescriptor {
            vbegin: r.u64(),
            vend: r.u64(),
            ref_path: r.u32(),
            ref_file_offset: r.u64(),
            itree_first: r.u32(),
            itree_count: r.u32(),
            prot: r.u8(),
            vflags: r.u8(),
        }
    }

    pub fn is_anonymous(&self) -> bool {
        self.ref_path == ANON_PATH
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.vbegin <= addr && addr < self.vend
    }

    pub fn n_pages(&self) -> u64 {
        self.vend.saturating_sub(self.vbegin) / PAGE_SIZE_U64
    }

    /// The `[first, first + count)` span of the tree-node array backing this VMA
    pub fn itree_range(&self) -> std::ops::Range<usize> {
        self.itree_first as usize..self.itree_first as usize + self.itree_count as usize
    }
}

impl TreeSlot {
    pub fn is_unused(&self) -> bool {
        self.start == 0 && self.end == 0
    }

    /// Encode an interval into its serialized slot
    pub fn from_interval(ival: &Interval) -> Self {
        TreeSlot {
            start: ival.start,
            end: ival.end,
            off: encode_offset(ival.source),
        }
    }

    /// Decode the slot (`None` if unused or if the stored offset is out of range)
    pub fn interval(&self) -> Option<Interval> {
        if self.is_unused() {
            return None;
        }
        decode_offset(self.off).map(|source| Interval {
            start: self.start,
            end: self.end,
            source,
        })
    }
}

/// Encode an interval source into the stored `off` field
pub fn encode_offset(source: IntervalSource) -> u64 {
    match source {
        IntervalSource::Zero => ZERO_OFFSET,
        IntervalSource::Private {
            offset,
            eager_writable,
        } => ((offset >> 12) << 1) | eager_writable as u64,
    }
}

/// Decode a stored `off` field (`None` when the page number does not fit in 64 bits)
pub fn decode_offset(off: u64) -> Option<IntervalSource> {
    if off == ZERO_OFFSET {
        return Some(IntervalSource::Zero);
    }
    let page_number = off >> 1;
    if page_number > (u64::MAX >> 12) {
        return None;
    }
    Some(IntervalSource::Private {
        offset: page_number << 12,
        eager_writable: off & 1 == 1,
    })
}

impl TreeNode {
    pub const SERIALIZED_SIZE: usize = N_SLOTS * 3 * 8;

    fn write_to(&self, out: &mut Vec<u8>) {
        for slot in &self.slots {
            out.extend_from_slice(&slot.start.to_le_bytes());
            out.extend_from_slice(&slot.end.to_le_bytes());
            out.extend_from_slice(&slot.off.to_le_bytes());
        }
    }

    fn read_from(r: &mut Reader) -> Self {
        let mut node = TreeNode::default();
        for slot in node.slots.iter_mut() {
            *slot = TreeSlot {
                start: r.u64(),
                end: r.u64(),
                off: r.u64(),
            };
        }
        node
    }

    pub fn n_used(&self) -> usize {
        self.slots.iter().filter(|s| !s.is_unused()).count()
    }
}

impl SegmentKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(SegmentKind::Private),
            1 => Some(SegmentKind::Shared),
            2 => Some(SegmentKind::Zero),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SegmentKind::Private => "private",
            SegmentKind::Shared => "shared",
            SegmentKind::Zero => "zero",
        }
    }
}

impl OrdSegment {
    pub const SERIALIZED_SIZE: usize = 8 + 4 + 1;

    pub fn end(&self) -> u64 {
        self.vaddr + self.n_pages as u64 * PAGE_SIZE_U64
    }

    /// Page addresses covered by the segment
    pub fn pages(&self) -> impl Iterator<Item = u64> {
        let vaddr = self.vaddr;
        (0..self.n_pages as u64).map(move |i| vaddr + i * PAGE_SIZE_U64)
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.vaddr.to_le_bytes());
        out.extend_from_slice(&self.n_pages.to_le_bytes());
        out.push(self.kind as u8);
    }
}

impl JifImage {
    /// Assemble an image from its tables, computing a fresh header
    pub fn from_parts(
        vmas: Vec<VmaDescriptor>,
        nodes: Vec<TreeNode>,
        ord: Vec<OrdSegment>,
        strings: Vec<u8>,
        metadata: Vec<u8>,
        data: Vec<u8>,
    ) -> Self {
        let mut img = JifImage {
            header: JifHeader {
                magic: JIF_MAGIC,
                version: JIF_VERSION,
                flags: 0,
                n_vmas: 0,
                n_itree_nodes: 0,
                n_ord_segments: 0,
                strings_size: 0,
                metadata_size: 0,
                data_offset: 0,
                table_checksum: 0,
            },
            vmas,
            nodes,
            ord,
            strings,
            metadata,
            data,
        };
        img.seal();
        img
    }

    /// An image without any content
    pub fn empty() -> Self {
        Self::from_parts(vec![], vec![], vec![], vec![], vec![], vec![])
    }

    /// Recompute the header from the tables: counts, sizes, the minimal data offset and
    /// the table checksum
    pub fn seal(&mut self) {
        self.header.magic = JIF_MAGIC;
        self.header.version = JIF_VERSION;
        self.header.n_vmas = self.vmas.len() as u32;
        self.header.n_itree_nodes = self.nodes.len() as u32;
        self.header.n_ord_segments = self.ord.len() as u32;
        self.header.strings_size = self.strings.len() as u32;
        self.header.metadata_size = self.metadata.len() as u64;
        self.header.data_offset = self.min_data_offset();
        self.header.table_checksum = self.compute_checksum();
    }

    /// Byte size of header and tables
    pub fn tables_end(&self) -> u64 {
        JifHeader::SERIALIZED_SIZE as u64
            + (self.vmas.len() * VmaDescriptor::SERIALIZED_SIZE) as u64
            + (self.nodes.len() * TreeNode::SERIALIZED_SIZE) as u64
            + (self.ord.len() * OrdSegment::SERIALIZED_SIZE) as u64
            + self.strings.len() as u64
            + self.metadata.len() as u64
    }

    /// Smallest legal data offset
    pub fn min_data_offset(&self) -> u64 {
        page_align(self.tables_end())
    }

    /// Serialize the checksummed table region
    pub fn table_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity((self.tables_end() as usize) - JifHeader::SERIALIZED_SIZE);
        self.write_tables(&mut out);
        out
    }

    fn write_tables(&self, out: &mut Vec<u8>) {
        self.vmas.iter().for_each(|v| v.write_to(out));
        self.nodes.iter().for_each(|n| n.write_to(out));
        self.ord.iter().for_each(|o| o.write_to(out));
        out.extend_from_slice(&self.strings);
        out.extend_from_slice(&self.metadata);
    }

    /// CRC-32 over the table region as it would be serialized
    pub fn compute_checksum(&self) -> u32 {
        crc32fast::hash(&self.table_bytes())
    }

    /// Look up a NUL-terminated path in the string table
    pub fn path_at(&self, offset: u32) -> Option<&str> {
        if offset == ANON_PATH {
            return None;
        }
        let rest = self.strings.get(offset as usize..)?;
        let len = rest.iter().position(|b| *b == 0)?;
        std::str::from_utf8(&rest[..len]).ok()
    }

    /// Backing path of a VMA (`None` if anonymous)
    pub fn vma_path(&self, vma: &VmaDescriptor) -> Option<&str> {
        self.path_at(vma.ref_path)
    }

    /// Index of the VMA mapping an address
    pub fn find_vma(&self, addr: u64) -> Option<usize> {
        let idx = self.vmas.partition_point(|v| v.vbegin <= addr);
        if idx == 0 {
            return None;
        }
        self.vmas[idx - 1].contains(addr).then_some(idx - 1)
    }

    /// View over the overlay tree of a VMA (empty if its node span is out of bounds)
    pub fn tree(&self, vma: &VmaDescriptor) -> TreeView<'_> {
        TreeView::new(self.nodes.get(vma.itree_range()).unwrap_or(&[]))
    }

    /// All the (decoded) intervals of a VMA in address order
    pub fn vma_intervals(&self, vma: &VmaDescriptor) -> Vec<Interval> {
        self.tree(vma).in_order()
    }

    /// Iterate over the strings of the string table with their offsets
    pub fn iter_strings(&self) -> impl Iterator<Item = (u32, &[u8])> {
        let mut offset = 0usize;
        self.strings
            .split(|b| *b == 0)
            .map(move |s| {
                let o = offset;
                offset += s.len() + 1;
                (o as u32, s)
            })
            .filter(|(o, _)| (*o as usize) < self.strings.len())
    }
}

/// Serialize an image
///
/// The image must be free of validation findings. The checksum is recomputed, the
/// remaining header fields are written as they are.
pub fn write_jif(img: &JifImage) -> JifResult<Vec<u8>> {
    let findings = validate(img);
    if !findings.is_empty() {
        return Err(JifError::InvariantViolation { findings });
    }

    let mut out = Vec::with_capacity(img.header.data_offset as usize + img.data.len());
    let header = JifHeader {
        table_checksum: img.compute_checksum(),
        ..img.header
    };
    header.write_to(&mut out);
    img.write_tables(&mut out);
    out.resize(img.header.data_offset as usize, 0);
    out.extend_from_slice(&img.data);
    Ok(out)
}

/// Parse and fully validate a JIF
pub fn parse_jif(bytes: &[u8]) -> JifResult<JifImage> {
    let img = decode_jif(bytes)?;

    let computed = img.compute_checksum();
    if computed != img.header.table_checksum {
        return Err(JifError::BadChecksum {
            expected: img.header.table_checksum,
            computed,
        });
    }

    let findings = validate(&img);
    if let Some(first) = findings.first() {
        return Err(JifError::TableInvariantViolation {
            invariant: first.code,
            findings,
        });
    }

    Ok(img)
}

/// Decode the framing and the tables of a JIF without checking the checksum or the
/// table invariants
pub fn decode_jif(bytes: &[u8]) -> JifResult<JifImage> {
    let available = bytes.len() as u64;
    let truncated = |section, needed| JifError::TruncatedFile {
        section,
        needed,
        available,
    };

    if bytes.len() < JIF_MAGIC.len() {
        return Err(truncated("magic", JIF_MAGIC.len() as u64));
    }
    if bytes[..4] != JIF_MAGIC {
        return Err(JifError::BadMagic {
            found: bytes[..4].try_into().expect("length checked"),
        });
    }
    if bytes.len() < JifHeader::SERIALIZED_SIZE {
        return Err(truncated("header", JifHeader::SERIALIZED_SIZE as u64));
    }

    let mut reader = Reader::new(bytes);
    let header = JifHeader::read_from(&mut reader);
    if header.version != JIF_VERSION {
        return Err(JifError::TableInvariantViolation {
            invariant: "unsupported-version",
            findings: vec![Finding::new(
                "unsupported-version",
                vec![],
                format!("version {} (expected {})", header.version, JIF_VERSION),
            )],
        });
    }

    let tables_end = JifHeader::SERIALIZED_SIZE as u64 + header.tables_size();
    if available < tables_end {
        return Err(truncated("tables", tables_end));
    }
    if available < header.data_offset {
        return Err(truncated("padding", header.data_offset));
    }

    let vmas = (0..header.n_vmas)
        .map(|_| VmaDescriptor::read_from(&mut reader))
        .collect();
    let nodes = (0..header.n_itree_nodes)
        .map(|_| TreeNode::read_from(&mut reader))
        .collect();
    let ord = (0..header.n_ord_segments)
        .map(|idx| {
            let vaddr = reader.u64();
            let n_pages = reader.u32();
            let kind = reader.u8();
            SegmentKind::from_u8(kind)
                .map(|kind| OrdSegment {
                    vaddr,
                    n_pages,
                    kind,
                })
                .ok_or_else(|| JifError::TableInvariantViolation {
                    invariant: "ord-kind",
                    findings: vec![Finding::new(
                        "ord-kind",
                        vec![idx as usize],
                        format!("unknown segment kind {kind}"),
                    )],
                })
        })
        .collect::<JifResult<Vec<_>>>()?;
    let strings = reader.bytes(header.strings_size as usize).to_vec();
    let metadata = reader.bytes(header.metadata_size as usize).to_vec();

    // the data offset must not point inside the tables: checked here (rather than left
    // to validation) because the data section would alias table bytes
    if header.data_offset < tables_end {
        return Err(JifError::TableInvariantViolation {
            invariant: "data-offset-overlap",
            findings: vec![Finding::new(
                "data-offset-overlap",
                vec![],
                format!(
                    "data offset {:#x} lies before the end of the tables ({:#x})",
                    header.data_offset, tables_end
                ),
            )],
        });
    }
    let data = &bytes[header.data_offset as usize..];
    if !(data.len() as u64).is_multiple_of(PAGE_SIZE_U64) {
        return Err(truncated(
            "data",
            header.data_offset + page_align(data.len() as u64),
        ));
    }

    Ok(JifImage {
        header,
        vmas,
        nodes,
        ord,
        strings,
        metadata,
        data: data.to_vec(),
    })
}

/// Little-endian cursor over a byte slice whose length was checked beforehand
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn array<const N: usize>(&mut self) -> [u8; N] {
        self.bytes(N).try_into().expect("sized read")
    }

    fn u8(&mut self) -> u8 {
        self.bytes(1)[0]
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.array())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.array())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.array())
    }
}

#[cfg(test)]
pub(crate) mod test {
    use super::*;
    use crate::overlay::build_itree;

    pub(crate) const BASE: u64 = 0x7f00_0000_0000;
    pub(crate) const PAGE: u64 = 0x1000;

    /// Two VMAs: an anonymous one with a private and a zero interval, and a file-backed
    /// one with a single private page
    pub(crate) fn small_image() -> JifImage {
        let anon_ivals = vec![
            Interval::private(BASE, BASE + 2 * PAGE, 0, false),
            Interval::zero(BASE + 2 * PAGE, BASE + 4 * PAGE),
        ];
        let file_ivals = vec![Interval::private(
            BASE + 0x10 * PAGE,
            BASE + 0x11 * PAGE,
            2 * PAGE,
            true,
        )];
        let t1 = build_itree(&anon_ivals).unwrap();
        let t2 = build_itree(&file_ivals).unwrap();
        let mut nodes = t1.nodes().to_vec();
        nodes.extend_from_slice(t2.nodes());

        let vmas = vec![
            VmaDescriptor {
                vbegin: BASE,
                vend: BASE + 8 * PAGE,
                ref_path: ANON_PATH,
                ref_file_offset: 0,
                itree_first: 0,
                itree_count: t1.nodes().len() as u32,
                prot: prot::READ | prot::WRITE,
                vflags: 0,
            },
            VmaDescriptor {
                vbegin: BASE + 0x10 * PAGE,
                vend: BASE + 0x20 * PAGE,
                ref_path: 0,
                ref_file_offset: 0,
                itree_first: t1.nodes().len() as u32,
                itree_count: t2.nodes().len() as u32,
                prot: prot::READ | prot::EXEC,
                vflags: VFLAG_EAGER_WRITABLE_PRESENT,
            },
        ];
        let mut data = vec![0xaau8; 3 * PAGE as usize];
        data[2 * PAGE as usize..].fill(0xbb);
        JifImage::from_parts(
            vmas,
            nodes,
            vec![OrdSegment {
                vaddr: BASE,
                n_pages: 1,
                kind: SegmentKind::Private,
            }],
            b"/usr/lib/libfoo.so\0".to_vec(),
            vec![0, 0, 0, 0],
            data,
        )
    }

    #[test]
    fn record_sizes() {
        assert_eq!(JifHeader::SERIALIZED_SIZE, 44);
        assert_eq!(VmaDescriptor::SERIALIZED_SIZE, 38);
        assert_eq!(TreeNode::SERIALIZED_SIZE, 96);
        assert_eq!(OrdSegment::SERIALIZED_SIZE, 13);
    }

    #[test]
    fn empty_image() {
        let img = JifImage::empty();
        let bytes = write_jif(&img).unwrap();
        // header size rounded up to a page
        assert_eq!(bytes.len(), 4096);
        assert_eq!(&bytes[..4], b"wJIF");
        assert_eq!(img.header.data_offset, 4096);

        let parsed = parse_jif(&bytes).unwrap();
        assert!(parsed.vmas.is_empty());
        assert!(parsed.nodes.is_empty());
        assert!(parsed.ord.is_empty());
        assert!(parsed.data.is_empty());
        assert_eq!(parsed, img);
    }

    #[test]
    fn round_trip_small() {
        let img = small_image();
        let bytes = write_jif(&img).unwrap();
        let parsed = parse_jif(&bytes).unwrap();
        assert_eq!(parsed, img);
        assert_eq!(write_jif(&parsed).unwrap(), bytes);
        assert_eq!(
            &bytes[img.header.data_offset as usize..],
            img.data.as_slice()
        );
    }

    #[test]
    fn zero_interval_owns_no_data() {
        let ivals = vec![Interval::zero(BASE, BASE + 64 * PAGE)];
        let tree = build_itree(&ivals).unwrap();
        let img = JifImage::from_parts(
            vec![VmaDescriptor {
                vbegin: BASE,
                vend: BASE + 64 * PAGE,
                ref_path: ANON_PATH,
                ref_file_offset: 0,
                itree_first: 0,
                itree_count: 1,
                prot: prot::READ,
                vflags: 0,
            }],
            tree.nodes().to_vec(),
            vec![],
            vec![],
            vec![],
            vec![],
        );
        let bytes = write_jif(&img).unwrap();
        assert_eq!(bytes.len() as u64, img.header.data_offset);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = write_jif(&small_image()).unwrap();
        bytes[0] = b'x';
        assert!(matches!(parse_jif(&bytes), Err(JifError::BadMagic { .. })));
    }

    #[test]
    fn bad_checksum() {
        let img = small_image();
        let mut bytes = write_jif(&img).unwrap();
        // flip a bit in the VMA table
        bytes[JifHeader::SERIALIZED_SIZE + 3] ^= 0x10;
        assert!(matches!(
            parse_jif(&bytes),
            Err(JifError::BadChecksum { .. })
        ));
    }

    #[test]
    fn truncated() {
        let bytes = write_jif(&small_image()).unwrap();
        for len in [2, 20, 60, bytes.len() - 1] {
            assert!(
                matches!(
                    parse_jif(&bytes[..len]),
                    Err(JifError::TruncatedFile { .. })
                ),
                "len {len}"
            );
        }
        // the data section has no declared length: losing whole pages shows up as
        // intervals pointing past its end
        match parse_jif(&bytes[..bytes.len() - 4096]) {
            Err(JifError::TableInvariantViolation { invariant, .. }) => {
                assert_eq!(invariant, "data-oob")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn degenerate_vma_rejected() {
        let mut img = JifImage::from_parts(
            vec![VmaDescriptor {
                vbegin: BASE,
                vend: BASE,
                ref_path: ANON_PATH,
                ref_file_offset: 0,
                itree_first: 0,
                itree_count: 0,
                prot: prot::READ,
                vflags: 0,
            }],
            vec![],
            vec![],
            vec![],
            vec![],
            vec![],
        );
        img.seal();
        // bypass write-time validation to get the bytes on disk
        let mut bytes = Vec::new();
        img.header.write_to(&mut bytes);
        img.write_tables(&mut bytes);
        bytes.resize(img.header.data_offset as usize, 0);

        match parse_jif(&bytes) {
            Err(JifError::TableInvariantViolation { invariant, .. }) => {
                assert_eq!(invariant, "vma-empty")
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            write_jif(&img),
            Err(JifError::InvariantViolation { .. })
        ));
    }

    #[test]
    fn offset_encoding() {
        let src = IntervalSource::Private {
            offset: 0x1234_5000,
            eager_writable: true,
        };
        let off = encode_offset(src);
        assert_eq!(off, (0x12345 << 1) | 1);
        assert_eq!(decode_offset(off), Some(src));
        assert_eq!(decode_offset(ZERO_OFFSET), Some(IntervalSource::Zero));
        assert_eq!(decode_offset(u64::MAX - 1), None);
    }

    #[test]
    fn find_vma() {
        let img = small_image();
        assert_eq!(img.find_vma(BASE), Some(0));
        assert_eq!(img.find_vma(BASE + 7 * PAGE), Some(0));
        assert_eq!(img.find_vma(BASE + 8 * PAGE), None);
        assert_eq!(img.find_vma(BASE + 0x1f * PAGE), Some(1));
        assert_eq!(img.find_vma(0), None);
    }

    #[test]
    fn prot_letters() {
        assert_eq!(prot::to_letters(prot::READ | prot::EXEC), "r-x");
        assert_eq!(prot::from_letters("rw-"), Some(prot::READ | prot::WRITE));
        assert_eq!(prot::from_letters("rq-"), None);
    }
}
