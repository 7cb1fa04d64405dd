//! Seeded generators of images, raw snapshots, traces and metadata for the test suites
//!
//! Every generator is a pure function of its RNG, so a failing case is reproduced by
//! its seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backing::MemBacking;
use crate::builder::{
    assemble_image, build_jif, BuildOptions, Overlay, RawSnapshot, RawVma, ThreadStack, WriteSet,
};
use crate::format::{prot, JifImage, OrdSegment};
use crate::meta::{FdRecord, ProcessMeta, SigHandler, ThreadRecord, TimerRecord, MAX_SIGNO};
use crate::overlay::{resolve_page, Interval};
use crate::trace::{Access, AccessTrace};
use crate::utils::{PAGE_SIZE, PAGE_SIZE_U64};

const PAGE: u64 = PAGE_SIZE_U64;

/// Lowest address used by the generators
pub const BASE: u64 = 0x7f00_0000_0000;

const PATHS: [&str; 4] = [
    "/usr/lib/libc.so.6",
    "/usr/lib/libm.so.6",
    "/opt/app/bin/app",
    "/usr/lib/locale/C.utf8/LC_CTYPE",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A page whose content is distinct per `stamp` and never all-zero
pub fn stamped_page(stamp: u64) -> Vec<u8> {
    let mut page = vec![(stamp % 251) as u8 | 1; PAGE_SIZE];
    page[..8].copy_from_slice(&stamp.to_le_bytes());
    page
}

/// Size limits of [`random_image`]
#[derive(Debug, Clone, Copy)]
pub struct ImageLimits {
    pub max_vmas: usize,
    /// Upper bound on the address span covered by VMAs
    pub max_pages: u64,
    pub max_private_pages: u64,
}

impl Default for ImageLimits {
    fn default() -> Self {
        ImageLimits {
            max_vmas: 12,
            max_pages: 1 << 14,
            max_private_pages: 256,
        }
    }
}

fn random_layout(rng: &mut impl Rng, limits: ImageLimits) -> Vec<RawVma> {
    let n_vmas = rng.random_range(0..=limits.max_vmas);
    let budget = (limits.max_pages / n_vmas.max(1) as u64).max(1);
    let mut addr = BASE + rng.random_range(0..16) * PAGE;
    (0..n_vmas)
        .map(|_| {
            let n_pages = rng.random_range(1..=budget.min(512));
            let path = rng
                .random_bool(0.5)
                .then(|| PATHS[rng.random_range(0..PATHS.len())].to_string());
            let file_offset = match path {
                Some(_) => rng.random_range(0..8) * PAGE,
                None => 0,
            };
            let vma = RawVma {
                vbegin: addr,
                vend: addr + n_pages * PAGE,
                prot: rng.random_range(1..=prot::ALL),
                path,
                file_offset,
                data: Vec::new(),
            };
            addr = vma.vend + rng.random_range(0..4) * PAGE;
            vma
        })
        .collect()
}

/// A valid image with random VMAs, intervals, data placement and ordering segments
pub fn random_image(rng: &mut impl Rng, limits: ImageLimits) -> JifImage {
    let layout = random_layout(rng, limits);
    let mut private_budget = limits.max_private_pages;
    let mut intervals = Vec::with_capacity(layout.len());
    let mut extents: Vec<(usize, usize, u64)> = Vec::new(); // (vma, interval, pages)
    for (v, vma) in layout.iter().enumerate() {
        let mut ivals = Vec::new();
        let mut cursor = vma.vbegin;
        while cursor < vma.vend {
            let left = (vma.vend - cursor) / PAGE;
            cursor += rng.random_range(0..=left.min(6)) * PAGE;
            if cursor >= vma.vend {
                break;
            }
            let len = rng.random_range(1..=((vma.vend - cursor) / PAGE).min(8));
            if rng.random_bool(0.3) {
                ivals.push(Interval::zero(cursor, cursor + len * PAGE));
            } else if len <= private_budget {
                private_budget -= len;
                extents.push((v, ivals.len(), len));
                ivals.push(Interval::private(
                    cursor,
                    cursor + len * PAGE,
                    0,
                    rng.random_bool(0.3),
                ));
            }
            cursor += len * PAGE;
        }
        intervals.push(ivals);
    }

    // place private extents in the data section in a random order
    extents.shuffle(rng);
    let mut data = Vec::new();
    for (v, i, len) in extents {
        let offset = data.len() as u64;
        if let crate::overlay::IntervalSource::Private { offset: o, .. } =
            &mut intervals[v][i].source
        {
            *o = offset;
        }
        for _ in 0..len {
            data.extend_from_slice(&stamped_page(rng.random()));
        }
    }

    let raw = RawSnapshot {
        vmas: layout,
        ..Default::default()
    };
    let metadata: Vec<u8> = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
    let mut img = assemble_image(&raw, Overlay { intervals, data }, metadata)
        .expect("generated layout is valid");
    img.ord = random_ord(rng, &img);
    img.seal();
    img
}

/// Ordering segments over random pages of the image
fn random_ord(rng: &mut impl Rng, img: &JifImage) -> Vec<OrdSegment> {
    if img.vmas.is_empty() {
        return Vec::new();
    }
    let mut ord = Vec::new();
    for _ in 0..rng.random_range(0..8) {
        let vma = &img.vmas[rng.random_range(0..img.vmas.len())];
        let start = vma.vbegin + rng.random_range(0..vma.n_pages()) * PAGE;
        let kind = resolve_page(img, start).expect("page is mapped").kind();
        let mut n_pages = 1;
        while start + n_pages * PAGE < vma.vend
            && n_pages < 8
            && resolve_page(img, start + n_pages * PAGE)
                .expect("page is mapped")
                .kind()
                == kind
        {
            n_pages += 1;
        }
        ord.push(OrdSegment {
            vaddr: start,
            n_pages: rng.random_range(1..=n_pages) as u32,
            kind,
        });
    }
    ord
}

/// A random trace over the mapped pages of an image, with some locality
pub fn random_trace(
    rng: &mut impl Rng,
    img: &JifImage,
    n_accesses: usize,
    write_ratio: f64,
) -> AccessTrace {
    if img.vmas.is_empty() {
        return AccessTrace::new();
    }
    let mut out = Vec::with_capacity(n_accesses);
    let mut addr = img.vmas[0].vbegin;
    for _ in 0..n_accesses {
        let vma = if rng.random_bool(0.7) {
            img.find_vma(addr).map(|i| &img.vmas[i])
        } else {
            None
        }
        .unwrap_or_else(|| &img.vmas[rng.random_range(0..img.vmas.len())]);
        addr = if vma.contains(addr) && addr + PAGE < vma.vend && rng.random_bool(0.6) {
            addr + PAGE
        } else {
            vma.vbegin + rng.random_range(0..vma.n_pages()) * PAGE
        };
        out.push(if rng.random_bool(write_ratio) {
            Access::write(addr)
        } else {
            Access::read(addr)
        });
    }
    AccessTrace { accesses: out }
}

/// A random raw snapshot and the backing files it refers to
///
/// File-backed pages are a mix of pages equal to the file, zeroed pages and modified
/// pages; some files are shorter than their mappings. Some VMAs get a thread stack and
/// some ranges are lazily freed.
pub fn random_snapshot(rng: &mut impl Rng, limits: ImageLimits) -> (RawSnapshot, MemBacking) {
    let mut vmas = random_layout(rng, limits);
    let mut backing = MemBacking::new();
    for vma in &mut vmas {
        let n_pages = (vma.vend - vma.vbegin) / PAGE;
        if let Some(path) = &vma.path {
            let needed = (vma.file_offset / PAGE + n_pages) as usize;
            let file = match backing.get(path) {
                Some(file) => file.to_vec(),
                None => {
                    let len = if rng.random_bool(0.2) {
                        rng.random_range(0..=needed)
                    } else {
                        needed + rng.random_range(0..4)
                    };
                    let mut file = Vec::with_capacity(len * PAGE_SIZE);
                    for _ in 0..len {
                        if rng.random_bool(0.1) {
                            file.extend_from_slice(&[0; PAGE_SIZE]);
                        } else {
                            file.extend_from_slice(&stamped_page(rng.random()));
                        }
                    }
                    backing.insert(path.clone(), file.clone());
                    file
                }
            };
            for p in 0..n_pages as usize {
                let at = vma.file_offset as usize + p * PAGE_SIZE;
                let original = file.get(at..at + PAGE_SIZE).unwrap_or(&[0; PAGE_SIZE]);
                match rng.random_range(0..10) {
                    0 => vma.data.extend_from_slice(&[0; PAGE_SIZE]),
                    1..=3 => vma.data.extend_from_slice(&stamped_page(rng.random())),
                    4 => {
                        let mut page = original.to_vec();
                        page[rng.random_range(0..PAGE_SIZE)] ^= 0x5a;
                        vma.data.extend_from_slice(&page);
                    }
                    _ => vma.data.extend_from_slice(original),
                }
            }
        } else {
            for _ in 0..n_pages {
                if rng.random_bool(0.4) {
                    vma.data.extend_from_slice(&[0; PAGE_SIZE]);
                } else {
                    vma.data.extend_from_slice(&stamped_page(rng.random()));
                }
            }
        }
    }

    let mut raw = RawSnapshot {
        vmas,
        ..Default::default()
    };
    for (i, vma) in raw.vmas.iter().enumerate() {
        if rng.random_bool(0.2) {
            raw.thread_stacks.push(ThreadStack {
                vma: i,
                sp: rng.random_range(vma.vbegin..=vma.vend),
            });
        }
        if rng.random_bool(0.2) {
            let n_pages = (vma.vend - vma.vbegin) / PAGE;
            let first = rng.random_range(0..n_pages);
            let last = rng.random_range(first..n_pages);
            raw.lazy_free_ranges
                .push((vma.vbegin + first * PAGE, vma.vbegin + (last + 1) * PAGE));
        }
    }
    (raw, backing)
}

fn random_string(rng: &mut impl Rng, prefix: &str) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789._-/";
    let len = rng.random_range(0..24);
    let tail: String = (0..len)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
        .collect();
    format!("{prefix}{tail}")
}

/// Random process metadata satisfying [`ProcessMeta::check`]
pub fn random_meta(rng: &mut impl Rng) -> ProcessMeta {
    let mut tids: Vec<u32> = (1..64).collect();
    tids.shuffle(rng);
    let mut fd_nums: Vec<u32> = (0..256).collect();
    fd_nums.shuffle(rng);
    ProcessMeta {
        threads: tids[..rng.random_range(0..6)]
            .iter()
            .map(|&tid| ThreadRecord {
                tid: 1000 + tid,
                sp: rng.random(),
                regs: (0..rng.random_range(0..64)).map(|_| rng.random()).collect(),
            })
            .collect(),
        fds: fd_nums[..rng.random_range(0..16)]
            .iter()
            .map(|&fd_num| FdRecord {
                fd_num,
                path: random_string(rng, "/"),
                offset: rng.random(),
                flags: rng.random(),
                lazy: rng.random_bool(0.5),
            })
            .collect(),
        sighandlers: (0..rng.random_range(0..6))
            .map(|_| SigHandler {
                signo: rng.random_range(1..=MAX_SIGNO),
                handler: rng.random(),
                mask: rng.random(),
                flags: rng.random(),
            })
            .collect(),
        timers: (0..rng.random_range(0..4))
            .map(|_| TimerRecord {
                id: rng.random(),
                interval_ns: rng.random(),
                remaining_ns: rng.random(),
            })
            .collect(),
        cwd: if rng.random_bool(0.8) {
            random_string(rng, "/")
        } else {
            String::new()
        },
        env: (0..rng.random_range(0..6))
            .map(|_| format!("{}={}", random_string(rng, "K"), random_string(rng, "")))
            .collect(),
    }
}

/// Shape of a [`cell_fixture`]
#[derive(Debug, Clone, Copy)]
pub struct CellShape {
    pub n_vmas: usize,
    pub cells_per_vma: usize,
    /// Private pages per cell; cells are separated by one zero page
    pub pages_per_cell: u64,
    /// Every `write_every`-th traced page is written (0: no writes)
    pub write_every: usize,
    pub seed: u64,
}

/// A synthetic workload made of many small delta intervals
///
/// Anonymous VMAs hold cells of private pages separated by zero pages. The trace
/// touches every private page, visiting the cells in a random order and the pages of a
/// cell in ascending order. The image is built with the trace's write set and reordered
/// by the trace, so each cell stays one delta interval (two when its writes split it).
pub fn cell_fixture(shape: CellShape) -> (JifImage, AccessTrace) {
    let mut rng = rng(shape.seed);
    let cell_pages = shape.pages_per_cell + 1;
    let vma_pages = shape.cells_per_vma as u64 * cell_pages;
    let mut vmas = Vec::with_capacity(shape.n_vmas);
    let mut cells = Vec::new();
    for v in 0..shape.n_vmas as u64 {
        let vbegin = BASE + v * (vma_pages + 16) * PAGE;
        let mut data = Vec::with_capacity((vma_pages * PAGE) as usize);
        for c in 0..shape.cells_per_vma as u64 {
            cells.push(vbegin + c * cell_pages * PAGE);
            for _ in 0..shape.pages_per_cell {
                data.extend_from_slice(&stamped_page(rng.random()));
            }
            data.extend_from_slice(&[0; PAGE_SIZE]);
        }
        vmas.push(RawVma {
            vbegin,
            vend: vbegin + vma_pages * PAGE,
            prot: prot::READ | prot::WRITE,
            path: None,
            file_offset: 0,
            data,
        });
    }
    cells.shuffle(&mut rng);

    let mut accesses = Vec::new();
    for cell in cells {
        for p in 0..shape.pages_per_cell {
            let addr = cell + p * PAGE;
            let n = accesses.len() + 1;
            accesses.push(if shape.write_every > 0 && n % shape.write_every == 0 {
                Access::write(addr)
            } else {
                Access::read(addr)
            });
        }
    }
    let trace = AccessTrace { accesses };
    let raw = RawSnapshot {
        vmas,
        ..Default::default()
    };
    let img = build_jif(
        &raw,
        &MemBacking::new(),
        &WriteSet::from_traces([&trace]),
        Some(&trace),
        &ProcessMeta::default(),
        &BuildOptions::default(),
    )
    .expect("fixture builds");
    (img, trace)
}

/// The fixture of the ablation study: 20 MiB of working set in 1,280 cells of four
/// pages spread over 32 VMAs, one traced page in four written
pub fn ablation_fixture() -> (JifImage, AccessTrace) {
    cell_fixture(CellShape {
        n_vmas: 32,
        cells_per_vma: 40,
        pages_per_cell: 4,
        write_every: 4,
        seed: 0xab1a7e,
    })
}
