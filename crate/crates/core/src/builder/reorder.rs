//! Access-order relocation of private pages

use std::collections::{HashMap, HashSet};

use crate::error::{JifError, JifResult};
use crate::format::{canonicalize, JifImage, OrdSegment};
use crate::overlay::{build_itree, resolve_in_vma, Interval, IntervalSource};
use crate::trace::AccessTrace;
use crate::utils::{PAGE_SIZE, PAGE_SIZE_U64};

/// Relocate the private pages touched by a trace to the front of the data section, in
/// order of first access
///
/// The other private pages follow in their previous order. Intervals are split wherever
/// consecutive pages stop being consecutive in the data section. The ordering segments
/// are replaced by the first-access sequence of the trace (private, shared and zero
/// pages alike). The result is canonical.
pub fn reorder_by_trace(img: &JifImage, trace: &AccessTrace) -> JifResult<JifImage> {
    let touched = trace.first_touch_order();

    // ordering segments, and the traced private pages in first-access order
    let mut ord: Vec<OrdSegment> = Vec::new();
    let mut ord_vma: Option<usize> = None;
    let mut traced_offsets: Vec<u64> = Vec::new();
    for &addr in &touched {
        let vma_idx = img
            .find_vma(addr)
            .ok_or(JifError::TraceOutOfRange { addr })?;
        let source = resolve_in_vma(img, &img.vmas[vma_idx], addr);
        if let crate::overlay::PageSource::Private { data_offset, .. } = source {
            traced_offsets.push(data_offset);
        }
        let kind = source.kind();
        match ord.last_mut() {
            Some(seg) if ord_vma == Some(vma_idx) && seg.kind == kind && seg.end() == addr => {
                seg.n_pages += 1
            }
            _ => {
                ord.push(OrdSegment {
                    vaddr: addr,
                    n_pages: 1,
                    kind,
                });
                ord_vma = Some(vma_idx);
            }
        }
    }

    // every private page in its current data order
    let per_vma: Vec<Vec<Interval>> = img.vmas.iter().map(|v| img.vma_intervals(v)).collect();
    let mut all_offsets: Vec<u64> = per_vma
        .iter()
        .flatten()
        .filter_map(|ival| match ival.source {
            IntervalSource::Private { offset, .. } => {
                Some((0..ival.n_pages()).map(move |p| offset + p * PAGE_SIZE_U64))
            }
            IntervalSource::Zero => None,
        })
        .flatten()
        .collect();
    all_offsets.sort_unstable();

    let traced: HashSet<u64> = traced_offsets.iter().copied().collect();
    let new_order = traced_offsets
        .iter()
        .copied()
        .chain(all_offsets.into_iter().filter(|o| !traced.contains(o)));

    let mut relocation: HashMap<u64, u64> = HashMap::new();
    let mut data = Vec::with_capacity(img.data.len());
    for old in new_order {
        relocation.insert(old, data.len() as u64);
        data.extend_from_slice(&img.data[old as usize..old as usize + PAGE_SIZE]);
    }

    // rewrite the trees, fracturing intervals where the layout is no longer contiguous
    let mut out = img.clone();
    out.nodes.clear();
    for (vma, ivals) in out.vmas.iter_mut().zip(per_vma) {
        let mut rewritten: Vec<Interval> = Vec::with_capacity(ivals.len());
        for ival in ivals {
            let IntervalSource::Private {
                offset,
                eager_writable,
            } = ival.source
            else {
                rewritten.push(ival);
                continue;
            };
            let first = rewritten.len();
            for p in 0..ival.n_pages() {
                let addr = ival.start + p * PAGE_SIZE_U64;
                let page = Interval::private(
                    addr,
                    addr + PAGE_SIZE_U64,
                    relocation[&(offset + p * PAGE_SIZE_U64)],
                    eager_writable,
                );
                match rewritten[first..].last_mut() {
                    Some(last) if last.continued_by(&page) => last.end = page.end,
                    _ => rewritten.push(page),
                }
            }
        }
        let tree = build_itree(&rewritten)?;
        vma.itree_first = out.nodes.len() as u32;
        vma.itree_count = tree.nodes().len() as u32;
        out.nodes.extend_from_slice(tree.nodes());
    }
    out.ord = ord;
    out.data = data;
    out.seal();

    canonicalize(&out)
}

#[cfg(test)]
mod test {
    use super::*;
    use crate::backing::MemBacking;
    use crate::builder::test::{anon, BASE, PAGE};
    use crate::builder::{build_jif, BuildOptions, RawSnapshot, WriteSet};
    use crate::format::SegmentKind;
    use crate::meta::ProcessMeta;
    use crate::overlay::{materialize_vma, resolve_page, PageSource};
    use crate::trace::Access;

    fn image() -> (RawSnapshot, JifImage) {
        let raw = RawSnapshot {
            vmas: vec![
                anon(BASE, 8, |p| p as u8 + 1),
                anon(BASE + 0x10 * PAGE, 4, |p| {
                    if p == 2 {
                        0
                    } else {
                        0x80 + p as u8
                    }
                }),
            ],
            ..Default::default()
        };
        let img = build_jif(
            &raw,
            &MemBacking::new(),
            &WriteSet::default(),
            None,
            &ProcessMeta::default(),
            &BuildOptions::default(),
        )
        .unwrap();
        (raw, img)
    }

    fn offset(img: &JifImage, addr: u64) -> u64 {
        match resolve_page(img, addr).unwrap() {
            PageSource::Private { data_offset, .. } => data_offset,
            other => panic!("{addr:#x} resolves to {other:?}"),
        }
    }

    #[test]
    fn relocation() {
        let (raw, img) = image();
        let trace: AccessTrace = [
            Access::read(BASE + 5 * PAGE),
            Access::write(BASE + 0x11 * PAGE),
            Access::read(BASE + 0x12 * PAGE),
            Access::read(BASE + PAGE),
            Access::read(BASE + 5 * PAGE),
            Access::read(BASE + 2 * PAGE),
        ]
        .into_iter()
        .collect();
        let reordered = reorder_by_trace(&img, &trace).unwrap();

        assert_eq!(offset(&reordered, BASE + 5 * PAGE), 0);
        assert_eq!(offset(&reordered, BASE + 0x11 * PAGE), PAGE);
        assert_eq!(offset(&reordered, BASE + PAGE), 2 * PAGE);
        assert_eq!(offset(&reordered, BASE + 2 * PAGE), 3 * PAGE);
        // untraced pages follow in their previous order
        assert_eq!(offset(&reordered, BASE), 4 * PAGE);
        assert_eq!(offset(&reordered, BASE + 3 * PAGE), 5 * PAGE);

        assert_eq!(
            reordered.ord,
            vec![
                OrdSegment {
                    vaddr: BASE + 5 * PAGE,
                    n_pages: 1,
                    kind: SegmentKind::Private
                },
                OrdSegment {
                    vaddr: BASE + 0x11 * PAGE,
                    n_pages: 1,
                    kind: SegmentKind::Private
                },
                OrdSegment {
                    vaddr: BASE + 0x12 * PAGE,
                    n_pages: 1,
                    kind: SegmentKind::Zero
                },
                OrdSegment {
                    vaddr: BASE + PAGE,
                    n_pages: 2,
                    kind: SegmentKind::Private
                },
            ]
        );

        let backing = MemBacking::new();
        for (vma, raw_vma) in reordered.vmas.iter().zip(&raw.vmas) {
            assert_eq!(
                materialize_vma(&reordered, vma, &backing).unwrap(),
                raw_vma.data
            );
        }
        assert_eq!(reordered.vmas.len(), img.vmas.len());
        assert_eq!(canonicalize(&reordered).unwrap(), reordered);
    }

    #[test]
    fn untouched_layout() {
        let (_, img) = image();
        let trace: AccessTrace = [Access::read(BASE + 0x12 * PAGE)].into_iter().collect();
        let reordered = reorder_by_trace(&img, &trace).unwrap();
        assert_eq!(reordered.data, img.data);
        assert_eq!(reordered.nodes, img.nodes);

        // ascending traced pages keep their offsets
        let trace: AccessTrace = (0..8).map(|p| Access::read(BASE + p * PAGE)).collect();
        let reordered = reorder_by_trace(&img, &trace).unwrap();
        for p in 0..8 {
            assert_eq!(
                offset(&reordered, BASE + p * PAGE),
                offset(&img, BASE + p * PAGE)
            );
        }
    }

    #[test]
    fn out_of_range() {
        let (_, img) = image();
        let trace: AccessTrace = [Access::read(BASE + 9 * PAGE)].into_iter().collect();
        assert!(matches!(
            reorder_by_trace(&img, &trace),
            Err(JifError::TraceOutOfRange { .. })
        ));
    }
}
