//! Canonical form of an image
//!
//! A canonical image has its VMAs sorted, its trees rebuilt by [`build_itree`] and laid
//! out in VMA order, a data section holding only referenced pages (in their previous
//! relative order), a deduplicated string table (in order of first reference) and the
//! minimal data offset.

use std::collections::HashMap;

use super::*;
use crate::overlay::build_itree;

/// Bring a valid image into canonical form
///
/// Every page resolves to the same content before and after.
pub fn canonicalize(img: &JifImage) -> JifResult<JifImage> {
    let findings = validate(img);
    if !findings.is_empty() {
        return Err(JifError::InvariantViolation { findings });
    }

    let mut vmas = img.vmas.clone();
    vmas.sort_by_key(|v| v.vbegin);

    let per_vma: Vec<Vec<Interval>> = vmas.iter().map(|v| img.vma_intervals(v)).collect();

    // compact the data section, keeping the relative order of the referenced pages
    let mut extents: Vec<(u64, u64)> = per_vma
        .iter()
        .flatten()
        .filter_map(|ival| match ival.source {
            IntervalSource::Private { offset, .. } => Some((offset, ival.len())),
            IntervalSource::Zero => None,
        })
        .collect();
    extents.sort_unstable();
    let mut relocation = HashMap::with_capacity(extents.len());
    let mut data = Vec::with_capacity(extents.iter().map(|e| e.1 as usize).sum());
    for (offset, len) in extents {
        relocation.insert(offset, data.len() as u64);
        data.extend_from_slice(&img.data[offset as usize..(offset + len) as usize]);
    }

    // deduplicate paths by first reference
    let mut strings = Vec::new();
    let mut path_offsets: HashMap<&str, u32> = HashMap::new();

    let mut nodes = Vec::new();
    for (vma, ivals) in vmas.iter_mut().zip(per_vma) {
        if let Some(path) = img.vma_path(vma) {
            vma.ref_path = *path_offsets.entry(path).or_insert_with(|| {
                let offset = strings.len() as u32;
                strings.extend_from_slice(path.as_bytes());
                strings.push(0);
                offset
            });
        }

        let ivals: Vec<Interval> = ivals
            .into_iter()
            .map(|ival| match ival.source {
                IntervalSource::Private {
                    offset,
                    eager_writable,
                } => Interval::private(ival.start, ival.end, relocation[&offset], eager_writable),
                IntervalSource::Zero => ival,
            })
            .collect();
        let tree = build_itree(&ivals)?;
        vma.itree_first = nodes.len() as u32;
        vma.itree_count = tree.nodes().len() as u32;
        nodes.extend_from_slice(tree.nodes());
    }

    Ok(JifImage::from_parts(
        vmas,
        nodes,
        img.ord.clone(),
        strings,
        img.metadata.clone(),
        data,
    ))
}

#[cfg(test)]
mod test {
    use super::*;
    use crate::format::test::{small_image, BASE, PAGE};
    use crate::overlay::resolve_page;

    #[test]
    fn fixed_point() {
        let img = small_image();
        let canon = canonicalize(&img).unwrap();
        assert_eq!(canon, img);
        assert_eq!(canonicalize(&canon).unwrap(), canon);
    }

    #[test]
    fn dedup_strings_and_compact() {
        let mut img = small_image();
        // duplicate path, second VMA pointing to the copy, plus an unreferenced data page
        img.strings = b"/usr/lib/libfoo.so\0/usr/lib/libfoo.so\0".to_vec();
        img.vmas[1].ref_path = 19;
        let first = img.vmas[1].itree_first as usize;
        img.nodes[first].slots[0].off = encode_offset(IntervalSource::Private {
            offset: 3 * PAGE,
            eager_writable: true,
        });
        img.data.extend_from_slice(&[0xbb; PAGE as usize]);
        img.data[2 * PAGE as usize..3 * PAGE as usize].fill(0xcc);
        img.seal();
        assert_eq!(validate(&img), vec![]);

        let canon = canonicalize(&img).unwrap();
        assert!(canon.header.strings_size < img.header.strings_size);
        assert_eq!(canon.data.len(), 3 * PAGE as usize);
        assert!(canon.data[2 * PAGE as usize..].iter().all(|b| *b == 0xbb));
        assert_eq!(
            resolve_page(&canon, BASE + 0x10 * PAGE),
            Ok(crate::overlay::PageSource::Private {
                data_offset: 2 * PAGE,
                eager_writable: true
            })
        );
    }

    #[test]
    fn rejects_invalid() {
        let mut img = small_image();
        img.vmas[0].vend = img.vmas[0].vbegin;
        assert!(canonicalize(&img).is_err());
    }
}
