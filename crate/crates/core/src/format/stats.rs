//! Workload characterization of an image
//!
//! Counts are taken over the whole image and, when an access trace is supplied, over the
//! pages of its working set only.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use super::*;
use crate::overlay::{iter_private_intervals, resolve_in_vma, PageSource};
use crate::trace::AccessTrace;

/// One set of counters
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatsCounts {
    pub n_vmas: u64,
    /// Maximal runs of private pages (see [`iter_private_intervals`])
    pub n_delta_intervals: u64,
    pub n_private_pages: u64,
    pub n_shared_pages: u64,
    pub n_zero_pages: u64,
    pub working_set_bytes: u64,
}

/// Statistics of an image, optionally restricted to a working set
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatsRecord {
    pub image: StatsCounts,
    pub working_set: Option<StatsCounts>,
}

impl StatsCounts {
    fn fmt_prefixed(&self, f: &mut fmt::Formatter<'_>, prefix: &str) -> fmt::Result {
        write!(
            f,
            "{prefix}vmas={} {prefix}intervals={} {prefix}private={} {prefix}shared={} {prefix}zero={} {prefix}ws_bytes={}",
            self.n_vmas,
            self.n_delta_intervals,
            self.n_private_pages,
            self.n_shared_pages,
            self.n_zero_pages,
            self.working_set_bytes
        )
    }
}

impl fmt::Display for StatsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.image.fmt_prefixed(f, "")?;
        if let Some(ws) = &self.working_set {
            write!(f, " ")?;
            ws.fmt_prefixed(f, "ws.")?;
        }
        Ok(())
    }
}

/// Characterize an image
///
/// Over the whole image, zero pages include the uncovered pages of anonymous VMAs and
/// the working-set size is the one declared by the ordering segments.
pub fn stats(img: &JifImage, ws: Option<&AccessTrace>) -> JifResult<StatsRecord> {
    let mut image = StatsCounts {
        n_vmas: img.vmas.len() as u64,
        ..Default::default()
    };

    for vma in &img.vmas {
        let mut covered = 0;
        for ival in img.vma_intervals(vma) {
            covered += ival.n_pages();
            match ival.source {
                IntervalSource::Private { .. } => image.n_private_pages += ival.n_pages(),
                IntervalSource::Zero => image.n_zero_pages += ival.n_pages(),
            }
        }
        let gap = vma.n_pages().saturating_sub(covered);
        if vma.is_anonymous() {
            image.n_zero_pages += gap;
        } else {
            image.n_shared_pages += gap;
        }
    }

    let delta: Vec<(usize, crate::overlay::Interval)> = iter_private_intervals(img).collect();
    image.n_delta_intervals = delta.len() as u64;
    let declared: HashSet<u64> = img.ord.iter().flat_map(|s| s.pages()).collect();
    image.working_set_bytes = declared.len() as u64 * PAGE_SIZE_U64;

    let working_set = ws
        .map(|trace| working_set_stats(img, trace, &delta))
        .transpose()?;

    Ok(StatsRecord { image, working_set })
}

fn working_set_stats(
    img: &JifImage,
    trace: &AccessTrace,
    delta: &[(usize, crate::overlay::Interval)],
) -> JifResult<StatsCounts> {
    let pages: BTreeSet<u64> = trace.iter().map(|a| a.addr).collect();
    let mut counts = StatsCounts {
        working_set_bytes: pages.len() as u64 * PAGE_SIZE_U64,
        ..Default::default()
    };
    let mut vmas = BTreeSet::new();
    let mut intervals = BTreeSet::new();

    for &addr in &pages {
        let vma_idx = img
            .find_vma(addr)
            .ok_or(JifError::TraceOutOfRange { addr })?;
        vmas.insert(vma_idx);
        match resolve_in_vma(img, &img.vmas[vma_idx], addr) {
            PageSource::Private { .. } => {
                counts.n_private_pages += 1;
                // delta intervals are sorted by address
                let pos = delta.partition_point(|(_, ival)| ival.end <= addr);
                if delta.get(pos).is_some_and(|(_, ival)| ival.contains(addr)) {
                    intervals.insert(pos);
                }
            }
            PageSource::Shared { .. } => counts.n_shared_pages += 1,
            PageSource::Zero => counts.n_zero_pages += 1,
        }
    }

    counts.n_vmas = vmas.len() as u64;
    counts.n_delta_intervals = intervals.len() as u64;
    Ok(counts)
}
