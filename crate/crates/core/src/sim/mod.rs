//! Deterministic restore simulator
//!
//! Executes an access trace against a [`JifImage`] under a restore strategy and
//! accounts for faults, I/O, allocations and modeled time. Nothing runs for real: every
//! mechanism is charged from a [`CostModel`], in integer nanoseconds.
//!
//! Execution and a prefetcher are the two actors. Baselines:
//!  - [`Strategy::Demand`]: no prefetch, every page faults in on first touch;
//!  - [`Strategy::SyncPrefetch`]: the ordered working set is read before execution,
//!    without installing PTEs;
//!  - [`Strategy::AsyncAdvisory`]: the same reads concurrent with execution, each page
//!    being honored with some probability.
//!
//! Under [`Strategy::Spice`], VMAs are created while a first synchronous batch is read,
//! then a background prefetcher streams the rest of the ordered working set, installing
//! PTEs as it goes. Accesses outside the ordered working set fall back to demand faults.

mod cost;
mod engine;
mod report;

use std::collections::HashSet;

pub use cost::{
    format_us, parse_config, CostModel, Ns, SimConfig, SpiceToggles, Strategy, NS_PER_SEC,
    NS_PER_US,
};
pub use engine::{run_restore, run_restore_with_fds, FdUse};
pub use report::{Comparison, EventKind, RestoreReport, SimEvent};

use crate::error::SimError;
use crate::format::JifImage;
use crate::trace::{Access, AccessTrace};
use crate::utils::page_floor;

/// Ideal restore time: reading the working set at full bandwidth in one request, plus
/// the warm execution time, with no overlap
pub fn compute_ideal(ws_bytes: u64, cm: &CostModel, warm_time: Ns) -> Ns {
    cm.transfer_time(ws_bytes) + cm.io_request_latency + warm_time
}

/// The strategies of a full comparison: the three baselines, then SPICE with its
/// optimizations enabled one at a time, then with the configured toggles
pub fn default_strategies(toggles: SpiceToggles) -> Vec<Strategy> {
    let none = SpiceToggles::NONE;
    let overlay = SpiceToggles {
        overlay_vmas: true,
        ..none
    };
    let reorder = SpiceToggles {
        reorder_layout: true,
        ..overlay
    };
    let eager = SpiceToggles {
        eager_pte: true,
        ..reorder
    };
    let pool = SpiceToggles {
        page_pool: true,
        ..eager
    };
    let mut out = vec![
        Strategy::Demand,
        Strategy::SyncPrefetch,
        Strategy::AsyncAdvisory,
    ];
    for t in [none, overlay, reorder, eager, pool, toggles] {
        if !out.contains(&Strategy::Spice(t)) {
            out.push(Strategy::Spice(t));
        }
    }
    out
}

/// Run every strategy on the same inputs
///
/// The ideal time uses the distinct pages of the trace as working set and the modeled
/// compute time of the trace as warm execution time.
pub fn compare_strategies(
    img: &JifImage,
    trace: &AccessTrace,
    cm: &CostModel,
    strategies: &[Strategy],
) -> Result<Comparison, SimError> {
    let reports = strategies
        .iter()
        .map(|s| run_restore(img, trace, *s, cm))
        .collect::<Result<Vec<_>, _>>()?;
    let ws_bytes = trace.pages().len() as u64 * crate::utils::PAGE_SIZE as u64;
    let warm = trace.len() as u64 * cm.per_access_compute;
    Ok(Comparison {
        reports,
        ideal: compute_ideal(ws_bytes, cm, warm),
    })
}

/// A working set estimated from several traced runs
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkingSetEstimate {
    /// One access per page, in first-touch order
    pub trace: AccessTrace,
    /// Number of traces after which the union stopped growing (the last one when it
    /// kept growing)
    pub converged_at: usize,
}

/// Union of the first-touch sequences of several traces
///
/// Pages keep the position of the trace that touched them first; pages first seen in a
/// later trace are appended in the order that trace touched them. Each page keeps the
/// kind of its first access.
pub fn estimate_working_set(
    img: &JifImage,
    traces: &[AccessTrace],
) -> Result<WorkingSetEstimate, SimError> {
    if traces.is_empty() {
        return Err(SimError::EmptyInput);
    }
    let mut seen = HashSet::new();
    let mut union: Vec<Access> = Vec::new();
    let mut converged_at = None;
    for (i, trace) in traces.iter().enumerate() {
        let before = union.len();
        for access in trace.iter() {
            let addr = page_floor(access.addr);
            if img.find_vma(addr).is_none() {
                return Err(SimError::SimCrash { addr });
            }
            if seen.insert(addr) {
                union.push(Access {
                    kind: access.kind,
                    addr,
                });
            }
        }
        if i > 0 && union.len() == before {
            converged_at.get_or_insert(i + 1);
        } else if union.len() != before {
            converged_at = None;
        }
    }
    Ok(WorkingSetEstimate {
        trace: union.into_iter().collect(),
        converged_at: converged_at.unwrap_or(traces.len()),
    })
}

#[cfg(test)]
mod test {
    use super::*;
    use crate::format::test::{small_image, BASE, PAGE};

    #[test]
    fn ideal() {
        let cm = CostModel::default();
        assert_eq!(compute_ideal(0, &cm, 0), cm.io_request_latency);
        // 1.3 MB at 13.6 GB/s is 95.59 us
        assert_eq!(
            compute_ideal(1_300_000, &cm, 77_000),
            95_589 + 77_000 + 80_000
        );
    }

    #[test]
    fn working_set_union() {
        let img = small_image();
        let a: AccessTrace = [
            Access::read(BASE + PAGE),
            Access::write(BASE),
            Access::read(BASE + PAGE),
        ]
        .into_iter()
        .collect();
        let b: AccessTrace = [Access::read(BASE + 3 * PAGE), Access::read(BASE)]
            .into_iter()
            .collect();

        let one = estimate_working_set(&img, std::slice::from_ref(&a)).unwrap();
        assert_eq!(one.trace.first_touch_order(), a.first_touch_order());
        assert_eq!(one.trace.len(), 2);
        assert_eq!(one.converged_at, 1);

        let same = estimate_working_set(&img, &[a.clone(), a.clone()]).unwrap();
        assert_eq!(same.trace, one.trace);
        assert_eq!(same.converged_at, 2);

        let grown = estimate_working_set(&img, &[a.clone(), b.clone(), a.clone()]).unwrap();
        assert_eq!(
            grown.trace.first_touch_order(),
            vec![BASE + PAGE, BASE, BASE + 3 * PAGE]
        );
        assert_eq!(grown.converged_at, 3);

        assert!(matches!(
            estimate_working_set(&img, &[]),
            Err(SimError::EmptyInput)
        ));
    }

    #[test]
    fn strategy_list() {
        let list = default_strategies(SpiceToggles::ALL);
        assert_eq!(list.len(), 9);
        assert_eq!(list[3], Strategy::Spice(SpiceToggles::NONE));
        assert_eq!(list[8], Strategy::Spice(SpiceToggles::ALL));
        // the configured toggles are not repeated
        let pool_only = list[7].toggles().unwrap();
        assert_eq!(default_strategies(pool_only).len(), 8);
    }

    #[test]
    fn comparison_is_ordered() {
        let img = small_image();
        let trace: AccessTrace = [Access::read(BASE)].into_iter().collect();
        let cm = CostModel::default();
        let cmp = compare_strategies(&img, &trace, &cm, &[Strategy::Demand]).unwrap();
        assert_eq!(cmp.reports.len(), 1);
        let all = default_strategies(SpiceToggles::ALL);
        let cmp = compare_strategies(&img, &trace, &cm, &all).unwrap();
        let labels: Vec<String> = cmp.reports.iter().map(|r| r.strategy.clone()).collect();
        let expected: Vec<String> = all.iter().map(Strategy::label).collect();
        assert_eq!(labels, expected);
    }
}
