//! Restore simulator against replay oracles and closed-form counts

use std::collections::{HashMap, HashSet};

use jif::builder::reorder_by_trace;
use jif::meta::ProcessMeta;
use jif::overlay::{iter_private_intervals, resolve_page, PageSource};
use jif::sim::{
    compare_strategies, default_strategies, estimate_working_set, run_restore,
    run_restore_with_fds, CostModel, EventKind, FdUse, SpiceToggles, Strategy,
};
use jif::testkit::{
    ablation_fixture, cell_fixture, random_image, random_meta, random_trace, rng, CellShape,
    ImageLimits,
};
use jif::trace::AccessTrace;
use jif::{JifImage, PAGE_SIZE};
use rand::Rng;

const PAGE: u64 = PAGE_SIZE as u64;

fn limits() -> ImageLimits {
    ImageLimits {
        max_vmas: 8,
        max_pages: 1 << 12,
        max_private_pages: 512,
    }
}

/// A random image whose ordering and layout follow a random trace
fn random_pair(seed: u64) -> (JifImage, AccessTrace) {
    let img = random_image(&mut rng(seed), limits());
    let trace = random_trace(&mut rng(seed + 1_000_000), &img, 400, 0.3);
    (reorder_by_trace(&img, &trace).unwrap(), trace)
}

#[derive(Debug, Default, PartialEq)]
struct Counts {
    major: u64,
    minor: u64,
    cow: u64,
}

/// Per-access replay of demand paging with an explicit page-state map
fn demand_oracle(img: &JifImage, trace: &AccessTrace) -> Counts {
    #[derive(PartialEq)]
    enum State {
        Cow,
        Writable,
    }
    let mut pages: HashMap<u64, State> = HashMap::new();
    let mut counts = Counts::default();
    for access in trace.iter() {
        let zero = matches!(resolve_page(img, access.addr).unwrap(), PageSource::Zero);
        let state = pages.entry(access.addr).or_insert_with(|| {
            if zero {
                counts.minor += 1;
                State::Writable
            } else {
                counts.major += 1;
                State::Cow
            }
        });
        if access.is_write() && *state == State::Cow {
            counts.cow += 1;
            *state = State::Writable;
        }
    }
    counts
}

fn counts(r: &jif::sim::RestoreReport) -> Counts {
    Counts {
        major: r.major_faults,
        minor: r.minor_faults,
        cow: r.cow_faults,
    }
}

#[test]
fn demand_matches_replay_oracle() {
    let cm = CostModel::default();
    for seed in 0..150 {
        let (img, trace) = random_pair(seed);
        let r = run_restore(&img, &trace, Strategy::Demand, &cm).unwrap();
        let oracle = demand_oracle(&img, &trace);
        assert_eq!(counts(&r), oracle, "seed {seed}");
        assert_eq!(r.io_requests, oracle.major);
        assert_eq!(r.bytes_read, PAGE * oracle.major);

        // demand time is a plain sum, nothing overlaps
        let major =
            cm.major_fault_overhead + cm.alloc_global + cm.request_time(PAGE) + cm.pte_install;
        let minor = cm.minor_fault + cm.pte_install + cm.alloc_global;
        let cow = cm.minor_fault + cm.cow_copy + cm.pte_install + cm.alloc_global;
        assert_eq!(
            r.t_complete,
            oracle.major * major
                + oracle.minor * minor
                + oracle.cow * cow
                + trace.len() as u64 * cm.per_access_compute
        );
    }
}

#[test]
fn eager_ptes_and_writable_pages() {
    let cm = CostModel::default();
    for seed in 0..150 {
        let (img, trace) = random_pair(seed);
        let r = run_restore(&img, &trace, Strategy::Spice(SpiceToggles::ALL), &cm).unwrap();
        assert_eq!(r.minor_faults, 0, "seed {seed}");

        let mut eager_written = HashSet::new();
        let mut cow_written = HashSet::new();
        for a in trace.iter().filter(|a| a.is_write()) {
            match resolve_page(&img, a.addr).unwrap() {
                PageSource::Private {
                    eager_writable: true,
                    ..
                } => eager_written.insert(a.addr),
                PageSource::Zero => false,
                _ => cow_written.insert(a.addr),
            };
        }
        let cow_addrs: Vec<u64> = r
            .events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::CowFault { addr } => Some(addr),
                _ => None,
            })
            .collect();
        assert!(
            cow_addrs.iter().all(|a| !eager_written.contains(a)),
            "seed {seed}"
        );
        assert_eq!(r.cow_faults, cow_written.len() as u64, "seed {seed}");

        let demand = run_restore(&img, &trace, Strategy::Demand, &cm).unwrap();
        assert_eq!(
            demand.cow_faults,
            (eager_written.len() + cow_written.len()) as u64,
            "seed {seed}"
        );
    }
}

#[test]
fn sync_and_async_keep_minor_faults() {
    let cm = CostModel::default();
    for seed in 0..50 {
        let (img, trace) = random_pair(seed);
        let oracle = demand_oracle(&img, &trace);
        let touched = trace.pages().len() as u64;
        let sync = run_restore(&img, &trace, Strategy::SyncPrefetch, &cm).unwrap();
        assert_eq!(sync.major_faults, 0);
        assert_eq!(sync.minor_faults, touched);
        assert_eq!(sync.cow_faults, oracle.cow);

        let asy = run_restore(&img, &trace, Strategy::AsyncAdvisory, &cm).unwrap();
        assert_eq!(asy.major_faults + asy.minor_faults, touched);
        assert_eq!(asy.cow_faults, oracle.cow);
    }
}

#[test]
fn batching_arithmetic() {
    for seed in 0..60 {
        let (img, trace) = random_pair(seed);
        let batch = rng(seed).random_range(1..64u32);
        let cm = CostModel {
            batch_pages: batch,
            ..CostModel::default()
        };
        let private = trace
            .pages()
            .into_iter()
            .filter(|a| matches!(resolve_page(&img, *a).unwrap(), PageSource::Private { .. }))
            .count() as u64;
        let r = run_restore(&img, &trace, Strategy::Spice(SpiceToggles::ALL), &cm).unwrap();
        assert_eq!(
            r.snapshot_io_requests,
            private.div_ceil(batch as u64),
            "seed {seed}"
        );
    }

    let (img, trace) = cell_fixture(CellShape {
        n_vmas: 10,
        cells_per_vma: 30,
        pages_per_cell: 3,
        write_every: 0,
        seed: 5,
    });
    let cm = CostModel::default();
    let on = run_restore(&img, &trace, Strategy::Spice(SpiceToggles::ALL), &cm).unwrap();
    assert_eq!(on.io_requests, 900u64.div_ceil(256));
    let off = SpiceToggles {
        reorder_layout: false,
        ..SpiceToggles::ALL
    };
    let off = run_restore(&img, &trace, Strategy::Spice(off), &cm).unwrap();
    assert_eq!(off.io_requests, iter_private_intervals(&img).count() as u64);
    assert!(off.io_requests > on.io_requests);
}

#[test]
fn pool_accounting() {
    for seed in 0..40 {
        let (img, trace) = random_pair(seed);
        let pool_size = rng(seed).random_range(0..300);
        let cm = CostModel {
            pool_size,
            pool_refill_rate: 0,
            ..CostModel::default()
        };
        let r = run_restore(&img, &trace, Strategy::Spice(SpiceToggles::ALL), &cm).unwrap();
        let allocs = r.pool_allocs + r.global_allocs;
        assert_eq!(
            r.global_allocs,
            allocs.saturating_sub(pool_size),
            "seed {seed}"
        );

        let no_pool = SpiceToggles {
            page_pool: false,
            ..SpiceToggles::ALL
        };
        let r = run_restore(&img, &trace, Strategy::Spice(no_pool), &cm).unwrap();
        assert_eq!(r.pool_allocs, 0);
    }
}

#[test]
fn first_execution_overlaps_prefetch() {
    let cm = CostModel::default();
    let mut checked = 0;
    for seed in 0..100 {
        let (img, trace) = random_pair(seed);
        let private = trace
            .pages()
            .into_iter()
            .filter(|a| matches!(resolve_page(&img, *a).unwrap(), PageSource::Private { .. }))
            .count();
        if private <= cm.initial_batch_pages as usize {
            continue;
        }
        checked += 1;
        let spice = run_restore(&img, &trace, Strategy::Spice(SpiceToggles::ALL), &cm).unwrap();
        let sync = run_restore(&img, &trace, Strategy::SyncPrefetch, &cm).unwrap();
        assert!(spice.t_first_exec <= sync.t_first_exec, "seed {seed}");
        assert!(spice.t_first_exec <= spice.t_complete);
    }
    assert!(checked > 50);
}

#[test]
fn slow_execution_never_waits() {
    let (img, trace) = cell_fixture(CellShape {
        n_vmas: 4,
        cells_per_vma: 20,
        pages_per_cell: 8,
        write_every: 3,
        seed: 9,
    });
    let cm = CostModel {
        per_access_compute: 1_000_000,
        ..CostModel::default()
    };
    let r = run_restore(&img, &trace, Strategy::Spice(SpiceToggles::ALL), &cm).unwrap();
    assert_eq!((r.major_faults, r.minor_faults, r.cow_faults), (0, 0, 0));

    // the same check from the event log: each install lands before the page is needed
    let per_access = cm.per_access_compute;
    let installs: Vec<u64> = r
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::PtesInstalled { .. }))
        .map(|e| e.t)
        .collect();
    assert!(!installs.is_empty());
    let first_use_of_last_batch = r.t_first_exec + per_access * (trace.len() as u64 - 1);
    assert!(*installs.last().unwrap() <= first_use_of_last_batch);
}

#[test]
fn spice_beats_demand_and_is_deterministic() {
    let (img, trace) = cell_fixture(CellShape {
        n_vmas: 8,
        cells_per_vma: 40,
        pages_per_cell: 2,
        write_every: 5,
        seed: 3,
    });
    let cm = CostModel::default();
    let strategies = default_strategies(SpiceToggles::ALL);
    let a = compare_strategies(&img, &trace, &cm, &strategies).unwrap();
    let b = compare_strategies(&img, &trace, &cm, &strategies).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.render(), b.render());
    let demand = &a.reports[0];
    let spice = a.reports.last().unwrap();
    assert!(spice.t_complete <= demand.t_complete);
    assert!(a.ideal <= spice.t_complete);

    let seeded = CostModel {
        rng_seed: 99,
        ..cm.clone()
    };
    let async1 = run_restore(&img, &trace, Strategy::AsyncAdvisory, &seeded).unwrap();
    let async2 = run_restore(&img, &trace, Strategy::AsyncAdvisory, &seeded).unwrap();
    assert_eq!(async1, async2);
}

#[test]
fn ablation_ladder_decreases() {
    let (img, trace) = ablation_fixture();
    assert!(trace.pages().len() as u64 * PAGE >= 16 << 20);
    assert!(iter_private_intervals(&img).count() >= 1000);
    let cm = CostModel::default();
    let ladder: Vec<u64> = default_strategies(SpiceToggles::ALL)[3..8]
        .iter()
        .map(|s| run_restore(&img, &trace, *s, &cm).unwrap().t_complete)
        .collect();
    assert!(ladder.windows(2).all(|w| w[1] < w[0]), "{ladder:?}");
}

#[test]
fn working_set_union() {
    for seed in 0..30 {
        let img = random_image(&mut rng(seed), limits());
        let n = rng(seed).random_range(1..6);
        let traces: Vec<AccessTrace> = (0..n)
            .map(|i| random_trace(&mut rng(seed * 10 + i), &img, 50, 0.2))
            .collect();
        let est = estimate_working_set(&img, &traces).unwrap();
        let union: HashSet<u64> = traces.iter().flat_map(|t| t.pages()).collect();
        assert_eq!(est.trace.pages(), union);
        assert_eq!(est.trace.len(), union.len());
        // the first trace's first-touch order is a prefix
        let first = traces[0].first_touch_order();
        assert_eq!(est.trace.first_touch_order()[..first.len()], first[..]);
    }
}

#[test]
fn lazy_fd_events_count_used_lazy_fds() {
    let cm = CostModel::default();
    for seed in 0..50 {
        let mut rng = rng(seed);
        let meta: ProcessMeta = random_meta(&mut rng);
        let (img, trace) = random_pair(seed);
        let mut uses = Vec::new();
        for fd in &meta.fds {
            if rng.random_bool(0.5) {
                for _ in 0..rng.random_range(1..4) {
                    uses.push(FdUse {
                        before_access: rng.random_range(0..=trace.len()),
                        fd: fd.fd_num,
                    });
                }
            }
        }
        let used_lazy: HashSet<u32> = uses
            .iter()
            .map(|u| u.fd)
            .filter(|fd| meta.fds.iter().any(|f| f.fd_num == *fd && f.lazy))
            .collect();
        let r = run_restore_with_fds(&img, &trace, Strategy::Demand, &cm, &meta, &uses).unwrap();
        assert_eq!(r.lazy_fd_events, used_lazy.len() as u64, "seed {seed}");
    }
}
