//! The discrete-event restore engine
//!
//! Two actors share simulated time: the execution of the trace and a prefetcher. Each
//! keeps its own clock; the engine always advances the actor that is behind, the
//! prefetcher winning ties. A single device serves I/O requests one after the other,
//! in submission order.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cost::{CostModel, Ns, SpiceToggles, Strategy, NS_PER_SEC};
use super::report::{EventKind, RestoreReport, SimEvent};
use crate::error::SimError;
use crate::format::JifImage;
use crate::meta::{FdTable, ProcessMeta};
use crate::overlay::{fragment_count, iter_private_intervals, resolve_page, PageSource};
use crate::trace::AccessTrace;
use crate::utils::{page_floor, PAGE_SIZE_U64};

/// A file descriptor used by the traced execution
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FdUse {
    /// Index of the access the use happens before (the trace length for "at the end")
    pub before_access: usize,
    pub fd: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pte {
    Absent,
    Cow,
    Writable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ready {
    /// Not part of any prefetch
    Unplanned,
    /// Planned, but the prefetcher has not decided when yet
    Pending,
    /// Resident from `t` on; `mapped` when the prefetcher also installs the PTE
    At { t: Ns, mapped: bool },
}

#[derive(Debug, Clone, Copy)]
struct PageState<'a> {
    source: PageSource<'a>,
    pte: Pte,
    ready: Ready,
}

/// One prefetch request; zero-page requests need no I/O
#[derive(Debug, Clone, PartialEq, Eq)]
struct Request {
    /// (position in the ordered working set, page address)
    pages: Vec<(usize, u64)>,
    io: bool,
    snapshot: bool,
}

impl Request {
    fn first(&self) -> usize {
        self.pages[0].0
    }
}

/// The ordered working set: distinct pages of the ordering segments
fn ordered_pages(img: &JifImage) -> Result<Vec<(u64, PageSource<'_>)>, SimError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for addr in img.ord.iter().flat_map(|seg| seg.pages()) {
        if seen.insert(addr) {
            let source = resolve_page(img, addr).map_err(|_| SimError::SimCrash { addr })?;
            out.push((addr, source));
        }
    }
    Ok(out)
}

/// Group ordered pages into requests, sorted by their first page
///
/// Private pages form one stream chunked by `batch` when `stream` is set, otherwise
/// one request per delta interval. Shared pages are grouped in runs contiguous in the
/// same file, zero pages in runs of `batch` (only when `zero_requests` is set).
fn plan_requests(
    img: &JifImage,
    entries: &[(usize, u64, PageSource<'_>)],
    batch: usize,
    stream: bool,
    zero_requests: bool,
) -> Vec<Request> {
    let deltas: Vec<(u64, u64)> = if stream {
        Vec::new()
    } else {
        iter_private_intervals(img)
            .map(|(_, ival)| (ival.start, ival.end))
            .collect()
    };
    let delta_of = |addr: u64| deltas.partition_point(|(_, end)| *end <= addr);

    let mut requests: Vec<Request> = Vec::new();
    let mut private_open: Option<usize> = None;
    let mut by_delta: HashMap<usize, usize> = HashMap::new();
    let mut shared_open: Option<(usize, &str, u64)> = None;
    let mut zero_open: Option<usize> = None;

    let open = |requests: &mut Vec<Request>, page, io, snapshot| {
        requests.push(Request {
            pages: vec![page],
            io,
            snapshot,
        });
        requests.len() - 1
    };

    for &(lidx, addr, source) in entries {
        let page = (lidx, addr);
        match source {
            PageSource::Private { .. } if stream => match private_open {
                Some(r) if requests[r].pages.len() < batch => requests[r].pages.push(page),
                _ => private_open = Some(open(&mut requests, page, true, true)),
            },
            PageSource::Private { .. } => match by_delta.get(&delta_of(addr)) {
                Some(&r) => requests[r].pages.push(page),
                None => {
                    let r = open(&mut requests, page, true, true);
                    by_delta.insert(delta_of(addr), r);
                }
            },
            PageSource::Shared { path, file_offset } => match shared_open {
                Some((r, p, last))
                    if p == path
                        && last + PAGE_SIZE_U64 == file_offset
                        && requests[r].pages.len() < batch =>
                {
                    requests[r].pages.push(page);
                    shared_open = Some((r, p, file_offset));
                }
                _ => {
                    let r = open(&mut requests, page, true, false);
                    shared_open = Some((r, path, file_offset));
                }
            },
            PageSource::Zero if zero_requests => match zero_open {
                Some(r) if requests[r].pages.len() < batch => requests[r].pages.push(page),
                _ => zero_open = Some(open(&mut requests, page, false, false)),
            },
            PageSource::Zero => {}
        }
    }
    requests.sort_by_key(Request::first);
    requests
}

/// Page pool, refilled continuously up to its size
#[derive(Debug)]
struct Pool {
    level: u64,
    size: u64,
    rate: u64,
    last: Ns,
    /// Refill accumulated but not yet worth a page, in pages·ns/s
    credit: u128,
}

impl Pool {
    fn take(&mut self, t: Ns) -> bool {
        if t > self.last {
            self.credit += (t - self.last) as u128 * self.rate as u128;
            let add = (self.credit / NS_PER_SEC as u128) as u64;
            self.credit %= NS_PER_SEC as u128;
            self.level = (self.level + add).min(self.size);
            self.last = t;
        }
        if self.level > 0 {
            self.level -= 1;
            true
        } else {
            false
        }
    }
}

#[derive(Debug)]
struct Prefetcher {
    requests: Vec<Request>,
    next: usize,
    t: Ns,
    /// Pages of the last submitted request still to be installed, and its completion
    pending: Option<(Vec<u64>, Ns)>,
    install: bool,
    vmas_ready: Ns,
}

impl Prefetcher {
    fn has_work(&self) -> bool {
        self.next < self.requests.len() || self.pending.is_some()
    }
}

struct Engine<'a> {
    img: &'a JifImage,
    cm: &'a CostModel,
    spice: Option<SpiceToggles>,
    pages: HashMap<u64, PageState<'a>>,
    device_free: Ns,
    pool: Pool,
    report: RestoreReport,
}

impl<'a> Engine<'a> {
    fn new(img: &'a JifImage, cm: &'a CostModel, strategy: Strategy) -> Self {
        Engine {
            img,
            cm,
            spice: strategy.toggles(),
            pages: HashMap::new(),
            device_free: 0,
            pool: Pool {
                level: cm.pool_size,
                size: cm.pool_size,
                rate: cm.pool_refill_rate,
                last: 0,
                credit: 0,
            },
            report: RestoreReport {
                strategy: strategy.label(),
                ..Default::default()
            },
        }
    }

    fn event(&mut self, t: Ns, kind: EventKind) {
        self.report.events.push(SimEvent { t, kind });
    }

    fn page(&mut self, addr: u64) -> Result<&mut PageState<'a>, SimError> {
        let img = self.img;
        match self.pages.entry(addr) {
            std::collections::hash_map::Entry::Occupied(e) => Ok(e.into_mut()),
            std::collections::hash_map::Entry::Vacant(e) => {
                let source = resolve_page(img, addr).map_err(|_| SimError::SimCrash { addr })?;
                Ok(e.insert(PageState {
                    source,
                    pte: Pte::Absent,
                    ready: Ready::Unplanned,
                }))
            }
        }
    }

    /// How a page gets mapped once resident
    fn mapping(&self, source: PageSource<'_>) -> Pte {
        match source {
            PageSource::Zero => Pte::Writable,
            PageSource::Private {
                eager_writable: true,
                ..
            } if self.spice.is_some() => Pte::Writable,
            _ => Pte::Cow,
        }
    }

    /// Cost of allocating one page at time `t`
    fn alloc(&mut self, t: Ns) -> Ns {
        if self.spice.is_some_and(|s| s.page_pool) && self.pool.take(t) {
            self.report.pool_allocs += 1;
            self.cm.alloc_pool
        } else {
            self.report.global_allocs += 1;
            self.cm.alloc_global
        }
    }

    /// Submit a request of `pages` pages at `t`; returns its completion time
    fn submit(&mut self, t: Ns, pages: u64, snapshot: bool) -> Ns {
        let bytes = pages * PAGE_SIZE_U64;
        let done = t.max(self.device_free) + self.cm.request_time(bytes);
        self.device_free = done;
        self.report.io_requests += 1;
        self.report.snapshot_io_requests += snapshot as u64;
        self.report.bytes_read += bytes;
        self.event(
            t,
            EventKind::Io {
                pages,
                bytes,
                snapshot,
                done,
            },
        );
        done
    }

    /// Allocate and submit a request at `t`; returns (time after submission, completion)
    fn issue(&mut self, mut t: Ns, req: &Request) -> (Ns, Ns) {
        for _ in &req.pages {
            t += self.alloc(t);
        }
        let done = if req.io {
            self.submit(t, req.pages.len() as u64, req.snapshot)
        } else {
            t
        };
        (t, done)
    }

    fn mark(&mut self, addr: u64, ready: Ready) {
        if let Some(state) = self.pages.get_mut(&addr) {
            state.ready = ready;
        }
    }

    /// Install PTEs for `pages` starting at `t`; returns the time after the last one
    fn install(&mut self, mut t: Ns, pages: &[u64]) -> Ns {
        for &addr in pages {
            t += self.cm.pte_install;
            self.mark(addr, Ready::At { t, mapped: true });
        }
        if !pages.is_empty() {
            self.event(
                t,
                EventKind::PtesInstalled {
                    pages: pages.len() as u64,
                },
            );
        }
        t
    }

    /// One prefetcher step: submit the next request, then finish the previous one
    fn step(&mut self, pf: &mut Prefetcher) {
        let mut t = pf.t;
        let mut submitted = None;
        if let Some(req) = pf.requests.get(pf.next).cloned() {
            pf.next += 1;
            let (after, done) = self.issue(t, &req);
            t = after;
            if !pf.install {
                for &(_, addr) in &req.pages {
                    self.mark(
                        addr,
                        Ready::At {
                            t: done,
                            mapped: false,
                        },
                    );
                }
            }
            submitted = Some((req.pages.iter().map(|(_, a)| *a).collect(), done));
        }
        if let Some((pages, done)) = pf.pending.take() {
            t = t.max(done);
            if pf.install {
                t = self.install(t.max(pf.vmas_ready), &pages);
            }
        }
        pf.pending = submitted;
        pf.t = t;
    }

    /// Time to create the VMAs of the image under the given toggles
    fn vma_creation(&self, toggles: SpiceToggles) -> (u64, Ns) {
        let n = if toggles.overlay_vmas {
            self.img.vmas.len()
        } else {
            fragment_count(self.img)
        } as u64;
        let t = match n {
            0 => 0,
            _ if toggles.batched_vma_create => {
                self.cm.vma_create + (n - 1) * self.cm.vma_batch_insert
            }
            _ => n * self.cm.vma_create,
        };
        (n, t)
    }
}

/// Simulate a restore followed by the traced execution
pub fn run_restore(
    img: &JifImage,
    trace: &AccessTrace,
    strategy: Strategy,
    cm: &CostModel,
) -> Result<RestoreReport, SimError> {
    run_restore_with_fds(img, trace, strategy, cm, &ProcessMeta::default(), &[])
}

/// [`run_restore`], with file descriptor uses interleaved in the trace
///
/// Lazy descriptors are resolved, and charged, on their first use.
pub fn run_restore_with_fds(
    img: &JifImage,
    trace: &AccessTrace,
    strategy: Strategy,
    cm: &CostModel,
    meta: &ProcessMeta,
    fd_uses: &[FdUse],
) -> Result<RestoreReport, SimError> {
    cm.check()?;
    let mut eng = Engine::new(img, cm, strategy);
    let batch = cm.batch_pages as usize;

    let ordered = ordered_pages(img)?;
    for (addr, _) in &ordered {
        eng.page(*addr)?;
    }
    let entries: Vec<(usize, u64, PageSource<'_>)> = ordered
        .iter()
        .enumerate()
        .map(|(i, (addr, source))| (i, *addr, *source))
        .collect();

    let mut prefetcher: Option<Prefetcher> = None;
    let t_first = match strategy {
        Strategy::Demand => 0,
        Strategy::SyncPrefetch => {
            let requests = plan_requests(img, &entries, batch, true, false);
            let mut t = 0;
            let mut last = 0;
            for req in &requests {
                let (after, done) = eng.issue(t, req);
                for &(_, addr) in &req.pages {
                    eng.mark(
                        addr,
                        Ready::At {
                            t: done,
                            mapped: false,
                        },
                    );
                }
                t = after;
                last = last.max(done);
            }
            t.max(last)
        }
        Strategy::AsyncAdvisory => {
            let mut rng = ChaCha8Rng::seed_from_u64(cm.rng_seed);
            let honored: Vec<_> = entries
                .iter()
                .filter(|(_, _, source)| !matches!(source, PageSource::Zero))
                .filter(|_| rng.random::<f64>() < cm.advisory_honor_prob)
                .copied()
                .collect();
            let requests = plan_requests(img, &honored, batch, true, false);
            for req in &requests {
                for &(_, addr) in &req.pages {
                    eng.mark(addr, Ready::Pending);
                }
            }
            prefetcher = Some(Prefetcher {
                requests,
                next: 0,
                t: 0,
                pending: None,
                install: false,
                vmas_ready: 0,
            });
            0
        }
        Strategy::Spice(toggles) => {
            let (n_vmas, vmas_ready) = eng.vma_creation(toggles);
            eng.event(vmas_ready, EventKind::VmasCreated { count: n_vmas });
            let requests = plan_requests(img, &entries, batch, toggles.reorder_layout, true);
            for req in &requests {
                for &(_, addr) in &req.pages {
                    eng.mark(addr, Ready::Pending);
                }
            }
            let initial = cm.initial_batch_pages as usize;
            let n_sync = requests.iter().take_while(|r| r.first() < initial).count();

            // synchronous batch, overlapping VMA creation
            let mut t = 0;
            let mut last = 0;
            let mut sync_pages = Vec::new();
            for req in &requests[..n_sync] {
                let (after, done) = eng.issue(t, req);
                if !toggles.eager_pte {
                    for &(_, addr) in &req.pages {
                        eng.mark(
                            addr,
                            Ready::At {
                                t: done,
                                mapped: false,
                            },
                        );
                    }
                }
                sync_pages.extend_from_slice(&req.pages);
                t = after;
                last = last.max(done);
            }
            t = t.max(last);
            let mut pending = None;
            if toggles.eager_pte {
                sync_pages.sort_unstable();
                let split = sync_pages.partition_point(|(lidx, _)| *lidx < initial);
                let now: Vec<u64> = sync_pages[..split].iter().map(|(_, a)| *a).collect();
                let later: Vec<u64> = sync_pages[split..].iter().map(|(_, a)| *a).collect();
                if !now.is_empty() {
                    t = eng.install(t.max(vmas_ready), &now);
                }
                if !later.is_empty() {
                    pending = Some((later, last));
                }
            }
            let t_first = t.max(vmas_ready);

            // the background prefetcher starts along with execution
            prefetcher = Some(Prefetcher {
                requests,
                next: n_sync,
                t: t_first,
                pending,
                install: toggles.eager_pte,
                vmas_ready,
            });
            t_first
        }
    };
    eng.report.t_first_exec = t_first;
    eng.event(t_first, EventKind::ExecStart);

    let mut fds = FdTable::new(meta);
    let mut fd_uses: Vec<FdUse> = fd_uses.to_vec();
    fd_uses.sort_by_key(|u| u.before_access);
    let mut next_fd = 0;

    let mut now = t_first;
    let mut i = 0;
    loop {
        if let Some(pf) = prefetcher
            .as_mut()
            .filter(|pf| pf.has_work() && pf.t <= now)
        {
            eng.step(pf);
            continue;
        }

        while next_fd < fd_uses.len() && fd_uses[next_fd].before_access <= i {
            let fd = fd_uses[next_fd].fd;
            if fds.use_fd(fd)? {
                now += cm.fd_resolve;
                eng.report.lazy_fd_events += 1;
                eng.event(now, EventKind::FdResolved { fd });
            }
            next_fd += 1;
        }
        let Some(access) = trace.accesses.get(i) else {
            break;
        };
        let addr = page_floor(access.addr);
        let state = *eng.page(addr)?;
        let mut pte = state.pte;

        if pte == Pte::Absent {
            let mapping = eng.mapping(state.source);
            match state.ready {
                Ready::Pending => {
                    // the prefetcher has to catch up before this access is decided
                    match prefetcher.as_mut().filter(|pf| pf.has_work()) {
                        Some(pf) => eng.step(pf),
                        None => eng.mark(addr, Ready::Unplanned),
                    }
                    continue;
                }
                Ready::At { t, mapped } if t > now => {
                    eng.report.major_faults += 1;
                    eng.event(
                        now,
                        EventKind::MajorFault {
                            addr,
                            stalled: true,
                        },
                    );
                    now = t + cm.major_fault_overhead;
                    if !mapped {
                        now += cm.pte_install;
                    }
                }
                Ready::At { mapped: true, .. } => {}
                Ready::At { mapped: false, .. } => {
                    eng.report.minor_faults += 1;
                    eng.event(now, EventKind::MinorFault { addr });
                    now += cm.minor_fault_cost();
                }
                Ready::Unplanned => match state.source {
                    PageSource::Zero => {
                        eng.report.minor_faults += 1;
                        eng.event(now, EventKind::MinorFault { addr });
                        now += cm.minor_fault_cost();
                        now += eng.alloc(now);
                    }
                    PageSource::Private { .. } | PageSource::Shared { .. } => {
                        eng.report.major_faults += 1;
                        eng.event(
                            now,
                            EventKind::MajorFault {
                                addr,
                                stalled: false,
                            },
                        );
                        now += cm.major_fault_overhead;
                        now += eng.alloc(now);
                        let snapshot = matches!(state.source, PageSource::Private { .. });
                        now = eng.submit(now, 1, snapshot) + cm.pte_install;
                    }
                },
            }
            pte = mapping;
        }

        if access.is_write() && pte == Pte::Cow {
            eng.report.cow_faults += 1;
            eng.event(now, EventKind::CowFault { addr });
            now += cm.minor_fault + cm.cow_copy + cm.pte_install;
            now += eng.alloc(now);
            pte = Pte::Writable;
        }
        eng.page(addr)?.pte = pte;
        now += cm.per_access_compute;
        i += 1;
    }

    eng.report.t_complete = now;
    eng.event(now, EventKind::ExecEnd);
    let mut report = eng.report;
    report.events.sort_by_key(|e| e.t);
    Ok(report)
}
