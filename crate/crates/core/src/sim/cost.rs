//! Cost model and the flat `key = value` configuration file
//!
//! Times are stored as integer nanoseconds. In the configuration file they are given
//! in microseconds (keys ending in `_us`), with up to three decimals.
//!
//! ```text
//! # cost model
//! io_bandwidth = 13600000000
//! io_request_latency_us = 80
//! pte_install_us = 0.3
//! batch_pages = 256
//! # strategy toggles
//! reorder_layout = off
//! ```

use crate::error::SimError;

/// Simulated time, in nanoseconds
pub type Ns = u64;

pub const NS_PER_SEC: u64 = 1_000_000_000;
pub const NS_PER_US: u64 = 1_000;

/// Costs charged by the restore simulator
///
/// The defaults are placeholders chosen to be plausible for a modern NVMe machine,
/// except for the bandwidth which matches the evaluation hardware.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    /// Sequential read bandwidth, bytes per second
    pub io_bandwidth: u64,
    /// Fixed cost of one I/O request
    pub io_request_latency: Ns,
    /// Trap cost of a fault on resident data (the PTE install is charged on top)
    pub minor_fault: Ns,
    /// Trap cost of a fault needing I/O, excluding the wait itself
    pub major_fault_overhead: Ns,
    /// Copying a page on a CoW fault
    pub cow_copy: Ns,
    /// Installing one page table entry
    pub pte_install: Ns,
    /// Allocating a page from the global allocator
    pub alloc_global: Ns,
    /// Allocating a page from the pre-allocated pool
    pub alloc_pool: Ns,
    /// Execution time of one trace access, once its page is mapped
    pub per_access_compute: Ns,
    /// Creating one VMA on its own
    pub vma_create: Ns,
    /// Each additional VMA of a batched creation
    pub vma_batch_insert: Ns,
    /// Resolving a lazy file descriptor on first use
    pub fd_resolve: Ns,
    /// Pages per background prefetch request
    pub batch_pages: u32,
    /// Leading ordered pages fetched before execution resumes
    pub initial_batch_pages: u32,
    /// Pages available in the pool at restore time
    pub pool_size: u64,
    /// Pages per second added back to the pool
    pub pool_refill_rate: u64,
    /// Probability that an advisory prefetch of one page is honored
    pub advisory_honor_prob: f64,
    pub rng_seed: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            io_bandwidth: 13_600_000_000,
            io_request_latency: 80_000,
            minor_fault: 1_000,
            major_fault_overhead: 5_000,
            cow_copy: 2_000,
            pte_install: 300,
            alloc_global: 1_000,
            alloc_pool: 50,
            per_access_compute: 200,
            vma_create: 2_000,
            vma_batch_insert: 200,
            fd_resolve: 5_000,
            batch_pages: 256,
            initial_batch_pages: 64,
            pool_size: 16_384,
            pool_refill_rate: 100_000,
            advisory_honor_prob: 0.8,
            rng_seed: 0,
        }
    }
}

impl CostModel {
    pub fn check(&self) -> Result<(), SimError> {
        let err = |msg: &str| Err(SimError::InvalidCostModel(msg.to_string()));
        if self.io_bandwidth == 0 {
            return err("io_bandwidth must be positive");
        }
        if self.batch_pages == 0 {
            return err("batch_pages must be positive");
        }
        if self.alloc_pool > self.alloc_global {
            return err("alloc_pool must not exceed alloc_global");
        }
        if !(0.0..=1.0).contains(&self.advisory_honor_prob) {
            return err("advisory_honor_prob must lie in [0, 1]");
        }
        Ok(())
    }

    /// Time to move `bytes` at the configured bandwidth (rounded up)
    pub fn transfer_time(&self, bytes: u64) -> Ns {
        (bytes as u128 * NS_PER_SEC as u128).div_ceil(self.io_bandwidth as u128) as Ns
    }

    /// Device time of one request
    pub fn request_time(&self, bytes: u64) -> Ns {
        self.io_request_latency + self.transfer_time(bytes)
    }

    /// Cost of a minor fault, trap and mapping
    pub fn minor_fault_cost(&self) -> Ns {
        self.minor_fault + self.pte_install
    }
}

/// SPICE optimizations that can be switched off one by one
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpiceToggles {
    /// One VMA per overlay VMA, instead of one per interval or gap
    pub overlay_vmas: bool,
    /// Create all VMAs in one operation
    pub batched_vma_create: bool,
    /// Working-set private pages are read as one sequential stream
    pub reorder_layout: bool,
    /// The prefetcher installs PTEs
    pub eager_pte: bool,
    /// Allocations are served from a pre-allocated pool
    pub page_pool: bool,
}

impl SpiceToggles {
    pub const ALL: SpiceToggles = SpiceToggles {
        overlay_vmas: true,
        batched_vma_create: true,
        reorder_layout: true,
        eager_pte: true,
        page_pool: true,
    };

    pub const NONE: SpiceToggles = SpiceToggles {
        overlay_vmas: false,
        batched_vma_create: false,
        reorder_layout: false,
        eager_pte: false,
        page_pool: false,
    };

    const NAMES: [&'static str; 5] = ["overlay", "batch", "reorder", "eager_pte", "pool"];

    fn flags(&self) -> [bool; 5] {
        [
            self.overlay_vmas,
            self.batched_vma_create,
            self.reorder_layout,
            self.eager_pte,
            self.page_pool,
        ]
    }

    fn flag_mut(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "overlay" | "overlay_vmas" => &mut self.overlay_vmas,
            "batch" | "batched_vma_create" => &mut self.batched_vma_create,
            "reorder" | "reorder_layout" => &mut self.reorder_layout,
            "eager_pte" => &mut self.eager_pte,
            "pool" | "page_pool" => &mut self.page_pool,
            _ => return None,
        })
    }

    /// `all`, `none` or the enabled toggles joined with `+`
    pub fn label(&self) -> String {
        match *self {
            SpiceToggles::ALL => "all".to_string(),
            SpiceToggles::NONE => "none".to_string(),
            _ => SpiceToggles::NAMES
                .iter()
                .zip(self.flags())
                .filter(|(_, on)| *on)
                .map(|(name, _)| *name)
                .collect::<Vec<_>>()
                .join("+"),
        }
    }

    /// Inverse of [`SpiceToggles::label`]
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => return Some(SpiceToggles::ALL),
            "none" => return Some(SpiceToggles::NONE),
            _ => {}
        }
        let mut toggles = SpiceToggles::NONE;
        for name in s.split('+') {
            *toggles.flag_mut(name.trim())? = true;
        }
        Some(toggles)
    }
}

impl Default for SpiceToggles {
    fn default() -> Self {
        SpiceToggles::ALL
    }
}

/// A restore strategy
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Every page is faulted in on first touch
    Demand,
    /// The whole working set is read before execution resumes
    SyncPrefetch,
    /// Advisory prefetch concurrent with execution, not always honored
    AsyncAdvisory,
    Spice(SpiceToggles),
}

impl Strategy {
    /// `demand`, `sync`, `async` or `spice:<toggles>`
    pub fn label(&self) -> String {
        match self {
            Strategy::Demand => "demand".to_string(),
            Strategy::SyncPrefetch => "sync".to_string(),
            Strategy::AsyncAdvisory => "async".to_string(),
            Strategy::Spice(t) => format!("spice:{}", t.label()),
        }
    }

    /// Parse a strategy name; a bare `spice` takes the given toggles
    pub fn parse(s: &str, default_toggles: SpiceToggles) -> Option<Self> {
        match s {
            "demand" => Some(Strategy::Demand),
            "sync" => Some(Strategy::SyncPrefetch),
            "async" => Some(Strategy::AsyncAdvisory),
            "spice" => Some(Strategy::Spice(default_toggles)),
            _ => SpiceToggles::parse(s.strip_prefix("spice:")?).map(Strategy::Spice),
        }
    }

    pub fn toggles(&self) -> Option<SpiceToggles> {
        match self {
            Strategy::Spice(t) => Some(*t),
            _ => None,
        }
    }
}

/// Contents of a simulator configuration file
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimConfig {
    pub cost: CostModel,
    /// Toggles used by a bare `spice` strategy
    pub toggles: SpiceToggles,
}

/// Parse a decimal number of microseconds into nanoseconds, exactly
fn parse_us(value: &str) -> Option<Ns> {
    let (int, frac) = value.split_once('.').unwrap_or((value, ""));
    if frac.len() > 3 || (int.is_empty() && frac.is_empty()) {
        return None;
    }
    let digits = |s: &str| s.is_empty() || s.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || !digits(frac) {
        return None;
    }
    let int: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let frac: u64 = if frac.is_empty() {
        0
    } else {
        frac.parse::<u64>().ok()? * 10u64.pow(3 - frac.len() as u32)
    };
    int.checked_mul(NS_PER_US)?.checked_add(frac)
}

fn parse_toggle(value: &str) -> Option<bool> {
    match value {
        "on" | "true" | "1" => Some(true),
        "off" | "false" | "0" => Some(false),
        _ => None,
    }
}

/// Format nanoseconds as microseconds, the inverse of the `_us` parser
pub fn format_us(ns: Ns) -> String {
    format!("{}.{:03}", ns / NS_PER_US, ns % NS_PER_US)
}

/// Parse a configuration file; keys not mentioned keep their defaults
pub fn parse_config(text: &str) -> Result<SimConfig, SimError> {
    let mut cfg = SimConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| SimError::Config { line: n + 1, msg };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("expected `key = value`".to_string()))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = || err(format!("bad value `{value}` for `{key}`"));

        let c = &mut cfg.cost;
        let time = match key {
            "io_request_latency_us" => Some(&mut c.io_request_latency),
            "minor_fault_us" => Some(&mut c.minor_fault),
            "major_fault_overhead_us" => Some(&mut c.major_fault_overhead),
            "cow_copy_us" => Some(&mut c.cow_copy),
            "pte_install_us" => Some(&mut c.pte_install),
            "alloc_global_us" => Some(&mut c.alloc_global),
            "alloc_pool_us" => Some(&mut c.alloc_pool),
            "per_access_compute_us" => Some(&mut c.per_access_compute),
            "vma_create_us" => Some(&mut c.vma_create),
            "vma_batch_insert_us" => Some(&mut c.vma_batch_insert),
            "fd_resolve_us" => Some(&mut c.fd_resolve),
            _ => None,
        };
        if let Some(field) = time {
            *field = parse_us(value).ok_or_else(bad)?;
            continue;
        }
        match key {
            "io_bandwidth" => c.io_bandwidth = value.parse().map_err(|_| bad())?,
            "batch_pages" => c.batch_pages = value.parse().map_err(|_| bad())?,
            "initial_batch_pages" => c.initial_batch_pages = value.parse().map_err(|_| bad())?,
            "pool_size" => c.pool_size = value.parse().map_err(|_| bad())?,
            "pool_refill_rate" => c.pool_refill_rate = value.parse().map_err(|_| bad())?,
            "advisory_honor_prob" => c.advisory_honor_prob = value.parse().map_err(|_| bad())?,
            "rng_seed" => c.rng_seed = value.parse().map_err(|_| bad())?,
            _ => {
                let flag = cfg
                    .toggles
                    .flag_mut(key)
                    .ok_or_else(|| err(format!("unknown key `{key}`")))?;
                *flag = parse_toggle(value).ok_or_else(bad)?;
            }
        }
    }
    cfg.cost.check()?;
    Ok(cfg)
}
