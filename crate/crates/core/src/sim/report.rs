//! Restore reports and their text forms

use std::fmt;

use super::cost::{format_us, Ns};

/// Something that happened during a simulated restore
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    VmasCreated {
        count: u64,
    },
    /// An I/O request, from submission (the event time) to completion
    Io {
        pages: u64,
        bytes: u64,
        snapshot: bool,
        done: Ns,
    },
    /// A batch of PTEs installed by the prefetcher
    PtesInstalled {
        pages: u64,
    },
    ExecStart,
    /// `stalled` when the page was already being prefetched
    MajorFault {
        addr: u64,
        stalled: bool,
    },
    MinorFault {
        addr: u64,
    },
    CowFault {
        addr: u64,
    },
    FdResolved {
        fd: u32,
    },
    ExecEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimEvent {
    pub t: Ns,
    pub kind: EventKind,
}

impl fmt::Display for SimEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ", format_us(self.t))?;
        match self.kind {
            EventKind::VmasCreated { count } => write!(f, "vmas_created count={count}"),
            EventKind::Io {
                pages,
                bytes,
                snapshot,
                done,
            } => write!(
                f,
                "io pages={pages} bytes={bytes} source={} done_us={}",
                if snapshot { "image" } else { "backing" },
                format_us(done)
            ),
            EventKind::PtesInstalled { pages } => write!(f, "ptes_installed pages={pages}"),
            EventKind::ExecStart => write!(f, "exec_start"),
            EventKind::MajorFault { addr, stalled } => {
                write!(f, "major_fault addr={addr:#x}")?;
                if stalled {
                    write!(f, " stalled")?;
                }
                Ok(())
            }
            EventKind::MinorFault { addr } => write!(f, "minor_fault addr={addr:#x}"),
            EventKind::CowFault { addr } => write!(f, "cow_fault addr={addr:#x}"),
            EventKind::FdResolved { fd } => write!(f, "fd_resolved fd={fd}"),
            EventKind::ExecEnd => write!(f, "exec_end"),
        }
    }
}

/// Outcome of one simulated restore
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RestoreReport {
    pub strategy: String,
    pub major_faults: u64,
    pub minor_faults: u64,
    pub cow_faults: u64,
    /// All I/O requests, to the image and to backing files
    pub io_requests: u64,
    /// Requests reading the image's data section
    pub snapshot_io_requests: u64,
    pub bytes_read: u64,
    pub pool_allocs: u64,
    pub global_allocs: u64,
    /// When execution resumed
    pub t_first_exec: Ns,
    /// When the last traced access completed
    pub t_complete: Ns,
    pub lazy_fd_events: u64,
    /// Events ordered by time
    pub events: Vec<SimEvent>,
}

impl RestoreReport {
    /// The machine-readable summary line
    pub fn line(&self) -> String {
        format!(
            "strategy={} major={} minor={} cow={} io_reqs={} bytes={} t_first_us={} t_done_us={}",
            self.strategy,
            self.major_faults,
            self.minor_faults,
            self.cow_faults,
            self.io_requests,
            self.bytes_read,
            format_us(self.t_first_exec),
            format_us(self.t_complete),
        )
    }
}

impl fmt::Display for RestoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

/// The result of [`super::compare_strategies`]
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comparison {
    pub reports: Vec<RestoreReport>,
    pub ideal: Ns,
}

const COLUMNS: [&str; 10] = [
    "strategy",
    "major",
    "minor",
    "cow",
    "io_reqs",
    "bytes",
    "pool",
    "global",
    "t_first_us",
    "t_done_us",
];

impl Comparison {
    /// Aligned human-readable table
    pub fn table(&self) -> String {
        let rows: Vec<[String; 10]> = self
            .reports
            .iter()
            .map(|r| {
                [
                    r.strategy.clone(),
                    r.major_faults.to_string(),
                    r.minor_faults.to_string(),
                    r.cow_faults.to_string(),
                    r.io_requests.to_string(),
                    r.bytes_read.to_string(),
                    r.pool_allocs.to_string(),
                    r.global_allocs.to_string(),
                    format_us(r.t_first_exec),
                    format_us(r.t_complete),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..COLUMNS.len())
            .map(|c| {
                rows.iter()
                    .map(|r| r[c].len())
                    .chain([COLUMNS[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();

        let mut out = String::new();
        let mut push_row = |cells: &[&str]| {
            let line: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| {
                    if c == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        };
        push_row(&COLUMNS);
        for row in &rows {
            push_row(&row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }

    /// The table, then one summary line per report and the ideal restore time
    pub fn render(&self) -> String {
        let mut out = self.table();
        out.push('\n');
        for r in &self.reports {
            out.push_str(&r.line());
            out.push('\n');
        }
        out.push_str(&format!("ideal t_done_us={}\n", format_us(self.ideal)));
        out
    }
}
