//! `jiftool`: inspect, build, reorder and simulate JIF images
//!
//! Machine-readable output goes to stdout and diagnostics to stderr. The exit code is
//! 0 on success, 1 when `validate` reports findings and 2 on any error (including
//! usage errors).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use jif::backing::DirBacking;
use jif::builder::{
    build_jif, load_raw_meta, load_raw_snapshot, reorder_by_trace, BuildOptions, WriteSet,
};
use jif::format::{checksum_finding, decode_jif, prot, stats, validate};
use jif::meta::{batched_restore_cost, decode_meta, replay_cost_estimate, to_meta_tsv};
use jif::overlay::{materialize_vma, IntervalSource};
use jif::sim::{
    compare_strategies, default_strategies, parse_config, run_restore, SimConfig, Strategy,
};
use jif::trace::{load_trace, AccessTrace};
use jif::utils::parse_hex;
use jif::{parse_jif, write_jif, JifError, JifImage};

#[derive(Parser, Debug)]
#[command(
    name = "jiftool",
    version,
    about = "Inspect, build, reorder and simulate JIF snapshot images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the header and every table of an image
    Inspect { jif: PathBuf },

    /// Print the page accounting of an image (restricted to a trace with --trace)
    Stats {
        jif: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },

    /// Check every invariant of an image and print the findings
    Validate { jif: PathBuf },

    /// Build an image from a raw snapshot directory
    Build {
        /// raw snapshot directory
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// access trace used to order the data section
        #[arg(long)]
        trace: Option<PathBuf>,
        /// profiling trace whose writes form the write set (repeatable); defaults to
        /// the writes of --trace
        #[arg(long)]
        writeset: Vec<PathBuf>,
        /// bytes below the stack pointer that are kept
        #[arg(long, default_value_t = jif::builder::DEFAULT_REDZONE)]
        redzone: u64,
    },

    /// Rewrite the data section and ordering of an image in trace order
    Reorder {
        jif: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },

    /// Write the reassembled content of one VMA
    Materialize {
        jif: PathBuf,
        /// any address inside the VMA (hex)
        #[arg(long, value_parser = parse_addr)]
        vma: u64,
        /// directory holding the backing files under their absolute path
        #[arg(long)]
        backing: PathBuf,
        /// output file (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Simulate one restore strategy
    Simulate {
        jif: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// demand, sync, async, spice or spice:<toggles> (e.g. spice:overlay+reorder)
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// also print the event log
        #[arg(long)]
        events: bool,
    },

    /// Simulate every strategy on the same inputs and print a comparison table
    Compare {
        jif: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },

    /// Print the process metadata of an image
    MetaDump { jif: PathBuf },
}

fn parse_addr(s: &str) -> Result<u64, String> {
    parse_hex(s).ok_or_else(|| format!("`{s}` is not a hexadecimal address"))
}

fn read_image(path: &Path) -> anyhow::Result<JifImage> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_jif(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn read_trace(path: &Path) -> anyhow::Result<AccessTrace> {
    load_trace(path).with_context(|| format!("reading trace {}", path.display()))
}

fn read_config(path: Option<&Path>) -> anyhow::Result<SimConfig> {
    let Some(path) = path else {
        return Ok(SimConfig::default());
    };
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_image(path: &Path, img: &JifImage) -> anyhow::Result<()> {
    let bytes = write_jif(img)?;
    std::fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {} ({} B)", path.display(), bytes.len());
    Ok(())
}

fn inspect(img: &JifImage, out: &mut impl Write) -> std::io::Result<()> {
    let h = &img.header;
    writeln!(
        out,
        "header version={} flags={:#x} n_vmas={} n_itree_nodes={} n_ord_segments={} strings_size={} metadata_size={} data_offset={:#x} checksum={:#010x}{}",
        h.version,
        h.flags,
        h.n_vmas,
        h.n_itree_nodes,
        h.n_ord_segments,
        h.strings_size,
        h.metadata_size,
        h.data_offset,
        h.table_checksum,
        if checksum_finding(img).is_some() { " (mismatch)" } else { "" },
    )?;
    for (i, vma) in img.vmas.iter().enumerate() {
        writeln!(
            out,
            "vma {i} {:#x}-{:#x} {} path={} file_offset={:#x} itree={}+{} vflags={:#x}",
            vma.vbegin,
            vma.vend,
            prot::to_letters(vma.prot),
            img.vma_path(vma).unwrap_or("-"),
            vma.ref_file_offset,
            vma.itree_first,
            vma.itree_count,
            vma.vflags,
        )?;
        if vma.itree_range().end > img.nodes.len() {
            continue;
        }
        for ival in img.tree(vma).in_order() {
            match ival.source {
                IntervalSource::Private {
                    offset,
                    eager_writable,
                } => writeln!(
                    out,
                    "  {:#x}-{:#x} private data_offset={offset:#x}{}",
                    ival.start,
                    ival.end,
                    if eager_writable { " eager" } else { "" }
                )?,
                IntervalSource::Zero => writeln!(out, "  {:#x}-{:#x} zero", ival.start, ival.end)?,
            }
        }
    }
    for (i, seg) in img.ord.iter().enumerate() {
        writeln!(
            out,
            "ord {i} {:#x} n_pages={} {}",
            seg.vaddr,
            seg.n_pages,
            seg.kind.name()
        )?;
    }
    for (offset, s) in img.iter_strings() {
        writeln!(out, "string {offset:#x} {}", String::from_utf8_lossy(s))?;
    }
    writeln!(out, "data {} B", img.data.len())
}

/// Findings of an image file, including those that prevent decoding altogether
fn findings_of(bytes: &[u8]) -> anyhow::Result<Vec<jif::format::Finding>> {
    match decode_jif(bytes) {
        Ok(img) => Ok(checksum_finding(&img)
            .into_iter()
            .chain(validate(&img))
            .collect()),
        Err(JifError::TableInvariantViolation { findings, .. }) => Ok(findings),
        Err(e) => Err(e.into()),
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    match cli.command {
        Command::Inspect { jif } => {
            let bytes =
                std::fs::read(&jif).with_context(|| format!("reading {}", jif.display()))?;
            let img = decode_jif(&bytes).with_context(|| format!("decoding {}", jif.display()))?;
            inspect(&img, &mut out)?;
        }
        Command::Stats { jif, trace } => {
            let img = read_image(&jif)?;
            let trace = trace.as_deref().map(read_trace).transpose()?;
            writeln!(out, "{}", stats(&img, trace.as_ref())?)?;
        }
        Command::Validate { jif } => {
            let bytes =
                std::fs::read(&jif).with_context(|| format!("reading {}", jif.display()))?;
            let findings = findings_of(&bytes)?;
            for f in &findings {
                writeln!(out, "{f}")?;
            }
            if !findings.is_empty() {
                out.flush()?;
                eprintln!("{}: {} finding(s)", jif.display(), findings.len());
                return Ok(ExitCode::from(1));
            }
        }
        Command::Build {
            raw,
            out: out_path,
            trace,
            writeset,
            redzone,
        } => {
            let snapshot = load_raw_snapshot(&raw)?;
            let meta = load_raw_meta(&raw)?;
            let backing = DirBacking::new(raw.join("backing"));
            let trace = trace.as_deref().map(read_trace).transpose()?;
            let profiles = writeset
                .iter()
                .map(|p| read_trace(p))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let ws = if profiles.is_empty() {
                WriteSet::from_traces(trace.iter())
            } else {
                WriteSet::from_traces(&profiles)
            };
            let img = build_jif(
                &snapshot,
                &backing,
                &ws,
                trace.as_ref(),
                &meta,
                &BuildOptions { redzone },
            )?;
            write_image(&out_path, &img)?;
            writeln!(out, "{}", stats(&img, None)?)?;
        }
        Command::Reorder {
            jif,
            trace,
            out: out_path,
        } => {
            let img = read_image(&jif)?;
            let trace = read_trace(&trace)?;
            write_image(&out_path, &reorder_by_trace(&img, &trace)?)?;
        }
        Command::Materialize {
            jif,
            vma,
            backing,
            out: out_path,
        } => {
            let img = read_image(&jif)?;
            let Some(idx) = img.find_vma(vma) else {
                bail!("no VMA of {} contains {vma:#x}", jif.display());
            };
            let content = materialize_vma(&img, &img.vmas[idx], &DirBacking::new(backing))?;
            match out_path {
                Some(path) => std::fs::write(&path, &content)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => out.write_all(&content)?,
            }
        }
        Command::Simulate {
            jif,
            trace,
            strategy,
            config,
            events,
        } => {
            let img = read_image(&jif)?;
            let trace = read_trace(&trace)?;
            let cfg = read_config(config.as_deref())?;
            let Some(strategy) = Strategy::parse(&strategy, cfg.toggles) else {
                bail!("unknown strategy `{strategy}`");
            };
            let report = run_restore(&img, &trace, strategy, &cfg.cost)?;
            writeln!(out, "{}", report.line())?;
            if events {
                for ev in &report.events {
                    writeln!(out, "{ev}")?;
                }
            }
        }
        Command::Compare { jif, trace, config } => {
            let img = read_image(&jif)?;
            let trace = read_trace(&trace)?;
            let cfg = read_config(config.as_deref())?;
            let cmp =
                compare_strategies(&img, &trace, &cfg.cost, &default_strategies(cfg.toggles))?;
            write!(out, "{}", cmp.render())?;
        }
        Command::MetaDump { jif } => {
            let img = read_image(&jif)?;
            let meta = decode_meta(&img.metadata)?;
            write!(out, "{}", to_meta_tsv(&meta))?;
            writeln!(
                out,
                "# replay_cost={} batched_cost={} lazy_fds={}",
                replay_cost_estimate(&meta, img.vmas.len() as u64),
                batched_restore_cost(&meta),
                meta.n_lazy_fds()
            )?;
        }
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // clap reports usage errors with exit code 2 on its own
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("jiftool: {e:#}");
            ExitCode::from(2)
        }
    }
}
