//! The `weightlab` command-line front end.
//!
//! Every subcommand follows the same shape: flags and an optional JSON config
//! file are folded into a validated run configuration, the work runs inside a
//! rayon pool of the requested size, and results are written as CSV, SVG and
//! JSON files. Failures are reported as one JSON line on stderr:
//!
//! ```text
//! {"error":{"kind":"shape_mismatch","message":"..."}}
//! ```
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage errors (bad
//! flags, bad config files, out-of-range parameters).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod output;
pub mod svg;

pub use config::UsageError;

#[derive(Debug, Parser)]
#[command(name = "weightlab", version, about = "Checkpoint merging and weight-shift diagnostics")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,

    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Common {
    /// JSON file with command parameters; flags given on the command line win
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random stream (DARE masks, projections, random masks)
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; never changes numeric results
    #[arg(long, global = true, env = "WEIGHTLAB_THREADS")]
    pub threads: Option<usize>,

    /// Directory for report files (default: current directory)
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge fine-tuned checkpoints into one archive
    Merge(commands::merge::MergeArgs),
    /// Changed-weight overlap and shift-direction similarity between fine-tuned models
    WeightReport(commands::weight_report::ReportArgs),
    /// Forward-KL matrix and policy neighborhoods from log-prob traces
    Kl(commands::kl::KlArgs),
    /// Per-task accuracy-gain consistency with the union of single-task models
    Gain(commands::gain::GainArgs),
    /// Jaccard overlap of two independent random masks
    Baseline(commands::baseline::BaselineArgs),
    /// Pearson correlation of two number series
    Pearson(commands::pearson::PearsonArgs),
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            report_error("usage", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let (kind, code) = classify(&e);
            report_error(kind, &format!("{e:#}"));
            code
        }
    }
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    let settings = config::Settings::load(&cli.common)?;
    let threads = settings.threads;
    with_threads(threads, move || match cli.command {
        Command::Merge(args) => commands::merge::run(&settings, args),
        Command::WeightReport(args) => commands::weight_report::run(&settings, args),
        Command::Kl(args) => commands::kl::run(&settings, args),
        Command::Gain(args) => commands::gain::run(&settings, args),
        Command::Baseline(args) => commands::baseline::run(&settings, args),
        Command::Pearson(args) => commands::pearson::run(&settings, args),
    })?
}

#[cfg(feature = "parallel")]
fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> anyhow::Result<R> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?.install(f))
}

#[cfg(not(feature = "parallel"))]
fn with_threads<R: Send>(_threads: Option<usize>, f: impl FnOnce() -> R + Send) -> anyhow::Result<R> {
    Ok(f())
}

/// Map an error to its reported kind and exit code.
pub fn classify(e: &anyhow::Error) -> (&'static str, i32) {
    if e.downcast_ref::<UsageError>().is_some() {
        return ("usage", 2);
    }
    if let Some(core) = e.downcast_ref::<weightlab_core::Error>() {
        let code = if matches!(core, weightlab_core::Error::InvalidParameter { .. }) { 2 } else { 1 };
        return (core.kind(), code);
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return ("io", 1);
    }
    ("runtime", 1)
}

fn report_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
}
