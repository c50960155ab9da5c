use serde::Deserialize;
use weightlab_core::diagnostics::random_jaccard_baseline;

use crate::config::{overlay, Settings};
use crate::output::{fixed, sig6, write_atomic, Table};

pub const DEFAULT_D: usize = 1_000_000;

#[derive(Debug, Clone, Default, clap::Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineArgs {
    /// Probability that a mask bit is set [default: 0.3]
    #[arg(long)]
    pub p: Option<f64>,

    /// Mask length [default: 1000000]
    #[arg(long)]
    pub d: Option<usize>,
}

pub fn run(settings: &Settings, args: BaselineArgs) -> anyhow::Result<()> {
    let file: BaselineArgs = settings.file_args()?;
    let a = overlay!(args, file; p, d);
    let (p, d, seed) = (a.p.unwrap_or(0.3), a.d.unwrap_or(DEFAULT_D), settings.seed());
    let b = random_jaccard_baseline(p, d, seed)?;
    let mut table = Table::new(&["p", "d", "seed", "analytic", "empirical"])?;
    table.row(&[sig6(p), d.to_string(), seed.to_string(), sig6(b.analytic), sig6(b.empirical)])?;
    write_atomic(&settings.out_path("baseline.csv"), &table.into_bytes()?)?;
    println!("random p={p} d={d}  analytic {}  empirical {}", fixed(b.analytic, 3), fixed(b.empirical, 3));
    Ok(())
}
