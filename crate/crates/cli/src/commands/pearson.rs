use serde::Deserialize;
use weightlab_core::eval::pearson;

use crate::config::{overlay, required, Settings};
use crate::output::fixed;

#[derive(Debug, Clone, Default, clap::Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PearsonArgs {
    /// First series, comma separated
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub x: Option<Vec<f64>>,

    /// Second series, comma separated
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub y: Option<Vec<f64>>,
}

pub fn run(settings: &Settings, args: PearsonArgs) -> anyhow::Result<()> {
    let file: PearsonArgs = settings.file_args()?;
    let a = overlay!(args, file; x, y);
    let r = pearson(&required(a.x, "--x")?, &required(a.y, "--y")?)?;
    println!("{}", fixed(r, 6));
    Ok(())
}
