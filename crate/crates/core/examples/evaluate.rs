//! Score every trained variant found in a run directory.
//!
//! ```text
//! cargo run --release --example evaluate -- <data_dir> <run_dir> [split]
//! ```

use std::path::PathBuf;

use cvaeseg::data::{load_dataset, Split};
use cvaeseg::pipeline::evaluate;

fn main() -> cvaeseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let (Some(data), Some(run)) = (args.next(), args.next()) else {
        eprintln!("usage: evaluate <data_dir> <run_dir> [split]");
        std::process::exit(1);
    };
    let split: Split = args.next().map_or(Ok(Split::Test), |s| s.parse())?;
    let ds = load_dataset(&PathBuf::from(data))?;
    let report = evaluate(&ds, split, 8, &PathBuf::from(run))?;
    println!("{}", report.to_json());
    Ok(())
}
