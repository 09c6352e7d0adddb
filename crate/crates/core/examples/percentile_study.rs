//! Clones the top, median and bottom 5% of trajectories of a mixed
//! expert/inferior dataset and regularizes BR toward each clone.
//!
//! `cargo run --release --example percentile_study`

use cpi_lab::experiment::{run_percentile, PercentileSpec};

fn main() -> cpi_lab::Result<()> {
    let report = run_percentile(&PercentileSpec::default(), None)?;
    print!("{report}");
    println!();
    print!("{}", report.to_csv());
    Ok(())
}
