//! Runs a small CPI/BR grid from a JSON spec and writes curve CSVs, the
//! aggregate CSV and the run summary to a temporary directory.
//!
//! `cargo run --release --example experiment_grid`

use cpi_lab::experiment::{run_grid, write_grid, ExperimentSpec};

const SPEC: &str = r#"{
    "name": "small-grid",
    "env": "fourroom",
    "dataset": "random",
    "algorithms": ["cpi", "br"],
    "taus": [0.1, 2.0],
    "iterations": 50,
    "seeds": [0, 1, 2]
}"#;

fn main() -> cpi_lab::Result<()> {
    let spec = ExperimentSpec::from_json(SPEC)?;
    let outcome = run_grid(&spec, Some(2))?;
    let dir = std::env::temp_dir().join("cpi-lab-small-grid");
    let files = write_grid(&spec, &outcome, &dir)?;
    for r in &outcome.records {
        println!("{:<32} {:>6}", r.key.stem(), r.final_return);
    }
    println!("{} files in {}, spec hash {}", files.len(), dir.display(), outcome.spec_hash);
    Ok(())
}
