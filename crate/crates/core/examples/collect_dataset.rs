//! Collects the inferior-policy dataset on the 7×7 grid, checks that an
//! optimal path is covered and round-trips it through JSONL.
//!
//! `cargo run --example collect_dataset -- [seed]`

use cpi_lab::data::{empirical_behavior_policy, Dataset, Smoothing};
use cpi_lab::experiment::{build_dataset, oracle_report, DatasetRecipe, DatasetStats, Environment};
use cpi_lab::dp::UnvisitedFallback;

fn main() -> cpi_lab::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let env = Environment::load("grid7x7", 0.9)?;
    let recipe = DatasetRecipe::preset("inferior")?;
    let ds = build_dataset(&env, &recipe, seed)?;
    println!("{}", DatasetStats::of(&ds));
    println!("provenance: {}", serde_json::to_string(&ds.provenance)?);

    let mdp = env.mdp();
    let estimate = empirical_behavior_policy(&ds, mdp.n_states(), mdp.n_actions(), Smoothing::UniformOnUnvisited);
    let start = mdp.start_state();
    println!("estimated behavior at start: {:?}", estimate.smoothed().row(start));

    println!("{}", oracle_report(&env, Some(&ds), UnvisitedFallback::Pessimistic, 30)?);

    let path = std::env::temp_dir().join(format!("inferior-{seed}.jsonl"));
    ds.save(&path)?;
    assert_eq!(Dataset::load(&path)?, ds);
    println!("saved and reloaded {}", path.display());
    Ok(())
}
