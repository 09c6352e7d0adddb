//! CPI against behavior regularization on the 7×7 inferior dataset across
//! temperatures. CPI keeps refining its reference; BR stays anchored to the
//! estimated behavior policy, which wins once τ is large enough.
//!
//! `cargo run --release --example cpi_vs_br`

use cpi_lab::experiment::{build_dataset, DatasetRecipe, Environment};
use cpi_lab::solvers::{run_br, run_cpi, EvalMode, OfflineProblem, SolverConfig};

fn main() -> cpi_lab::Result<()> {
    let env = Environment::load("grid7x7", 0.9)?;
    let ds = build_dataset(&env, &DatasetRecipe::preset("inferior")?, 0)?;
    let problem = OfflineProblem::from_dataset(env.mdp().clone(), ds)?;
    let oracle = problem.in_sample_oracle(30, 1e-10)?;
    println!("in-sample oracle return {}", oracle.greedy_return);
    println!("{:>6} {:>8} {:>8}", "tau", "cpi", "br");
    for tau in [0.05, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0] {
        let config = SolverConfig {
            eval_episodes: 1,
            ..SolverConfig::new(tau, 200, EvalMode::FittedOnEmpiricalMdp)
        };
        let (_, cpi) = run_cpi(&problem, &config)?;
        let (_, br) = run_br(&problem, &config)?;
        println!("{tau:>6} {:>8} {:>8}", cpi.final_return(), br.final_return());
    }
    Ok(())
}
