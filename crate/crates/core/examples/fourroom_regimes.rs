//! CPI on the FourRoom Expert, Random and Missing-Action datasets. On
//! Missing-Action the learned policy must never move down in the
//! upper-left room, since the data never shows that move.
//!
//! `cargo run --release --example fourroom_regimes`

use cpi_lab::envs::Action;
use cpi_lab::experiment::{build_dataset, DatasetRecipe, Environment};
use cpi_lab::solvers::{run_cpi, EvalMode, OfflineProblem, SolverConfig};

fn main() -> cpi_lab::Result<()> {
    let env = Environment::load("fourroom", 0.9)?;
    let upper_left = env.rooms.as_ref().expect("fourroom has rooms").upper_left.clone();
    for preset in ["expert", "random", "missing-action"] {
        let ds = build_dataset(&env, &DatasetRecipe::preset(preset)?, 0)?;
        let problem = OfflineProblem::from_dataset(env.mdp().clone(), ds)?;
        let oracle = problem.in_sample_oracle(30, 1e-10)?;
        let config = SolverConfig {
            eval_episodes: 1,
            ..SolverConfig::new(1.0, 300, EvalMode::FittedOnEmpiricalMdp)
        };
        let (policy, curve) = run_cpi(&problem, &config)?;
        let down_mass: f64 = upper_left
            .states()
            .iter()
            .map(|&s| policy.prob(s, Action::Down.index()))
            .sum();
        println!(
            "{preset:<15} oracle {:>5} cpi {:>5}  down mass in upper-left {down_mass:e}",
            oracle.greedy_return,
            curve.final_return()
        );
    }
    Ok(())
}
