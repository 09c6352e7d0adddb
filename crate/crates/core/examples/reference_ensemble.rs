//! Plain CPI against the two-member reference ensemble when every policy
//! evaluation runs on a bootstrap resample of the data.
//!
//! `cargo run --release --example reference_ensemble`

use cpi_lab::experiment::{build_dataset, mean_std, DatasetRecipe, Environment};
use cpi_lab::solvers::{run_cpi, run_cpi_re, EvalMode, EvalNoise, OfflineProblem, SolverConfig};

fn main() -> cpi_lab::Result<()> {
    let env = Environment::load("grid7x7", 0.9)?;
    let ds = build_dataset(&env, &DatasetRecipe::preset("inferior")?, 1)?;
    let problem = OfflineProblem::from_dataset(env.mdp().clone(), ds)?;
    println!("in-sample oracle {}", problem.in_sample_oracle(30, 1e-10)?.greedy_return);
    let (mut plain, mut ensemble) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let config = SolverConfig {
            noise: EvalNoise::Bootstrap,
            rng_seed: seed,
            eval_episodes: 1,
            ..SolverConfig::new(1.0, 200, EvalMode::FittedOnEmpiricalMdp)
        };
        plain.push(run_cpi(&problem, &config)?.1.final_return());
        ensemble.push(run_cpi_re(&problem, &config)?.1.final_return());
    }
    println!("cpi    {plain:?} mean/std {:?}", mean_std(&plain));
    println!("cpi-re {ensemble:?} mean/std {:?}", mean_std(&ensemble));
    Ok(())
}
