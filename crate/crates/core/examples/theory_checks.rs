//! Randomized checks of one-step improvement, support preservation, the
//! convergence-rate bound and the softmax closed form.
//!
//! `cargo run --release --example theory_checks`

use cpi_lab::experiment::{run_checks, CheckConfig};

fn main() -> cpi_lab::Result<()> {
    let report = run_checks(&CheckConfig::default(), None)?;
    println!("{report}");

    let broken = CheckConfig {
        flip_kl_sign: true,
        bound_trials: 0,
        softmax_trials: 0,
        ..CheckConfig::default()
    };
    let report = run_checks(&broken, None)?;
    println!("\nwith the KL sign flipped:\n{report}");
    Ok(())
}
