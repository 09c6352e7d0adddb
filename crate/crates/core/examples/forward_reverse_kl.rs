//! The reverse-KL conservative step, its forward-KL (weighted likelihood)
//! counterpart and the mixed step agree on a random tabular problem.
//!
//! `cargo run --example forward_reverse_kl`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cpi_lab::solvers::{conservative_step, forward_kl_step, mixed_step};
use cpi_lab::{Policy, QTable};

fn main() -> cpi_lab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, na) = (6, 4);
    let q = QTable::new(n, na, (0..n * na).map(|_| rng.gen_range(-10.0..10.0)).collect(), 0.9)?;
    let mut probs: Vec<f64> = (0..n * na).map(|_| rng.gen::<f64>()).collect();
    probs[1] = 0.0;
    for row in probs.chunks_mut(na) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
    }
    let reference = Policy::new(n, na, probs)?;
    let data = Policy::uniform(n, na);

    for tau in [0.1, 1.0, 10.0] {
        let reverse = conservative_step(&q, &reference, tau)?;
        let forward = forward_kl_step(&q, &reference, tau)?;
        let mixed_one = mixed_step(&q, &reference, &data, tau, 1.0)?;
        let mixed_half = mixed_step(&q, &reference, &data, tau, 0.5)?;
        println!(
            "tau {tau:>4}: |forward - reverse| = {:.1e}, |mixed(1) - reverse| = {:.1e}, |mixed(0.5) - reverse| = {:.3}",
            forward.max_abs_diff(&reverse),
            mixed_one.max_abs_diff(&reverse),
            mixed_half.max_abs_diff(&reverse)
        );
        assert_eq!(reverse.prob(0, 1), 0.0);
    }
    Ok(())
}
