//! Property tests over random MDPs, policies and datasets.

use std::collections::HashMap;

use proptest::prelude::*;

use cpi_lab::data::{
    band_size, collect, empirical_behavior_policy, empirical_mdp, empirical_support,
    missing_action_filter, percentile_filter, Band, Restart, Smoothing,
};
use cpi_lab::dp::{
    exact_policy_evaluation, greedy_policy, in_sample_value_iteration, rollout_return,
    value_iteration, RolloutMode,
};
use cpi_lab::experiment::Environment;
use cpi_lab::solvers::{
    conservative_step, exact_cpi_values, forward_kl_step, mixed_step, run_br, run_cpi, EvalMode,
    OfflineProblem, SolverConfig,
};
use cpi_lab::theory::{random_policy, random_support, RandomMdpSpec};
use cpi_lab::{Policy, QTable, SupportMask, TabularMdp};

const TOL: f64 = 1e-11;

fn random_mdp(max_states: usize, max_actions: usize, gamma: f64, seed: u64) -> TabularMdp {
    RandomMdpSpec::new(max_states, max_actions, gamma, seed).sample(0).unwrap()
}

fn arb_mdp() -> impl Strategy<Value = (TabularMdp, u64)> {
    (2usize..=12, 2usize..=5, 0.5f64..0.95, any::<u64>())
        .prop_map(|(s, a, g, seed)| (random_mdp(s, a, g, seed), seed))
}

fn q_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, u64)> {
    (1usize..=6, 1usize..=5).prop_flat_map(|(n, na)| {
        (
            Just(n),
            Just(na),
            prop::collection::vec(-50.0f64..50.0, n * na),
            any::<u64>(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn evaluation_is_consistent((mdp, seed) in arb_mdp()) {
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), 0.3, seed);
        let (q, v) = exact_policy_evaluation(&mdp, &pi, TOL).unwrap();
        for s in 0..mdp.n_states() {
            let row: f64 = (0..mdp.n_actions()).map(|a| pi.prob(s, a) * q.get(s, a)).sum();
            prop_assert!((row - v.get(s)).abs() <= 1e-10);
        }
    }

    #[test]
    fn optimal_values_dominate((mdp, seed) in arb_mdp()) {
        let (_, v_star, _) = value_iteration(&mdp, TOL).unwrap();
        for k in 0..5 {
            let pi = random_policy(mdp.n_states(), mdp.n_actions(), 0.3, seed.wrapping_add(k));
            let (_, v) = exact_policy_evaluation(&mdp, &pi, TOL).unwrap();
            for s in 0..mdp.n_states() {
                prop_assert!(v_star.get(s) >= v.get(s) - 1e-8);
            }
        }
    }

    #[test]
    fn in_sample_values_are_sandwiched((mdp, seed) in arb_mdp()) {
        let mask = random_support(mdp.n_states(), mdp.n_actions(), seed);
        let behavior = Policy::uniform_on_support(&mask);
        let (_, v_data) = exact_policy_evaluation(&mdp, &behavior, TOL).unwrap();
        let (_, v_in, _) = in_sample_value_iteration(&mdp, &mask, TOL).unwrap();
        let (_, v_star, _) = value_iteration(&mdp, TOL).unwrap();
        for s in 0..mdp.n_states() {
            prop_assert!(v_data.get(s) <= v_in.get(s) + 1e-8);
            prop_assert!(v_in.get(s) <= v_star.get(s) + 1e-8);
        }
    }

    #[test]
    fn greedy_policy_of_q_star_is_optimal((mdp, _seed) in arb_mdp()) {
        let (q, v_star, pi) = value_iteration(&mdp, TOL).unwrap();
        prop_assert_eq!(&greedy_policy(&q, None).unwrap(), &pi);
        let (_, v) = exact_policy_evaluation(&mdp, &pi, TOL).unwrap();
        for s in 0..mdp.n_states() {
            prop_assert!((v.get(s) - v_star.get(s)).abs() <= 1e-8);
        }
    }

    #[test]
    fn deterministic_rollouts_match_dp(seed in any::<u64>(), start in 0usize..48) {
        let env = Environment::load("grid7x7", 0.9).unwrap();
        let mdp = env.mdp();
        let actions: Vec<usize> = (0..mdp.n_states()).map(|s| ((seed >> (s % 60)) & 3) as usize).collect();
        let pi = Policy::deterministic(4, &actions).unwrap();
        let (_, v) = exact_policy_evaluation(mdp, &pi, TOL).unwrap();
        let cap = 400;
        let r = rollout_return(mdp, &pi, start, cap, seed, RolloutMode::Stochastic).unwrap();
        let r_max = 100.0;
        let slack = 0.9f64.powi(cap as i32) * r_max / (1.0 - 0.9);
        prop_assert!((r.discounted - v.get(start)).abs() <= slack + 1e-9);
    }

    #[test]
    fn conservative_step_improves_and_keeps_support((mdp, seed) in arb_mdp(), log_tau in -2.0f64..2.0) {
        let tau = 10f64.powf(log_tau);
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), 0.4, seed);
        let (q, v) = exact_policy_evaluation(&mdp, &pi, TOL).unwrap();
        let next = conservative_step(&q, &pi, tau).unwrap();
        let (_, v_next) = exact_policy_evaluation(&mdp, &next, TOL).unwrap();
        for s in 0..mdp.n_states() {
            prop_assert!(v_next.get(s) >= v.get(s) - 1e-9);
            for a in 0..mdp.n_actions() {
                if pi.prob(s, a) == 0.0 {
                    prop_assert_eq!(next.prob(s, a), 0.0);
                }
            }
        }
    }

    #[test]
    fn exact_cpi_is_monotone((mdp, seed) in arb_mdp(), log_tau in -1.0f64..1.0) {
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), 0.3, seed);
        let values = exact_cpi_values(&mdp, &pi, 10f64.powf(log_tau), 30, TOL).unwrap();
        for pair in values.windows(2) {
            for s in 0..mdp.n_states() {
                prop_assert!(pair[1].get(s) >= pair[0].get(s) - 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_policies_are_fixed_points((mdp, seed) in arb_mdp(), tau in 0.05f64..5.0) {
        let actions: Vec<usize> = (0..mdp.n_states())
            .map(|s| (seed.rotate_left(s as u32) as usize) % mdp.n_actions())
            .collect();
        let pi = Policy::deterministic(mdp.n_actions(), &actions).unwrap();
        let (q, _) = exact_policy_evaluation(&mdp, &pi, TOL).unwrap();
        prop_assert!(conservative_step(&q, &pi, tau).unwrap().max_abs_diff(&pi) <= 1e-12);
        let problem = OfflineProblem::from_behavior(mdp.clone(), pi.clone()).unwrap();
        let config = SolverConfig::new(tau, 10, EvalMode::ExactOnTrueMdp);
        let (last, curve) = run_cpi(&problem, &config).unwrap();
        prop_assert_eq!(&last, &pi);
        let v0 = curve.records[0].policy_value_start;
        prop_assert!(curve.records.iter().all(|r| r.policy_value_start == v0));
    }

    #[test]
    fn all_solver_steps_keep_the_behavior_support((mdp, seed) in arb_mdp(), tau in 0.05f64..5.0) {
        let behavior = random_policy(mdp.n_states(), mdp.n_actions(), 0.5, seed);
        let problem = OfflineProblem::from_behavior(mdp.clone(), behavior.clone()).unwrap();
        let mut config = SolverConfig::new(tau, 15, EvalMode::ExactOnTrueMdp);
        config.eval_episodes = 1;
        let (cpi, _) = run_cpi(&problem, &config).unwrap();
        let (br, _) = run_br(&problem, &config).unwrap();
        config.lambda = 0.5;
        let (mixed, _) = run_cpi(&problem, &config).unwrap();
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                if behavior.prob(s, a) == 0.0 {
                    prop_assert_eq!(cpi.prob(s, a), 0.0);
                    prop_assert_eq!(br.prob(s, a), 0.0);
                    prop_assert_eq!(mixed.prob(s, a), 0.0);
                }
            }
        }
    }

    #[test]
    fn forward_and_reverse_steps_agree((n, na, q, seed) in q_strategy(), log_tau in -2.0f64..2.0) {
        let q = QTable::new(n, na, q, 0.9).unwrap();
        let reference = random_policy(n, na, 0.3, seed);
        let tau = 10f64.powf(log_tau);
        let a = conservative_step(&q, &reference, tau).unwrap();
        let b = forward_kl_step(&q, &reference, tau).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-10);
        for s in 0..n {
            let total: f64 = a.row(s).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn mixed_step_endpoints_collapse((n, na, q, seed) in q_strategy(), log_tau in -2.0f64..2.0) {
        let q = QTable::new(n, na, q, 0.9).unwrap();
        let reference = random_policy(n, na, 0.3, seed);
        let data = random_policy(n, na, 0.3, seed ^ 0x5555);
        let tau = 10f64.powf(log_tau);
        let one = mixed_step(&q, &reference, &data, tau, 1.0).unwrap();
        prop_assert!(one.max_abs_diff(&conservative_step(&q, &reference, tau).unwrap()) <= 1e-12);
        let zero = mixed_step(&q, &reference, &data, tau, 0.0).unwrap();
        prop_assert!(zero.max_abs_diff(&conservative_step(&q, &data, tau).unwrap()) <= 1e-12);
        let half = mixed_step(&q, &reference, &reference, tau, 0.5).unwrap();
        prop_assert!(half.max_abs_diff(&conservative_step(&q, &reference, tau).unwrap()) <= 1e-12);
    }

    #[test]
    fn exact_shifts_leave_the_step_bit_identical(
        (n, na, _q, seed) in q_strategy(),
        ticks in prop::collection::vec(-100_000i64..100_000, 30),
        shifts in prop::collection::vec(-1_000_000i64..1_000_000, 6),
        log_tau in -2.0f64..2.0,
    ) {
        // multiples of 1/1024 plus integers: every sum is exact in f64
        let q: Vec<f64> = (0..n * na).map(|i| ticks[i] as f64 / 1024.0).collect();
        let shifted: Vec<f64> = q.iter().enumerate().map(|(i, v)| v + shifts[i / na] as f64).collect();
        let reference = random_policy(n, na, 0.3, seed);
        let tau = 10f64.powf(log_tau);
        let a = conservative_step(&QTable::new(n, na, q, 0.9).unwrap(), &reference, tau).unwrap();
        let b = conservative_step(&QTable::new(n, na, shifted, 0.9).unwrap(), &reference, tau).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn arbitrary_shifts_change_the_step_by_rounding_only(
        (n, na, q, seed) in q_strategy(),
        shift in -1e3f64..1e3,
        log_tau in -1.0f64..2.0,
    ) {
        let shifted: Vec<f64> = q.iter().map(|v| v + shift).collect();
        let reference = random_policy(n, na, 0.3, seed);
        let tau = 10f64.powf(log_tau);
        let a = conservative_step(&QTable::new(n, na, q, 0.9).unwrap(), &reference, tau).unwrap();
        let b = conservative_step(&QTable::new(n, na, shifted, 0.9).unwrap(), &reference, tau).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-9);
    }

    #[test]
    fn collection_is_reproducible(seed in any::<u64>(), n in 1usize..3000, cap in 1usize..40) {
        let env = Environment::load("grid7x7", 0.9).unwrap();
        let pi = Policy::stationary(50, &[0.1, 0.4, 0.1, 0.4]).unwrap();
        let a = collect(env.mdp(), &pi, n, cap, Restart::RandomRestart, seed).unwrap();
        let b = collect(env.mdp(), &pi, n, cap, Restart::RandomRestart, seed).unwrap();
        prop_assert_eq!(a.transitions(), b.transitions());
        prop_assert_eq!(a.trajectory_starts(), b.trajectory_starts());
        prop_assert_eq!(a.len(), n);
        prop_assert!(a.summaries().iter().all(|t| t.len <= cap));
    }

    #[test]
    fn missing_action_filter_is_sound(seed in any::<u64>(), action in 0usize..4, mask in any::<u64>()) {
        let env = Environment::load("fourroom", 0.9).unwrap();
        let pi = Policy::uniform(env.mdp().n_states(), 4);
        let ds = collect(env.mdp(), &pi, 2_000, 30, Restart::RandomRestart, seed).unwrap();
        let region: Vec<usize> = (0..env.grid.n_cells()).filter(|s| mask >> (s % 64) & 1 == 1).collect();
        let out = missing_action_filter(&ds, &region, action);
        let kept = ds.transitions().iter().filter(|t| !(t.a == action && region.contains(&t.s))).count();
        prop_assert_eq!(out.len(), kept);
        let support = empirical_support(&out, env.mdp().n_states(), 4);
        for &s in &region {
            prop_assert!(!support.allowed(s, action));
        }
        for t in out.transitions() {
            prop_assert!(!(t.a == action && region.contains(&t.s)));
        }
    }

    #[test]
    fn percentile_bands_have_the_advertised_size(seed in any::<u64>(), fraction in 0.01f64..=1.0) {
        let env = Environment::load("grid7x7", 0.9).unwrap();
        let pi = Policy::uniform(50, 4);
        let ds = collect(env.mdp(), &pi, 1_500, 30, Restart::RandomRestart, seed).unwrap();
        let k_total = ds.n_trajectories();
        let k = band_size(fraction, k_total);
        prop_assert_eq!(k, ((fraction * k_total as f64) - 1e-9).ceil().max(1.0) as usize);
        let mut bands = Vec::new();
        for band in Band::ALL {
            let sub = percentile_filter(&ds, band, fraction).unwrap();
            prop_assert_eq!(sub.n_trajectories(), k);
            bands.push(sub);
        }
        if 2 * k <= k_total {
            // top and bottom together never use a trajectory more often than the source has it
            let key = |t: &[cpi_lab::data::Transition]| format!("{t:?}");
            let mut pool: HashMap<String, i64> = HashMap::new();
            for t in ds.trajectories() {
                *pool.entry(key(t)).or_default() += 1;
            }
            for t in bands[0].trajectories().chain(bands[2].trajectories()) {
                let left = pool.entry(key(t)).or_default();
                *left -= 1;
                prop_assert!(*left >= 0);
            }
            let top_min = bands[0].summaries().iter().map(|t| t.undiscounted_return).fold(f64::INFINITY, f64::min);
            let bottom_max = bands[2].summaries().iter().map(|t| t.undiscounted_return).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(top_min >= bottom_max);
        }
    }
}

/// Median over 10 seeds of the max-norm estimation error at each sample size.
#[test]
fn estimators_improve_with_more_data() {
    let rows = vec![
        vec![(0, 0.2), (1, 0.8)],
        vec![(1, 0.5), (2, 0.5)],
        vec![(0, 0.1), (1, 0.3), (2, 0.6)],
        vec![(2, 1.0)],
        vec![(0, 0.7), (2, 0.3)],
        vec![(0, 0.25), (1, 0.25), (2, 0.5)],
    ];
    let mdp = TabularMdp::new(3, 2, rows, vec![0.0; 6], 0.9, vec![false; 3], 0).unwrap();
    let behavior = Policy::new(3, 2, vec![0.3, 0.7, 0.5, 0.5, 0.9, 0.1]).unwrap();
    let median = |mut xs: Vec<f64>| {
        xs.sort_by(f64::total_cmp);
        (xs[4] + xs[5]) / 2.0
    };
    let mut policy_err = Vec::new();
    let mut model_err = Vec::new();
    for n in [1_000, 10_000, 100_000] {
        let mut pe = Vec::new();
        let mut me = Vec::new();
        for seed in 0..10 {
            let ds = collect(&mdp, &behavior, n, 30, Restart::RandomRestart, seed).unwrap();
            let est = empirical_behavior_policy(&ds, 3, 2, Smoothing::None);
            pe.push(est.policy().unwrap().max_abs_diff(&behavior));
            let emp = empirical_mdp(&ds, 3, 2, &mdp, None).unwrap();
            let mut worst: f64 = 0.0;
            for s in 0..3 {
                for a in 0..2 {
                    for t in 0..3 {
                        worst = worst.max((emp.prob(s, a, t) - mdp.prob(s, a, t)).abs());
                    }
                }
            }
            me.push(worst);
        }
        policy_err.push(median(pe));
        model_err.push(median(me));
    }
    assert!(policy_err.windows(2).all(|w| w[1] <= w[0]), "{policy_err:?}");
    assert!(model_err.windows(2).all(|w| w[1] <= w[0]), "{model_err:?}");
}

#[test]
fn curves_have_one_record_per_iteration_plus_one() {
    let mdp = random_mdp(6, 3, 0.9, 4);
    let behavior = random_policy(mdp.n_states(), 3, 0.3, 4);
    let problem = OfflineProblem::from_behavior(mdp, behavior).unwrap();
    for iterations in [0, 1, 7] {
        let config = SolverConfig::new(0.5, iterations, EvalMode::ExactOnTrueMdp);
        assert_eq!(run_cpi(&problem, &config).unwrap().1.records.len(), iterations + 1);
        assert_eq!(run_br(&problem, &config).unwrap().1.records.len(), iterations + 1);
    }
}

#[test]
fn support_masks_from_random_policies_are_nonempty() {
    for seed in 0..50 {
        let mask: SupportMask = random_support(7, 4, seed);
        assert!((0..7).all(|s| !mask.is_unvisited(s)));
    }
}
