//! Small end-to-end cases with known answers.

use cpi_lab::data::{
    bootstrap_resample, collect, empirical_mdp, empirical_support, make_behavior_policy,
    missing_action_filter, percentile_filter, Band, BehaviorKind, Restart,
};
use cpi_lab::dp::{
    exact_policy_evaluation, in_sample_value_iteration, rollout_return, value_iteration,
    RolloutMode,
};
use cpi_lab::envs::{doorways, Action};
use cpi_lab::experiment::{build_dataset, DatasetRecipe, DatasetStats, Environment};
use cpi_lab::solvers::{
    fitted_q_evaluation, run_br, run_cpi, run_cpi_re, run_reference_ensemble, EnsembleInit,
    EvalMode, OfflineProblem, SolverConfig,
};
use cpi_lab::{Policy, SupportMask, TabularMdp};

const TOL: f64 = 1e-10;

fn grid7() -> Environment {
    Environment::load("grid7x7", 0.9).unwrap()
}

fn fourroom() -> Environment {
    Environment::load("fourroom", 0.9).unwrap()
}

fn inferior_problem(seed: u64) -> OfflineProblem {
    let env = grid7();
    let ds = build_dataset(&env, &DatasetRecipe::preset("inferior").unwrap(), seed).unwrap();
    OfflineProblem::from_dataset(env.mdp().clone(), ds).unwrap()
}

#[test]
fn behavior_constructors() {
    let env = grid7();
    let inferior = make_behavior_policy(&BehaviorKind::Inferior, env.mdp()).unwrap();
    let uniform = make_behavior_policy(&BehaviorKind::Uniform, env.mdp()).unwrap();
    for s in 0..env.mdp().n_states() {
        assert_eq!(inferior.row(s), &[0.1, 0.4, 0.1, 0.4]);
        assert_eq!(uniform.row(s), &[0.25; 4]);
    }
    let expert = make_behavior_policy(&BehaviorKind::Expert, env.mdp()).unwrap();
    assert!(expert.is_deterministic());
    let r = rollout_return(env.mdp(), &expert, env.mdp().start_state(), 30, 0, RolloutMode::Greedy)
        .unwrap();
    assert_eq!(r.undiscounted, 89.0);
    let bad = BehaviorKind::Custom(vec![0.5, 0.6, 0.0, 0.0]);
    assert!(make_behavior_policy(&bad, env.mdp()).is_err());
}

#[test]
fn collection_sizes() {
    let env = grid7();
    let inferior = make_behavior_policy(&BehaviorKind::Inferior, env.mdp()).unwrap();
    let ds = collect(env.mdp(), &inferior, 10_000, 30, Restart::FixedStart, 0).unwrap();
    assert_eq!(ds.len(), 10_000);
    assert!(ds.summaries().iter().all(|t| t.len <= 30));
    let one = collect(env.mdp(), &inferior, 1, 30, Restart::RandomRestart, 3).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one.trajectory_starts(), &[0]);
    for t in ds.transitions() {
        assert_eq!(t.done, env.mdp().is_terminal(t.s_next));
    }
}

#[test]
fn random_restart_never_starts_on_goal_or_terminal() {
    let env = grid7();
    let ds = collect(env.mdp(), &Policy::uniform(50, 4), 5_000, 30, Restart::RandomRestart, 1)
        .unwrap();
    for &i in ds.trajectory_starts() {
        let s = ds.transitions()[i].s;
        assert_ne!(s, env.grid.goal_state());
        assert_ne!(s, env.grid.terminal_state());
    }
}

#[test]
fn empirical_mdp_recovers_deterministic_dynamics() {
    let env = grid7();
    let ds = collect(env.mdp(), &Policy::uniform(50, 4), 20_000, 30, Restart::RandomRestart, 2)
        .unwrap();
    let mdp = env.mdp();
    let mask = empirical_support(&ds, mdp.n_states(), 4);
    let goal = env.grid.goal_state();
    for s in (0..env.grid.n_cells()).filter(|&s| s != goal) {
        assert!(mask.row(s).iter().all(|&b| b), "state {s} not fully covered");
    }
    let emp = empirical_mdp(&ds, mdp.n_states(), 4, mdp, None).unwrap();
    for s in (0..mdp.n_states()).filter(|&s| s != goal) {
        for a in 0..4 {
            assert_eq!(emp.next(s, a), mdp.next(s, a));
            assert_eq!(emp.reward(s, a), mdp.reward(s, a));
        }
    }
}

#[test]
fn unobserved_pairs_are_pessimistic() {
    let env = grid7();
    let problem = inferior_problem(0);
    let emp = problem.empirical().unwrap();
    let (r_min, _) = env.mdp().reward_range();
    let (q, v) = exact_policy_evaluation(emp, problem.behavior(), TOL).unwrap();
    let holes: Vec<(usize, usize)> = (0..env.grid.n_cells())
        .flat_map(|s| (0..4).map(move |a| (s, a)))
        .filter(|&(s, a)| !problem.support().allowed(s, a))
        .collect();
    assert!(!holes.is_empty(), "dataset covered every pair; pick a sparser one");
    for &(s, a) in &holes {
        assert_eq!(emp.next(s, a), &[(s, 1.0)]);
        assert_eq!(emp.reward(s, a), r_min);
        assert!((q.get(s, a) - (r_min + 0.9 * v.get(s))).abs() < 1e-8);
    }
    // a policy that stays on the unobserved action loops forever at r_min
    let mut actions = vec![0; 50];
    for &(s, a) in &holes {
        actions[s] = a;
    }
    let stay = Policy::deterministic(4, &actions).unwrap();
    let q = fitted_q_evaluation(emp, &stay, TOL).unwrap();
    for &(s, _) in &holes {
        assert!((q.get(s, actions[s]) - r_min / (1.0 - 0.9)).abs() < 1e-8);
    }
}

#[test]
fn fitted_evaluation_on_the_true_model_is_exact() {
    let env = grid7();
    let pi = Policy::uniform(50, 4);
    let q = fitted_q_evaluation(env.mdp(), &pi, TOL).unwrap();
    let (q_exact, _) = exact_policy_evaluation(env.mdp(), &pi, TOL).unwrap();
    assert_eq!(q.as_slice(), q_exact.as_slice());
}

#[test]
fn bootstrap_evaluation_is_a_bounded_perturbation() {
    let env = grid7();
    let problem = inferior_problem(0);
    let ds = problem.dataset().unwrap();
    let (lo, hi) = env.mdp().reward_range();
    let span = (hi - lo) / (1.0 - 0.9);
    let base = fitted_q_evaluation(problem.empirical().unwrap(), problem.behavior(), TOL).unwrap();
    let mut differs = false;
    for seed in 0..5 {
        let resampled = bootstrap_resample(ds, seed);
        assert_eq!(resampled.len(), ds.len());
        let emp = empirical_mdp(&resampled, 50, 4, env.mdp(), None).unwrap();
        let q = fitted_q_evaluation(&emp, problem.behavior(), TOL).unwrap();
        for (a, b) in q.as_slice().iter().zip(base.as_slice()) {
            assert!((a - b).abs() <= span);
            differs |= a != b;
        }
    }
    assert!(differs);
}

#[test]
fn full_support_in_sample_equals_value_iteration() {
    let env = fourroom();
    let full = SupportMask::full(env.mdp().n_states(), 4);
    let (q1, v1, p1) = value_iteration(env.mdp(), TOL).unwrap();
    let (q2, v2, p2) = in_sample_value_iteration(env.mdp(), &full, TOL).unwrap();
    assert_eq!(q1.as_slice(), q2.as_slice());
    assert_eq!(v1.as_slice(), v2.as_slice());
    assert_eq!(p1, p2);
}

#[test]
fn inferior_support_reaches_the_full_oracle() {
    let env = grid7();
    let problem = inferior_problem(0);
    let (_, _, pi_star) = value_iteration(env.mdp(), TOL).unwrap();
    let full = rollout_return(env.mdp(), &pi_star, env.mdp().start_state(), 30, 0, RolloutMode::Greedy)
        .unwrap()
        .undiscounted;
    assert_eq!(problem.in_sample_oracle(30, TOL).unwrap().greedy_return, full);
}

#[test]
fn missing_action_on_fourroom() {
    let env = fourroom();
    let rooms = env.rooms.as_ref().unwrap();
    let room = rooms.by_name("upper-left").unwrap().states().to_vec();
    let down = Action::Down.index();
    let random = build_dataset(&env, &DatasetRecipe::preset("random").unwrap(), 0).unwrap();
    let filtered = missing_action_filter(&random, &room, down);
    assert!(filtered.len() < random.len());
    assert!(filtered.transitions().iter().all(|t| !(room.contains(&t.s) && t.a == down)));
    let mask = empirical_support(&filtered, env.mdp().n_states(), 4);
    for &s in &room {
        assert!(!mask.allowed(s, down));
    }

    let preset = build_dataset(&env, &DatasetRecipe::preset("missing-action").unwrap(), 0).unwrap();
    let problem = OfflineProblem::from_dataset(env.mdp().clone(), preset).unwrap();
    let oracle = problem.in_sample_oracle(30, TOL).unwrap();
    for &s in &room {
        assert_eq!(oracle.policy.prob(s, down), 0.0);
    }
    let r = rollout_return(env.mdp(), &oracle.policy, env.mdp().start_state(), 30, 0, RolloutMode::Greedy)
        .unwrap();
    assert_eq!(r.undiscounted, oracle.greedy_return);
}

#[test]
fn missing_action_edge_regions() {
    let env = grid7();
    let ds = build_dataset(&env, &DatasetRecipe::preset("inferior").unwrap(), 0).unwrap();
    let unchanged = missing_action_filter(&ds, &[], Action::Down.index());
    assert_eq!(unchanged.transitions(), ds.transitions());
    assert_eq!(unchanged.trajectory_starts(), ds.trajectory_starts());
    let all: Vec<usize> = (0..env.mdp().n_states()).collect();
    let none = missing_action_filter(&ds, &all, Action::Down.index());
    assert!(none.transitions().iter().all(|t| t.a != Action::Down.index()));
}

#[test]
fn rooms_partition_the_open_cells() {
    let env = fourroom();
    let rooms = env.rooms.as_ref().unwrap();
    let spec = env.grid.spec();
    let doors = doorways(spec);
    let mut owner = vec![0; env.grid.n_cells()];
    for room in rooms.all() {
        assert!(!room.is_empty());
        for &s in room.states() {
            owner[s] += 1;
        }
    }
    for s in 0..env.grid.n_cells() {
        let cell = env.grid.cell(s).unwrap();
        let expected = usize::from(!doors.contains(&cell));
        assert_eq!(owner[s], expected, "cell {cell:?}");
    }
}

#[test]
fn top_band_beats_the_dataset_mean() {
    let env = grid7();
    let ds = build_dataset(&env, &DatasetRecipe::preset("expert-inferior").unwrap(), 0).unwrap();
    let mean = DatasetStats::of(&ds).return_mean;
    let top = percentile_filter(&ds, Band::Top, 0.05).unwrap();
    assert!(DatasetStats::of(&top).return_mean >= mean);
    let bottom = percentile_filter(&ds, Band::Bottom, 0.05).unwrap();
    assert!(DatasetStats::of(&bottom).return_mean <= mean);
}

#[test]
fn rollouts_count_goal_and_cap() {
    let env = grid7();
    let spec = env.grid.spec();
    // the cell left of the goal moving right enters it at once
    let next_to_goal = env.grid.state([spec.goal[0], spec.goal[1] - 1]).unwrap();
    let right = Policy::stationary(50, &[0.0, 0.0, 1.0, 0.0]).unwrap();
    let r = rollout_return(env.mdp(), &right, next_to_goal, 30, 0, RolloutMode::Greedy).unwrap();
    assert_eq!((r.undiscounted, r.steps), (100.0, 1));
    let down = Policy::stationary(50, &[0.0, 1.0, 0.0, 0.0]).unwrap();
    let r = rollout_return(env.mdp(), &down, env.mdp().start_state(), 17, 0, RolloutMode::Greedy)
        .unwrap();
    assert_eq!((r.undiscounted, r.steps), (-17.0, 17));
}

#[test]
fn cpi_converges_on_the_inferior_dataset() {
    let problem = inferior_problem(0);
    let oracle = problem.in_sample_oracle(30, TOL).unwrap();
    let config = SolverConfig::new(1.0, 200, EvalMode::FittedOnEmpiricalMdp);
    let (_, curve) = run_cpi(&problem, &config).unwrap();
    assert_eq!(curve.records.len(), 201);
    assert_eq!(curve.final_return(), oracle.greedy_return);
}

#[test]
fn zero_iterations_return_the_behavior_estimate() {
    let problem = inferior_problem(1);
    let config = SolverConfig::new(0.5, 0, EvalMode::FittedOnEmpiricalMdp);
    let (cpi, cpi_curve) = run_cpi(&problem, &config).unwrap();
    let (br, br_curve) = run_br(&problem, &config).unwrap();
    assert_eq!(&cpi, problem.behavior());
    assert_eq!(&br, problem.behavior());
    assert_eq!(cpi_curve.records.len(), 1);
    assert_eq!(br_curve.records.len(), 1);
    // the ensemble reports the per-state better of π̂_D and uniform-on-support
    let (_, re_curve) = run_cpi_re(&problem, &config).unwrap();
    assert_eq!(re_curve.records.len(), 1);
}

#[test]
fn single_state_curve_is_flat() {
    let mdp = TabularMdp::new(1, 2, vec![vec![(0, 1.0)]; 2], vec![1.0, 0.5], 0.9, vec![false], 0)
        .unwrap();
    let problem = OfflineProblem::from_behavior(mdp, Policy::uniform(1, 2)).unwrap();
    let config = SolverConfig::new(1.0, 25, EvalMode::ExactOnTrueMdp);
    let (_, curve) = run_cpi(&problem, &config).unwrap();
    let first = curve.records[0].return_undiscounted;
    assert!(curve.records.iter().all(|r| r.return_undiscounted == first));
}

#[test]
fn strong_behavior_constraint_keeps_the_behavior_ranking() {
    let problem = inferior_problem(0);
    let config = SolverConfig::new(1e9, 50, EvalMode::FittedOnEmpiricalMdp);
    let (pi, _) = run_br(&problem, &config).unwrap();
    let behavior = problem.behavior();
    for s in 0..behavior.n_states() {
        assert_eq!(pi.greedy_action(s), behavior.greedy_action(s), "state {s}");
    }
}

#[test]
fn behavior_regularization_is_deterministic() {
    let problem = inferior_problem(2);
    let config = SolverConfig::new(0.5, 40, EvalMode::FittedOnEmpiricalMdp);
    let (a, ca) = run_br(&problem, &config).unwrap();
    let (b, cb) = run_br(&problem, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca.to_csv(), cb.to_csv());
}

#[test]
fn identical_ensemble_members_reduce_to_cpi() {
    let problem = inferior_problem(0);
    let config = SolverConfig::new(0.5, 60, EvalMode::FittedOnEmpiricalMdp);
    let init = EnsembleInit {
        first: problem.behavior().clone(),
        second: problem.behavior().clone(),
        freeze_second: false,
    };
    let (pi_re, curve_re) = run_reference_ensemble(&problem, &config, init).unwrap();
    let (pi, curve) = run_cpi(&problem, &config).unwrap();
    assert_eq!(pi_re, pi);
    assert_eq!(curve_re.to_csv(), curve.to_csv());
}

#[test]
fn frozen_worse_member_is_never_selected() {
    let problem = inferior_problem(0);
    let emp = problem.empirical().unwrap();
    let (q, _) = exact_policy_evaluation(emp, problem.behavior(), TOL).unwrap();
    // anti-greedy over the support: V of this policy is at most V of π̂_D
    let worst: Vec<usize> = (0..q.n_states())
        .map(|s| {
            (0..4)
                .filter(|&a| problem.behavior().prob(s, a) > 0.0)
                .min_by(|&a, &b| q.get(s, a).total_cmp(&q.get(s, b)))
                .unwrap_or(0)
        })
        .collect();
    let init = EnsembleInit {
        first: problem.behavior().clone(),
        second: Policy::deterministic(4, &worst).unwrap(),
        freeze_second: true,
    };
    let config = SolverConfig::new(1.0, 60, EvalMode::FittedOnEmpiricalMdp);
    let (pi_re, curve_re) = run_reference_ensemble(&problem, &config, init).unwrap();
    let (pi, curve) = run_cpi(&problem, &config).unwrap();
    assert_eq!(curve_re.to_csv(), curve.to_csv());
    assert!(pi_re.max_abs_diff(&pi) < 1e-12);
}
