//! Randomized checks of the guarantees behind the conservative update.
//!
//! Three families of checks run on random MDPs with rewards in `[0, 1]`:
//!
//! * [`check_improvement_and_support`]: one conservative step from an
//!   arbitrary reference never lowers any state value and never puts mass
//!   on an action the reference excludes.
//! * [`check_theorem1`]: exact CPI from the uniform-on-support policy
//!   closes the gap to the in-sample optimum at rate
//!   `(1/(1−γ)²)·√(2 ln|A| / t)` when `τ` follows [`theorem1_tau`].
//! * [`check_softmax_optimality`]: the softmax attains
//!   `τ·log Σ exp(q/τ)` and no other distribution beats it.
//!
//! Trials are independent and run on the rayon pool; each derives its own
//! seed, so reports do not depend on the thread count.

use std::fmt;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{exact_policy_evaluation, in_sample_value_iteration};
use crate::seed::derive_seed;
use crate::solvers::{conservative_step, exact_cpi_values};
use crate::{Error, Policy, QTable, Result, SupportMask, TabularMdp};

/// Tolerance for value comparisons in every check.
pub const SLACK: f64 = 1e-9;

/// Residual tolerance of the policy evaluations inside the checks.
const EVAL_TOL: f64 = 1e-12;

const STREAM_TRIAL: u64 = 0x5452;
const STREAM_POLICY: u64 = 0x504f;
const STREAM_SUPPORT: u64 = 0x5355;
const STREAM_SOFTMAX: u64 = 0x534d;

/// Family of random MDPs.
///
/// Trial `k` draws `|S|` uniformly from `2..=max_states` and `|A|` from
/// `2..=max_actions`. Each `(s, a)` row spreads random weights over
/// `min(branching, |S|)` distinct next states. Rewards are uniform in
/// `[0, 1]` and no state is terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomMdpSpec {
    pub max_states: usize,
    pub max_actions: usize,
    pub branching: usize,
    pub discount: f64,
    pub seed: u64,
}

impl RandomMdpSpec {
    pub fn new(max_states: usize, max_actions: usize, discount: f64, seed: u64) -> Self {
        Self {
            max_states,
            max_actions,
            branching: 3,
            discount,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_states < 2 || self.max_actions < 2 {
            return Err(Error::invalid("random MDPs need at least 2 states and 2 actions"));
        }
        if self.branching == 0 {
            return Err(Error::invalid("branching must be positive"));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::invalid(format!("discount {} outside [0, 1)", self.discount)));
        }
        Ok(())
    }

    /// Seed of trial `k`; everything random in the trial derives from it.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, STREAM_TRIAL, trial as u64)
    }

    /// The MDP of trial `k`.
    pub fn sample(&self, trial: usize) -> Result<TabularMdp> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.trial_seed(trial));
        let n = rng.gen_range(2..=self.max_states);
        let na = rng.gen_range(2..=self.max_actions);
        let states: Vec<usize> = (0..n).collect();
        let mut transitions = Vec::with_capacity(n * na);
        let mut reward = Vec::with_capacity(n * na);
        for _ in 0..n * na {
            let targets: Vec<usize> = states
                .choose_multiple(&mut rng, self.branching.min(n))
                .copied()
                .collect();
            let weights: Vec<f64> = targets.iter().map(|_| rng.gen::<f64>() + 1e-3).collect();
            let total: f64 = weights.iter().sum();
            transitions.push(targets.into_iter().zip(weights.iter().map(|w| w / total)).collect());
            reward.push(rng.gen::<f64>());
        }
        TabularMdp::new(n, na, transitions, reward, self.discount, vec![false; n], 0)
    }
}

/// Random policy where each action is dropped with probability
/// `zero_prob`; at least one action per state keeps mass.
pub fn random_policy(n_states: usize, n_actions: usize, zero_prob: f64, seed: u64) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        let keep = rng.gen_range(0..n_actions);
        let mut row: Vec<f64> = (0..n_actions)
            .map(|a| {
                if a != keep && rng.gen_bool(zero_prob) {
                    0.0
                } else {
                    rng.gen::<f64>() + 1e-3
                }
            })
            .collect();
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
        probs.extend(row);
    }
    Policy::new(n_states, n_actions, probs).expect("rows are normalized")
}

/// Affine map of non-terminal rewards onto `[0, 1]`.
///
/// Greedy behavior is unchanged by the map, but the bound is stated for
/// this range. A constant-reward MDP maps to all zeros.
pub fn normalize_rewards(mdp: &TabularMdp) -> TabularMdp {
    let (lo, hi) = mdp.reward_range();
    let span = hi - lo;
    if span <= 0.0 {
        return mdp.map_rewards(|_| 0.0);
    }
    mdp.map_rewards(|r| ((r - lo) / span).clamp(0.0, 1.0))
}

/// Kind of a failed improvement check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    /// `V^{π'}(s) < V^{π̄}(s) − SLACK`.
    Improvement,
    /// `π'(a|s) > 0` where `π̄(a|s) = 0`.
    Support,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub trial: usize,
    pub seed: u64,
    pub tau: f64,
    pub kind: ViolationKind,
    pub state: usize,
    /// Value drop for improvement failures, leaked mass for support ones.
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTrial {
    pub trial: usize,
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub tau: f64,
    /// `min_s V^{π'}(s) − V^{π̄}(s)`.
    pub min_gain: f64,
    pub zero_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub spec: RandomMdpSpec,
    pub tau_grid: Vec<f64>,
    pub trials: Vec<ImprovementTrial>,
    pub violations: Vec<Violation>,
}

impl ImprovementReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

impl fmt::Display for ImprovementReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let worst = self.trials.iter().map(|t| t.min_gain).fold(f64::INFINITY, f64::min);
        writeln!(
            f,
            "improvement/support: {} trials, tau grid {:?}, worst min gain {:.3e}",
            self.trials.len(),
            self.tau_grid,
            worst
        )?;
        write!(
            f,
            "  improvement violations {}, support violations {} -> {}",
            self.count(ViolationKind::Improvement),
            self.count(ViolationKind::Support),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Policy update under test: `(Q^{π̄}, π̄, τ) -> π'`.
pub type StepFn = dyn Fn(&QTable, &Policy, f64) -> Result<Policy> + Sync;

/// Applies [`conservative_step`] to exact `Q^{π̄}` for random MDPs and
/// reference policies with random zero entries, once per `(trial, τ)`.
pub fn check_improvement_and_support(
    spec: &RandomMdpSpec,
    n_trials: usize,
    tau_grid: &[f64],
) -> Result<ImprovementReport> {
    check_improvement_with(spec, n_trials, tau_grid, &conservative_step)
}

/// [`check_improvement_and_support`] with a substitute update, so the
/// check itself can be shown to catch a broken step.
pub fn check_improvement_with(
    spec: &RandomMdpSpec,
    n_trials: usize,
    tau_grid: &[f64],
    step: &StepFn,
) -> Result<ImprovementReport> {
    spec.validate()?;
    check_tau_grid(tau_grid)?;
    let outcomes: Vec<(Vec<ImprovementTrial>, Vec<Violation>)> = (0..n_trials)
        .into_par_iter()
        .map(|trial| improvement_trial(spec, trial, tau_grid, step))
        .collect::<Result<_>>()?;
    let mut trials = Vec::new();
    let mut violations = Vec::new();
    for (t, v) in outcomes {
        trials.extend(t);
        violations.extend(v);
    }
    Ok(ImprovementReport {
        spec: spec.clone(),
        tau_grid: tau_grid.to_vec(),
        trials,
        violations,
    })
}

fn check_tau_grid(tau_grid: &[f64]) -> Result<()> {
    if tau_grid.is_empty() {
        return Err(Error::invalid("tau grid is empty"));
    }
    if let Some(t) = tau_grid.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::invalid(format!("tau must be positive and finite, got {t}")));
    }
    Ok(())
}

fn improvement_trial(
    spec: &RandomMdpSpec,
    trial: usize,
    tau_grid: &[f64],
    step: &StepFn,
) -> Result<(Vec<ImprovementTrial>, Vec<Violation>)> {
    let seed = spec.trial_seed(trial);
    let mdp = spec.sample(trial)?;
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let reference = random_policy(n, na, 0.3, derive_seed(seed, STREAM_POLICY, 0));
    let zero_entries = reference.as_slice().iter().filter(|p| **p == 0.0).count();
    let (q, v) = exact_policy_evaluation(&mdp, &reference, EVAL_TOL)?;
    let mut trials = Vec::with_capacity(tau_grid.len());
    let mut violations = Vec::new();
    for &tau in tau_grid {
        let next = step(&q, &reference, tau)?;
        let (_, v_next) = exact_policy_evaluation(&mdp, &next, EVAL_TOL)?;
        let mut min_gain = f64::INFINITY;
        for s in 0..n {
            let gain = v_next.get(s) - v.get(s);
            min_gain = min_gain.min(gain);
            if gain < -SLACK {
                violations.push(Violation {
                    trial,
                    seed,
                    tau,
                    kind: ViolationKind::Improvement,
                    state: s,
                    amount: -gain,
                });
            }
            let leaked: f64 = (0..na)
                .filter(|&a| reference.prob(s, a) == 0.0)
                .map(|a| next.prob(s, a))
                .sum();
            if leaked != 0.0 {
                violations.push(Violation {
                    trial,
                    seed,
                    tau,
                    kind: ViolationKind::Support,
                    state: s,
                    amount: leaked,
                });
            }
        }
        trials.push(ImprovementTrial {
            trial,
            seed,
            n_states: n,
            n_actions: na,
            tau,
            min_gain,
            zero_entries,
        });
    }
    Ok((trials, violations))
}

/// `(1/(1−γ)) · √(T / (2 ln|A|))`, the fixed temperature for horizon `T`.
pub fn theorem1_tau(discount: f64, horizon: usize, n_actions: usize) -> f64 {
    let log_a = (n_actions as f64).ln();
    if log_a <= 0.0 {
        return f64::INFINITY;
    }
    (horizon as f64 / (2.0 * log_a)).sqrt() / (1.0 - discount)
}

/// `(1/(1−γ)²) · √(2 ln|A| / t)`.
pub fn theorem1_bound(discount: f64, n_actions: usize, t: usize) -> f64 {
    let log_a = (n_actions as f64).ln().max(0.0);
    (2.0 * log_a / t as f64).sqrt() / ((1.0 - discount) * (1.0 - discount))
}

/// Which actions the data covers in a bound check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundSupport {
    Full,
    /// Each action dropped with probability one half, one kept per state.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub t: usize,
    /// `max_s V*_{π_D}(s) − V^{π_t}(s)`.
    pub gap: f64,
    pub bound: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub trial: Option<usize>,
    pub seed: Option<u64>,
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub horizon: usize,
    pub tau: f64,
    pub support: BoundSupport,
    /// `τ` is fixed for the run, so only `t ≤ horizon` is checked.
    pub note: String,
    pub records: Vec<BoundRecord>,
    pub satisfied: bool,
}

impl BoundReport {
    pub fn worst_slack(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.bound - r.gap)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn final_gap(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.gap)
    }
}

/// Runs exact CPI for `horizon` steps from the uniform policy on `support`
/// and records the gap to the in-sample optimum at every `t ≥ 1`.
pub fn bound_report(
    mdp: &TabularMdp,
    support: &SupportMask,
    horizon: usize,
    support_kind: BoundSupport,
) -> Result<BoundReport> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be positive"));
    }
    let (lo, hi) = mdp.reward_range();
    if lo < 0.0 || hi > 1.0 {
        return Err(Error::invalid(format!(
            "bound check needs rewards in [0, 1], got [{lo}, {hi}]; see normalize_rewards"
        )));
    }
    if !support.unvisited_states().iter().all(|&s| mdp.is_terminal(s)) {
        return Err(Error::invalid("every non-terminal state needs an allowed action"));
    }
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.discount();
    let tau = theorem1_tau(gamma, horizon, na);
    let (_, v_star, _) = in_sample_value_iteration(mdp, support, EVAL_TOL)?;
    let init = Policy::uniform_on_support(support);
    let values = exact_cpi_values(mdp, &init, tau, horizon, EVAL_TOL)?;
    let records: Vec<BoundRecord> = (1..=horizon)
        .map(|t| {
            let gap = (0..n)
                .filter(|&s| !mdp.is_terminal(s))
                .map(|s| v_star.get(s) - values[t].get(s))
                .fold(0.0, f64::max);
            let bound = theorem1_bound(gamma, na, t);
            BoundRecord {
                t,
                gap,
                bound,
                satisfied: gap <= bound + SLACK,
            }
        })
        .collect();
    Ok(BoundReport {
        trial: None,
        seed: None,
        n_states: n,
        n_actions: na,
        discount: gamma,
        horizon,
        tau,
        support: support_kind,
        note: format!(
            "tau = (1/(1-gamma))*sqrt(T/(2 ln|A|)) = {tau:.6} fixed for T = {horizon}; checked for 1 <= t <= T"
        ),
        satisfied: records.iter().all(|r| r.satisfied),
        records,
    })
}

/// Random support for trial `k`: each action kept with probability one
/// half, at least one per state.
pub fn random_support(n_states: usize, n_actions: usize, seed: u64) -> SupportMask {
    let policy = random_policy(n_states, n_actions, 0.5, seed);
    SupportMask::of_policy(&policy)
}

/// [`bound_report`] on trial `k` of `spec`.
pub fn check_theorem1(
    spec: &RandomMdpSpec,
    trial: usize,
    horizon: usize,
    support_kind: BoundSupport,
) -> Result<BoundReport> {
    let mdp = spec.sample(trial)?;
    let seed = spec.trial_seed(trial);
    let support = match support_kind {
        BoundSupport::Full => SupportMask::full(mdp.n_states(), mdp.n_actions()),
        BoundSupport::Random => random_support(
            mdp.n_states(),
            mdp.n_actions(),
            derive_seed(seed, STREAM_SUPPORT, 0),
        ),
    };
    let mut report = bound_report(&mdp, &support, horizon, support_kind)?;
    report.trial = Some(trial);
    report.seed = Some(seed);
    Ok(report)
}

/// [`check_theorem1`] for trials `0..n_trials`.
pub fn check_theorem1_suite(
    spec: &RandomMdpSpec,
    n_trials: usize,
    horizon: usize,
    support_kind: BoundSupport,
) -> Result<Vec<BoundReport>> {
    (0..n_trials)
        .into_par_iter()
        .map(|k| check_theorem1(spec, k, horizon, support_kind))
        .collect()
}

/// `τ · log Σ_a exp(q_a / τ)`.
pub fn soft_max_value(q: &[f64], tau: f64) -> f64 {
    let top = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top + tau * q.iter().map(|&x| ((x - top) / tau).exp()).sum::<f64>().ln()
}

/// `f_τ(q)`: the softmax of `q / τ`.
pub fn softmax(q: &[f64], tau: f64) -> Vec<f64> {
    let top = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = q.iter().map(|&x| ((x - top) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// `Σ p·q + τ·H(p)` with `0 · ln 0 = 0`.
pub fn entropy_objective(p: &[f64], q: &[f64], tau: f64) -> f64 {
    let value: f64 = p.iter().zip(q).map(|(p, q)| p * q).sum();
    let entropy: f64 = p.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    value + tau * entropy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxTrial {
    pub trial: usize,
    pub tau: f64,
    /// `|objective(f_τ(q)) − F_τ(q)|`.
    pub closed_form_error: f64,
    /// Smallest `F_τ(q) − objective(p)` over the competitors.
    pub min_margin: f64,
    pub competitors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxReport {
    pub k_actions: usize,
    pub tau_grid: Vec<f64>,
    pub trials: Vec<SoftmaxTrial>,
    pub passed: bool,
}

impl fmt::Display for SoftmaxReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let err = self.trials.iter().map(|t| t.closed_form_error).fold(0.0, f64::max);
        let margin = self.trials.iter().map(|t| t.min_margin).fold(f64::INFINITY, f64::min);
        write!(
            f,
            "softmax optimality: {} trials, k = {}, max closed-form error {:.3e}, min margin {:.3e} -> {}",
            self.trials.len(),
            self.k_actions,
            err,
            margin,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Competitors per trial.
pub const SOFTMAX_COMPETITORS: usize = 1000;

/// Compares the softmax against random simplex points, local
/// perturbations of the softmax and the vertices.
pub fn check_softmax_optimality(
    n_trials: usize,
    k_actions: usize,
    tau_grid: &[f64],
    seed: u64,
) -> Result<SoftmaxReport> {
    if k_actions < 2 {
        return Err(Error::invalid("softmax check needs at least 2 actions"));
    }
    check_tau_grid(tau_grid)?;
    let jobs: Vec<(usize, f64)> = (0..n_trials)
        .flat_map(|t| tau_grid.iter().map(move |&tau| (t, tau)))
        .collect();
    let trials: Vec<SoftmaxTrial> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, &(trial, tau))| softmax_trial(trial, tau, k_actions, derive_seed(seed, STREAM_SOFTMAX, i as u64)))
        .collect();
    let passed = trials
        .iter()
        .all(|t| t.closed_form_error <= SLACK && t.min_margin >= -SLACK);
    Ok(SoftmaxReport {
        k_actions,
        tau_grid: tau_grid.to_vec(),
        trials,
        passed,
    })
}

fn softmax_trial(trial: usize, tau: f64, k: usize, seed: u64) -> SoftmaxTrial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q_dist = Uniform::new(-5.0, 5.0);
    let q: Vec<f64> = (0..k).map(|_| q_dist.sample(&mut rng)).collect();
    let best = soft_max_value(&q, tau);
    let f = softmax(&q, tau);
    let closed_form_error = (entropy_objective(&f, &q, tau) - best).abs();

    let margin = |p: &[f64]| best - entropy_objective(p, &q, tau);
    let mut min_margin = f64::INFINITY;
    let mut competitors = 0;
    for a in 0..k {
        let mut vertex = vec![0.0; k];
        vertex[a] = 1.0;
        min_margin = min_margin.min(margin(&vertex));
        competitors += 1;
    }
    let mut p = vec![0.0; k];
    while competitors < SOFTMAX_COMPETITORS {
        // exponential draws normalize to a uniform simplex point
        p.iter_mut().for_each(|x| *x = -(1.0 - rng.gen::<f64>()).ln());
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        if competitors % 2 == 0 {
            let eps = 10f64.powi(-rng.gen_range(1..=6));
            p.iter_mut().zip(&f).for_each(|(x, fa)| *x = (1.0 - eps) * fa + eps * *x);
        }
        min_margin = min_margin.min(margin(&p));
        competitors += 1;
    }
    SoftmaxTrial {
        trial,
        tau,
        closed_form_error,
        min_margin,
        competitors,
    }
}
