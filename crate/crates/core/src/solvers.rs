//! KL-regularized policy updates and the training loops built on them.
//!
//! Every update has the closed form
//! `π'(a|s) ∝ base(a|s) · exp(q(s,a) / τ)`, where the base is the reference
//! policy (conservative step), the data policy (behavior regularization) or
//! the geometric mixture `ref^λ · data^(1−λ)` (mixed step). The loops keep
//! policies as log-probabilities between iterations so that actions pushed
//! far down by early, inaccurate value estimates can still recover.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{
    bootstrap_resample, empirical_behavior_policy, empirical_mdp, empirical_support, Dataset,
    Smoothing,
};
use crate::dp::{
    exact_policy_evaluation, in_sample_value_iteration, rollout_return, RolloutMode,
};
use crate::seed::derive_seed;
use crate::{Error, Policy, QTable, Result, SupportMask, TabularMdp, VTable};

/// Policy stored as per-state log-probabilities; `-inf` marks zero mass.
#[derive(Debug, Clone, PartialEq)]
pub struct LogPolicy {
    n_states: usize,
    n_actions: usize,
    logp: Vec<f64>,
}

impl LogPolicy {
    pub fn from_policy(policy: &Policy) -> Self {
        Self {
            n_states: policy.n_states(),
            n_actions: policy.n_actions(),
            logp: policy.as_slice().iter().map(|p| p.ln()).collect(),
        }
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.logp[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn to_policy(&self) -> Policy {
        let mut probs: Vec<f64> = self.logp.iter().map(|l| l.exp()).collect();
        for row in probs.chunks_mut(self.n_actions) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
        }
        Policy::from_rows_unchecked(self.n_states, self.n_actions, probs)
    }
}

/// Writes the normalized log-probabilities of
/// `Π_i base_i^{w_i} · exp(q / τ)` into `out`.
///
/// Terms with zero exponent are skipped. `q` enters only through
/// `q(a) − max q` over the base support. Returns `false` when no action has
/// positive base mass.
fn softmax_row(out: &mut [f64], q: &[f64], bases: &[(&[f64], f64)], tau: f64) -> bool {
    for (a, o) in out.iter_mut().enumerate() {
        *o = bases
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(row, w)| w * row[a])
            .sum();
    }
    let shift = out
        .iter()
        .zip(q)
        .filter(|(b, _)| **b > f64::NEG_INFINITY)
        .map(|(_, &q)| q)
        .fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return false;
    }
    for (o, &qa) in out.iter_mut().zip(q) {
        if *o > f64::NEG_INFINITY {
            *o += (qa - shift) / tau;
        }
    }
    let top = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = out.iter().map(|o| (o - top).exp()).sum::<f64>().ln();
    for o in out.iter_mut() {
        *o = *o - top - log_z;
    }
    true
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("tau must be positive and finite, got {tau}")))
    }
}

fn check_q(q: &QTable, policy: &Policy) -> Result<()> {
    if q.n_states() != policy.n_states() || q.n_actions() != policy.n_actions() {
        return Err(Error::invalid("Q table and policy shapes differ"));
    }
    Ok(())
}

fn log_step(
    q: &QTable,
    bases: &[(&LogPolicy, f64)],
    tau: f64,
) -> Result<LogPolicy> {
    let (n, na) = (q.n_states(), q.n_actions());
    let mut logp = vec![0.0; n * na];
    let mut rows: Vec<(&[f64], f64)> = Vec::with_capacity(bases.len());
    for s in 0..n {
        rows.clear();
        rows.extend(bases.iter().map(|(p, w)| (p.row(s), *w)));
        if !softmax_row(&mut logp[s * na..(s + 1) * na], q.row(s), &rows, tau) {
            return Err(Error::degenerate(s, "regularization base has no mass"));
        }
    }
    Ok(LogPolicy {
        n_states: n,
        n_actions: na,
        logp,
    })
}

/// Maximizer of `E_π[q] − τ·KL(π ‖ ref)`: `π' ∝ ref · exp(q / τ)`.
pub fn conservative_step(q: &QTable, reference: &Policy, tau: f64) -> Result<Policy> {
    check_tau(tau)?;
    check_q(q, reference)?;
    let reference = LogPolicy::from_policy(reference);
    Ok(log_step(q, &[(&reference, 1.0)], tau)?.to_policy())
}

/// Maximizer of `E_π[q] − τλ·KL(π ‖ ref) − τ(1−λ)·KL(π ‖ data)`:
/// `π' ∝ ref^λ · data^(1−λ) · exp(q / τ)`.
pub fn mixed_step(
    q: &QTable,
    reference: &Policy,
    data_policy: &Policy,
    tau: f64,
    lambda: f64,
) -> Result<Policy> {
    check_tau(tau)?;
    check_lambda(lambda)?;
    check_q(q, reference)?;
    check_q(q, data_policy)?;
    let reference = LogPolicy::from_policy(reference);
    let data = LogPolicy::from_policy(data_policy);
    Ok(log_step(q, &[(&reference, lambda), (&data, 1.0 - lambda)], tau)?.to_policy())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")))
    }
}

/// Minimizer of the forward divergence `KL(π* ‖ π)` with
/// `π* ∝ ref · exp(q / τ)`, computed as advantage-weighted maximum
/// likelihood: each reference action is weighted by
/// `exp((q(s,a) − V(s)) / τ)` with the soft value
/// `V(s) = τ · log Σ_a ref(a|s) · exp(q(s,a) / τ)` as baseline, then the
/// weighted counts are normalized.
pub fn forward_kl_step(q: &QTable, reference: &Policy, tau: f64) -> Result<Policy> {
    check_tau(tau)?;
    check_q(q, reference)?;
    let (n, na) = (q.n_states(), q.n_actions());
    let mut probs = vec![0.0; n * na];
    for s in 0..n {
        let (qs, rs) = (q.row(s), reference.row(s));
        let top = qs
            .iter()
            .zip(rs)
            .filter(|(_, &r)| r > 0.0)
            .map(|(&q, _)| q)
            .fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Err(Error::degenerate(s, "reference row has no mass"));
        }
        let soft_value = top
            + tau
                * qs.iter()
                    .zip(rs)
                    .filter(|(_, &r)| r > 0.0)
                    .map(|(&q, &r)| r * ((q - top) / tau).exp())
                    .sum::<f64>()
                    .ln();
        let row = &mut probs[s * na..(s + 1) * na];
        for (a, p) in row.iter_mut().enumerate() {
            if rs[a] > 0.0 {
                *p = rs[a] * ((qs[a] - soft_value) / tau).exp();
            }
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
    }
    Ok(Policy::from_rows_unchecked(n, na, probs))
}

/// Exact evaluation on the empirical (maximum-likelihood) MDP.
pub fn fitted_q_evaluation(empirical: &TabularMdp, policy: &Policy, tol: f64) -> Result<QTable> {
    Ok(exact_policy_evaluation(empirical, policy, tol)?.0)
}

/// Which model the policy-evaluation step runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    ExactOnTrueMdp,
    FittedOnEmpiricalMdp,
}

/// Extra noise injected into fitted evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvalNoise {
    #[default]
    None,
    /// Each evaluation uses the empirical MDP of a fresh bootstrap resample.
    Bootstrap,
}

/// Whether behavior regularization re-evaluates its iterate every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BrMode {
    #[default]
    MultiStep,
    /// Evaluate the behavior policy once and keep that Q.
    OneStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ensemble {
    #[default]
    Off,
    On,
}

fn default_eval_episodes() -> usize {
    20
}

fn default_eval_cap() -> usize {
    30
}

fn default_eval_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tau: f64,
    #[serde(default = "one")]
    pub lambda: f64,
    pub iterations: usize,
    pub eval_mode: EvalMode,
    #[serde(default)]
    pub noise: EvalNoise,
    #[serde(default = "default_eval_tol")]
    pub eval_tol: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub ensemble: Ensemble,
    #[serde(default)]
    pub br_mode: BrMode,
    /// Greedy rollouts averaged per curve point.
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Step cap of each evaluation rollout.
    #[serde(default = "default_eval_cap")]
    pub eval_cap: usize,
}

fn one() -> f64 {
    1.0
}

impl SolverConfig {
    pub fn new(tau: f64, iterations: usize, eval_mode: EvalMode) -> Self {
        Self {
            tau,
            lambda: 1.0,
            iterations,
            eval_mode,
            noise: EvalNoise::None,
            eval_tol: default_eval_tol(),
            rng_seed: 0,
            ensemble: Ensemble::Off,
            br_mode: BrMode::MultiStep,
            eval_episodes: default_eval_episodes(),
            eval_cap: default_eval_cap(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        check_lambda(self.lambda)?;
        if !(self.eval_tol > 0.0) {
            return Err(Error::invalid("eval_tol must be positive"));
        }
        if self.eval_episodes == 0 || self.eval_cap == 0 {
            return Err(Error::invalid("eval_episodes and eval_cap must be at least 1"));
        }
        Ok(())
    }
}

/// One curve point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iteration: usize,
    /// Mean undiscounted return of greedy rollouts on the true MDP.
    pub return_undiscounted: f64,
    /// Exact discounted value of the greedy policy at the start state.
    pub value_start_discounted: f64,
    /// Max-norm change of the policy since the previous iteration.
    pub policy_delta: f64,
    /// In-sample oracle return minus `return_undiscounted`.
    pub oracle_gap: Option<f64>,
    /// Value of the (stochastic) iterate at the start state under the
    /// evaluation model.
    pub policy_value_start: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub records: Vec<CurveRecord>,
}

pub const CURVE_COLUMNS: [&str; 5] = [
    "iteration",
    "return_undiscounted",
    "value_start_discounted",
    "policy_delta",
    "oracle_gap",
];

impl LearningCurve {
    pub fn last(&self) -> &CurveRecord {
        self.records.last().expect("curves hold at least iteration 0")
    }

    pub fn final_return(&self) -> f64 {
        self.last().return_undiscounted
    }

    /// CSV with the columns of [`CURVE_COLUMNS`]; a missing gap is empty.
    pub fn to_csv(&self) -> String {
        let mut out = CURVE_COLUMNS.join(",");
        out.push('\n');
        for r in &self.records {
            let gap = r.oracle_gap.map(|g| g.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.iteration, r.return_undiscounted, r.value_start_discounted, r.policy_delta, gap
            );
        }
        out
    }
}

/// Everything a training loop needs: the true environment (for curves),
/// the estimated behavior policy, its support and, with a dataset, the
/// empirical MDP.
#[derive(Debug, Clone)]
pub struct OfflineProblem {
    env: TabularMdp,
    dataset: Option<Dataset>,
    behavior: Policy,
    support: SupportMask,
    empirical: Option<TabularMdp>,
    pessimistic_reward: Option<f64>,
}

impl OfflineProblem {
    /// Estimates `π̂_D` (uniform on unvisited states), the support and the
    /// empirical MDP from `dataset`.
    pub fn from_dataset(env: TabularMdp, dataset: Dataset) -> Result<Self> {
        Self::from_dataset_with(env, dataset, None)
    }

    pub fn from_dataset_with(
        env: TabularMdp,
        dataset: Dataset,
        pessimistic_reward: Option<f64>,
    ) -> Result<Self> {
        let (n, na) = (env.n_states(), env.n_actions());
        if dataset.state_bound() > n {
            return Err(Error::invalid("dataset refers to states outside the environment"));
        }
        let behavior = empirical_behavior_policy(&dataset, n, na, Smoothing::UniformOnUnvisited)
            .smoothed()
            .clone();
        let support = empirical_support(&dataset, n, na);
        let empirical = empirical_mdp(&dataset, n, na, &env, pessimistic_reward)?;
        Ok(Self {
            env,
            dataset: Some(dataset),
            behavior,
            support,
            empirical: Some(empirical),
            pessimistic_reward,
        })
    }

    /// No dataset: the behavior policy is given and its support is the
    /// data support. Only exact evaluation is available.
    pub fn from_behavior(env: TabularMdp, behavior: Policy) -> Result<Self> {
        behavior.check_shape(&env)?;
        Ok(Self {
            support: SupportMask::of_policy(&behavior),
            env,
            dataset: None,
            behavior,
            empirical: None,
            pessimistic_reward: None,
        })
    }

    /// Replaces the behavior policy used as `π_0` and BR reference.
    pub fn with_behavior(mut self, behavior: Policy) -> Result<Self> {
        behavior.check_shape(&self.env)?;
        self.behavior = behavior;
        Ok(self)
    }

    pub fn env(&self) -> &TabularMdp {
        &self.env
    }

    pub fn dataset(&self) -> Option<&Dataset> {
        self.dataset.as_ref()
    }

    pub fn behavior(&self) -> &Policy {
        &self.behavior
    }

    pub fn support(&self) -> &SupportMask {
        &self.support
    }

    pub fn empirical(&self) -> Option<&TabularMdp> {
        self.empirical.as_ref()
    }

    /// In-sample optimal policy on the true MDP and its greedy return.
    pub fn in_sample_oracle(&self, cap: usize, tol: f64) -> Result<Oracle> {
        let (_, v, policy) = in_sample_value_iteration(&self.env, &self.support, tol)?;
        let start = self.env.start_state();
        let rollout = rollout_return(&self.env, &policy, start, cap, 0, RolloutMode::Greedy)?;
        Ok(Oracle {
            value_start: v.get(start),
            greedy_return: rollout.undiscounted,
            policy,
        })
    }

    fn model(&self, config: &SolverConfig, stream: u64, iteration: usize) -> Result<ModelRef<'_>> {
        match (config.eval_mode, config.noise) {
            (EvalMode::ExactOnTrueMdp, _) => Ok(ModelRef::Borrowed(&self.env)),
            (EvalMode::FittedOnEmpiricalMdp, EvalNoise::None) => self
                .empirical
                .as_ref()
                .map(ModelRef::Borrowed)
                .ok_or_else(|| Error::invalid("fitted evaluation needs a dataset")),
            (EvalMode::FittedOnEmpiricalMdp, EvalNoise::Bootstrap) => {
                let data = self
                    .dataset
                    .as_ref()
                    .ok_or_else(|| Error::invalid("bootstrap evaluation needs a dataset"))?;
                let seed = derive_seed(config.rng_seed, stream, iteration as u64);
                let resampled = bootstrap_resample(data, seed);
                let (n, na) = (self.env.n_states(), self.env.n_actions());
                Ok(ModelRef::Owned(empirical_mdp(
                    &resampled,
                    n,
                    na,
                    &self.env,
                    self.pessimistic_reward,
                )?))
            }
        }
    }
}

enum ModelRef<'a> {
    Borrowed(&'a TabularMdp),
    Owned(TabularMdp),
}

impl ModelRef<'_> {
    fn get(&self) -> &TabularMdp {
        match self {
            ModelRef::Borrowed(m) => m,
            ModelRef::Owned(m) => m,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Oracle {
    /// `V*_{π_D}(start)`.
    pub value_start: f64,
    /// Undiscounted greedy return of the in-sample optimal policy.
    pub greedy_return: f64,
    pub policy: Policy,
}

const STREAM_ROLLOUT: u64 = 0x524f;
const STREAM_MEMBER: u64 = 0x4d45;

struct Recorder<'a> {
    problem: &'a OfflineProblem,
    config: &'a SolverConfig,
    oracle_return: Option<f64>,
    previous: Option<Policy>,
    curve: LearningCurve,
}

impl<'a> Recorder<'a> {
    fn new(problem: &'a OfflineProblem, config: &'a SolverConfig) -> Result<Self> {
        let oracle_return = Some(
            problem
                .in_sample_oracle(config.eval_cap, config.eval_tol)?
                .greedy_return,
        );
        Ok(Self {
            problem,
            config,
            oracle_return,
            previous: None,
            curve: LearningCurve::default(),
        })
    }

    fn record(&mut self, iteration: usize, policy: &Policy, policy_value_start: f64) -> Result<()> {
        let env = &self.problem.env;
        let start = env.start_state();
        let mut total = 0.0;
        for episode in 0..self.config.eval_episodes {
            let seed = derive_seed(
                self.config.rng_seed,
                STREAM_ROLLOUT,
                (iteration * self.config.eval_episodes + episode) as u64,
            );
            total += rollout_return(
                env,
                policy,
                start,
                self.config.eval_cap,
                seed,
                RolloutMode::Greedy,
            )?
            .undiscounted;
        }
        let ret = total / self.config.eval_episodes as f64;
        let (_, greedy_v) = exact_policy_evaluation(env, &policy.greedy(), self.config.eval_tol)?;
        let delta = self
            .previous
            .as_ref()
            .map_or(0.0, |prev| prev.max_abs_diff(policy));
        self.curve.records.push(CurveRecord {
            iteration,
            return_undiscounted: ret,
            value_start_discounted: greedy_v.get(start),
            policy_delta: delta,
            oracle_gap: self.oracle_return.map(|o| o - ret),
            policy_value_start,
        });
        self.previous = Some(policy.clone());
        Ok(())
    }
}

fn evaluate(
    problem: &OfflineProblem,
    config: &SolverConfig,
    stream: u64,
    iteration: usize,
    policy: &Policy,
) -> Result<(QTable, VTable)> {
    let model = problem.model(config, stream, iteration)?;
    exact_policy_evaluation(model.get(), policy, config.eval_tol)
}

/// Conservative policy iteration: evaluate `π_t`, then
/// `π_{t+1} = mixed_step(Q^{π_t}, π_t, π̂_D, τ, λ)`, starting from
/// `π_0 = π̂_D`. With `λ = 1` the reference is always the previous iterate.
pub fn run_cpi(problem: &OfflineProblem, config: &SolverConfig) -> Result<(Policy, LearningCurve)> {
    config.validate()?;
    let data = LogPolicy::from_policy(&problem.behavior);
    let mut current = data.clone();
    let mut recorder = Recorder::new(problem, config)?;
    let start = problem.env.start_state();
    for t in 0..=config.iterations {
        // π_0 is π̂_D as given, not its log-domain round trip
        let policy = if t == 0 {
            problem.behavior.clone()
        } else {
            current.to_policy()
        };
        let (q, v) = evaluate(problem, config, 0, t, &policy)?;
        recorder.record(t, &policy, v.get(start))?;
        if t == config.iterations {
            return Ok((policy, recorder.curve));
        }
        current = log_step(
            &q,
            &[(&current, config.lambda), (&data, 1.0 - config.lambda)],
            config.tau,
        )?;
    }
    unreachable!("loop returns at the last iteration")
}

/// Behavior regularization: the reference stays at `π̂_D`,
/// `π_{t+1} = conservative_step(Q^{π_t}, π̂_D, τ)`.
pub fn run_br(problem: &OfflineProblem, config: &SolverConfig) -> Result<(Policy, LearningCurve)> {
    config.validate()?;
    let data = LogPolicy::from_policy(&problem.behavior);
    let mut current = data.clone();
    let mut recorder = Recorder::new(problem, config)?;
    let start = problem.env.start_state();
    let mut frozen_q: Option<QTable> = None;
    for t in 0..=config.iterations {
        let policy = if t == 0 {
            problem.behavior.clone()
        } else {
            current.to_policy()
        };
        let (q, v) = evaluate(problem, config, 0, t, &policy)?;
        recorder.record(t, &policy, v.get(start))?;
        if t == config.iterations {
            return Ok((policy, recorder.curve));
        }
        let q = match config.br_mode {
            BrMode::MultiStep => q,
            BrMode::OneStep => frozen_q.get_or_insert(q).clone(),
        };
        current = log_step(&q, &[(&data, 1.0)], config.tau)?;
    }
    unreachable!("loop returns at the last iteration")
}

/// Initial members of the reference ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleInit {
    pub first: Policy,
    pub second: Policy,
    /// Keep the second member fixed at its initial policy.
    pub freeze_second: bool,
}

impl EnsembleInit {
    /// `π̂_D` and the uniform policy over the data support.
    pub fn standard(problem: &OfflineProblem) -> Self {
        Self {
            first: problem.behavior.clone(),
            second: Policy::uniform_on_support(&problem.support),
            freeze_second: false,
        }
    }
}

/// CPI with a two-member reference ensemble and fitted evaluation.
pub fn run_cpi_re(
    problem: &OfflineProblem,
    config: &SolverConfig,
) -> Result<(Policy, LearningCurve)> {
    run_reference_ensemble(problem, config, EnsembleInit::standard(problem))
}

/// Each iteration evaluates both members (independent evaluation noise per
/// member), picks per state the member with the larger `E_{a~π^i}[Q^i(s,a)]`
/// as the shared reference, then updates both members with
/// `mixed_step(Q^i, reference, π̂_D, τ, λ)`. The reference policy is also
/// the one reported in the curve and returned.
pub fn run_reference_ensemble(
    problem: &OfflineProblem,
    config: &SolverConfig,
    init: EnsembleInit,
) -> Result<(Policy, LearningCurve)> {
    config.validate()?;
    if config.eval_mode != EvalMode::FittedOnEmpiricalMdp {
        return Err(Error::invalid("the reference ensemble needs fitted evaluation"));
    }
    init.first.check_shape(&problem.env)?;
    init.second.check_shape(&problem.env)?;
    let data = LogPolicy::from_policy(&problem.behavior);
    let mut members = [
        LogPolicy::from_policy(&init.first),
        LogPolicy::from_policy(&init.second),
    ];
    let mut recorder = Recorder::new(problem, config)?;
    let (n, na) = (problem.env.n_states(), problem.env.n_actions());
    let start = problem.env.start_state();
    for t in 0..=config.iterations {
        let policies = if t == 0 {
            [init.first.clone(), init.second.clone()]
        } else {
            [members[0].to_policy(), members[1].to_policy()]
        };
        let mut qs = Vec::with_capacity(2);
        for (i, p) in policies.iter().enumerate() {
            qs.push(evaluate(problem, config, STREAM_MEMBER + i as u64, t, p)?);
        }
        let mut reference = LogPolicy {
            n_states: n,
            n_actions: na,
            logp: vec![0.0; n * na],
        };
        let mut selected_probs = vec![0.0; n * na];
        let mut chosen_value_start = 0.0;
        for s in 0..n {
            let v0 = qs[0].1.get(s);
            let v1 = qs[1].1.get(s);
            let pick = usize::from(v1 > v0);
            reference.logp[s * na..(s + 1) * na].copy_from_slice(members[pick].row(s));
            selected_probs[s * na..(s + 1) * na].copy_from_slice(policies[pick].row(s));
            if s == start {
                chosen_value_start = v0.max(v1);
            }
        }
        let selected = Policy::from_rows_unchecked(n, na, selected_probs);
        recorder.record(t, &selected, chosen_value_start)?;
        if t == config.iterations {
            return Ok((selected, recorder.curve));
        }
        let bases = |_: usize| [(&reference, config.lambda), (&data, 1.0 - config.lambda)];
        let next0 = log_step(&qs[0].0, &bases(0), config.tau)?;
        let next1 = if init.freeze_second {
            members[1].clone()
        } else {
            log_step(&qs[1].0, &bases(1), config.tau)?
        };
        members = [next0, next1];
    }
    unreachable!("loop returns at the last iteration")
}

/// Values `V^{π_t}` of exact CPI iterates `π_{t+1} ∝ π_t · exp(Q^{π_t}/τ)`
/// for `t = 0..=iterations`.
pub fn exact_cpi_values(
    mdp: &TabularMdp,
    init: &Policy,
    tau: f64,
    iterations: usize,
    tol: f64,
) -> Result<Vec<VTable>> {
    check_tau(tau)?;
    init.check_shape(mdp)?;
    let mut current = LogPolicy::from_policy(init);
    let mut out = Vec::with_capacity(iterations + 1);
    for t in 0..=iterations {
        let (q, v) = exact_policy_evaluation(mdp, &current.to_policy(), tol)?;
        out.push(v);
        if t < iterations {
            current = log_step(&q, &[(&current, 1.0)], tau)?;
        }
    }
    Ok(out)
}
