//! Finite MDP, policy and value-table types.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-sum tolerance for transition rows and policy rows.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// A finite discounted MDP with sparse next-state rows.
///
/// Transition rows are stored per `(state, action)` pair as sorted
/// `(next_state, probability)` lists with zero entries dropped. Terminal
/// states must self-loop with probability one and pay zero reward.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<Vec<(usize, f64)>>,
    reward: Vec<f64>,
    discount: f64,
    terminal: Vec<bool>,
    start_state: usize,
    restart_states: Vec<usize>,
}

impl TabularMdp {
    /// Builds an MDP from sparse rows indexed by `state * n_actions + action`.
    ///
    /// Duplicate next states within a row are merged. Random restarts default
    /// to every non-terminal state.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<Vec<(usize, f64)>>,
        reward: Vec<f64>,
        discount: f64,
        terminal: Vec<bool>,
        start_state: usize,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("MDP needs at least one state and one action"));
        }
        let pairs = n_states * n_actions;
        if transitions.len() != pairs || reward.len() != pairs {
            return Err(Error::invalid(format!(
                "expected {pairs} transition rows and rewards, got {} and {}",
                transitions.len(),
                reward.len()
            )));
        }
        if terminal.len() != n_states {
            return Err(Error::invalid("terminal mask length differs from state count"));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::invalid(format!("discount {discount} outside [0, 1)")));
        }
        if start_state >= n_states {
            return Err(Error::invalid(format!("start state {start_state} out of range")));
        }

        let mut rows = Vec::with_capacity(pairs);
        for (idx, row) in transitions.into_iter().enumerate() {
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            let mut sorted = row;
            sorted.sort_by_key(|&(next, _)| next);
            for (next, p) in sorted {
                if next >= n_states {
                    return Err(Error::invalid(format!("next state {next} out of range")));
                }
                if !(p >= 0.0) || !p.is_finite() {
                    return Err(Error::invalid(format!("bad probability {p} in row {idx}")));
                }
                if p == 0.0 {
                    continue;
                }
                match merged.last_mut() {
                    Some(last) if last.0 == next => last.1 += p,
                    _ => merged.push((next, p)),
                }
            }
            let total: f64 = merged.iter().map(|&(_, p)| p).sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!(
                    "transition row for (s={}, a={}) sums to {total}",
                    idx / n_actions,
                    idx % n_actions
                )));
            }
            rows.push(merged);
        }
        if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
            return Err(Error::invalid(format!("non-finite reward {r}")));
        }
        for s in (0..n_states).filter(|&s| terminal[s]) {
            for a in 0..n_actions {
                let row = &rows[s * n_actions + a];
                if row.len() != 1 || row[0].0 != s || reward[s * n_actions + a] != 0.0 {
                    return Err(Error::invalid(format!(
                        "terminal state {s} must self-loop with zero reward"
                    )));
                }
            }
        }

        let restart_states = (0..n_states).filter(|&s| !terminal[s]).collect();
        Ok(Self {
            n_states,
            n_actions,
            transitions: rows,
            reward,
            discount,
            terminal,
            start_state,
            restart_states,
        })
    }

    /// Builds an MDP from a dense `[state][action][next_state]` tensor.
    pub fn from_dense(
        n_states: usize,
        n_actions: usize,
        transition: &[f64],
        reward: Vec<f64>,
        discount: f64,
        terminal: Vec<bool>,
        start_state: usize,
    ) -> Result<Self> {
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::invalid("dense transition tensor has the wrong length"));
        }
        let rows = transition
            .chunks(n_states)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &p)| p != 0.0)
                    .map(|(next, &p)| (next, p))
                    .collect()
            })
            .collect();
        Self::new(
            n_states,
            n_actions,
            rows,
            reward,
            discount,
            terminal,
            start_state,
        )
    }

    /// Restricts random restarts to the given states.
    pub fn with_restart_states(mut self, states: Vec<usize>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::invalid("restart set must be nonempty"));
        }
        if let Some(&s) = states.iter().find(|&&s| s >= self.n_states || self.terminal[s]) {
            return Err(Error::invalid(format!("restart state {s} is terminal or out of range")));
        }
        self.restart_states = states;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn start_state(&self) -> usize {
        self.start_state
    }

    pub fn restart_states(&self) -> &[usize] {
        &self.restart_states
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    /// Sparse next-state distribution of `(s, a)`.
    #[inline]
    pub fn next(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.transitions[s * self.n_actions + a]
    }

    /// `P(next | s, a)`.
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.next(s, a)
            .iter()
            .find(|&&(n, _)| n == next)
            .map_or(0.0, |&(_, p)| p)
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// Smallest and largest reward over non-terminal `(s, a)` pairs.
    pub fn reward_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in (0..self.n_states).filter(|&s| !self.terminal[s]) {
            for a in 0..self.n_actions {
                lo = lo.min(self.reward(s, a));
                hi = hi.max(self.reward(s, a));
            }
        }
        if lo > hi {
            (0.0, 0.0)
        } else {
            (lo, hi)
        }
    }

    /// True when every transition row is a point mass.
    pub fn is_deterministic(&self) -> bool {
        self.transitions.iter().all(|row| row.len() == 1)
    }

    /// Returns a copy with rewards mapped through `f` on non-terminal states.
    pub fn map_rewards(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for s in (0..self.n_states).filter(|&s| !self.terminal[s]) {
            for a in 0..self.n_actions {
                let idx = s * self.n_actions + a;
                out.reward[idx] = f(self.reward[idx]);
            }
        }
        out
    }
}

/// A stochastic policy: one distribution over actions per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    /// Validates a row-major probability matrix.
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || probs.len() != n_states * n_actions {
            return Err(Error::invalid("policy shape mismatch"));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::invalid(format!("policy row {s} has a bad entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!("policy row {s} sums to {total}")));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub(crate) fn from_rows_unchecked(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), n_states * n_actions);
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self::from_rows_unchecked(n_states, n_actions, vec![p; n_states * n_actions])
    }

    /// The same action distribution at every state.
    pub fn stationary(n_states: usize, row: &[f64]) -> Result<Self> {
        Self::new(n_states, row.len(), row.repeat(n_states))
    }

    /// Deterministic policy taking `actions[s]` at state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::invalid(format!("action {a} out of range at state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Self::new(actions.len(), n_actions, probs)
    }

    /// Uniform over allowed actions; states without allowed actions get a
    /// uniform row over all actions.
    pub fn uniform_on_support(mask: &SupportMask) -> Self {
        let n_actions = mask.n_actions();
        let mut probs = Vec::with_capacity(mask.n_states() * n_actions);
        for s in 0..mask.n_states() {
            let row = mask.row(s);
            let count = row.iter().filter(|&&b| b).count();
            if count == 0 {
                probs.extend(std::iter::repeat(1.0 / n_actions as f64).take(n_actions));
            } else {
                probs.extend(row.iter().map(|&b| if b { 1.0 / count as f64 } else { 0.0 }));
            }
        }
        Self::from_rows_unchecked(mask.n_states(), n_actions, probs)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Highest-probability action at `s`, lowest index on ties.
    pub fn greedy_action(&self, s: usize) -> usize {
        argmax(self.row(s))
    }

    /// One-hot policy at each state's highest-probability action.
    pub fn greedy(&self) -> Policy {
        let actions: Vec<usize> = (0..self.n_states).map(|s| self.greedy_action(s)).collect();
        let mut probs = vec![0.0; self.probs.len()];
        for (s, a) in actions.into_iter().enumerate() {
            probs[s * self.n_actions + a] = 1.0;
        }
        Self::from_rows_unchecked(self.n_states, self.n_actions, probs)
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs.iter().all(|&p| p == 0.0 || p == 1.0)
    }

    /// Max-norm distance between two policies of the same shape.
    pub fn max_abs_diff(&self, other: &Policy) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::invalid(format!(
                "policy shape {}x{} does not match MDP {}x{}",
                self.n_states,
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// State-action values together with the discount they were computed under.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
    discount: f64,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>, discount: f64) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::invalid("Q table shape mismatch"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("Q table has non-finite entries"));
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
            discount,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// `E_{a ~ policy(s)} Q(s, a)` for every state.
    pub fn expected_under(&self, policy: &Policy) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| {
                self.row(s)
                    .iter()
                    .zip(policy.row(s))
                    .map(|(q, p)| if *p == 0.0 { 0.0 } else { q * p })
                    .sum()
            })
            .collect()
    }
}

/// State values together with the discount they were computed under.
#[derive(Debug, Clone, PartialEq)]
pub struct VTable {
    values: Vec<f64>,
    discount: f64,
}

impl VTable {
    pub fn new(values: Vec<f64>, discount: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("V table has non-finite entries"));
        }
        Ok(Self { values, discount })
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    #[inline]
    pub fn get(&self, s: usize) -> f64 {
        self.values[s]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Which `(state, action)` pairs are inside the data support.
///
/// States with no allowed action at all are flagged as unvisited.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportMask {
    n_states: usize,
    n_actions: usize,
    allowed: Vec<bool>,
}

impl SupportMask {
    pub fn new(n_states: usize, n_actions: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n_states * n_actions {
            return Err(Error::invalid("support mask shape mismatch"));
        }
        Ok(Self {
            n_states,
            n_actions,
            allowed,
        })
    }

    pub fn full(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            allowed: vec![true; n_states * n_actions],
        }
    }

    /// Support of a policy: pairs with strictly positive probability.
    pub fn of_policy(policy: &Policy) -> Self {
        Self {
            n_states: policy.n_states(),
            n_actions: policy.n_actions(),
            allowed: policy.as_slice().iter().map(|&p| p > 0.0).collect(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn allowed(&self, s: usize, a: usize) -> bool {
        self.allowed[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, value: bool) {
        self.allowed[s * self.n_actions + a] = value;
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[bool] {
        &self.allowed[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn is_unvisited(&self, s: usize) -> bool {
        !self.row(s).iter().any(|&b| b)
    }

    pub fn unvisited_states(&self) -> Vec<usize> {
        (0..self.n_states).filter(|&s| self.is_unvisited(s)).collect()
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&b| b)
    }
}
