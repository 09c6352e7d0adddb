//! Dynamic-programming kernels on a [`TabularMdp`].
//!
//! All fixed-point solvers start from zero (or the fallback value for
//! unvisited states) and stop once the Bellman residual `‖TV − V‖∞` drops
//! to the requested tolerance. The sweep budget is derived from the known
//! contraction rate, see [`iteration_cap`]; running past it is an error.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::argmax;
use crate::{Error, Policy, QTable, Result, SupportMask, TabularMdp, VTable};

/// Extra sweeps granted on top of the contraction-rate estimate.
pub const CAP_MARGIN: usize = 100;

/// Sweep budget for a γ-contraction started within `scale / (1 − γ)` of
/// its fixed point: `ceil(ln(tol·(1−γ)/scale) / ln γ) + 100`.
pub fn iteration_cap(tol: f64, discount: f64, scale: f64) -> usize {
    if discount <= 0.0 || scale <= 0.0 {
        return 1 + CAP_MARGIN;
    }
    let ratio = tol * (1.0 - discount) / scale;
    if ratio >= 1.0 {
        return 1 + CAP_MARGIN;
    }
    (ratio.ln() / discount.ln()).ceil() as usize + CAP_MARGIN
}

fn reward_scale(mdp: &TabularMdp) -> f64 {
    let (lo, hi) = mdp.reward_range();
    lo.abs().max(hi.abs()).max(hi - lo)
}

fn check_tol(tol: f64) -> Result<()> {
    if tol > 0.0 && tol.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("tolerance must be positive, got {tol}")))
    }
}

/// `r(s, a) + γ · E[V(s')]`.
#[inline]
fn backup(mdp: &TabularMdp, values: &[f64], s: usize, a: usize) -> f64 {
    let expected: f64 = mdp.next(s, a).iter().map(|&(n, p)| p * values[n]).sum();
    mdp.reward(s, a) + mdp.discount() * expected
}

fn q_from_values(mdp: &TabularMdp, values: &[f64]) -> Result<QTable> {
    let na = mdp.n_actions();
    let mut q = Vec::with_capacity(mdp.n_states() * na);
    for s in 0..mdp.n_states() {
        for a in 0..na {
            q.push(backup(mdp, values, s, a));
        }
    }
    QTable::new(mdp.n_states(), na, q, mdp.discount())
}

/// Solves the Bellman expectation equation for `policy`.
///
/// The returned `V` is the policy-weighted row sum of the returned `Q`.
pub fn exact_policy_evaluation(
    mdp: &TabularMdp,
    policy: &Policy,
    tol: f64,
) -> Result<(QTable, VTable)> {
    policy.check_shape(mdp)?;
    check_tol(tol)?;
    let n = mdp.n_states();
    let gamma = mdp.discount();

    // Collapse the policy into a state-to-state chain once.
    let mut chain: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut reward_pi = vec![0.0; n];
    let mut dense = vec![0.0; n];
    for s in 0..n {
        let mut touched = Vec::new();
        for (a, &pa) in policy.row(s).iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            reward_pi[s] += pa * mdp.reward(s, a);
            for &(next, p) in mdp.next(s, a) {
                if dense[next] == 0.0 {
                    touched.push(next);
                }
                dense[next] += pa * p;
            }
        }
        touched.sort_unstable();
        chain.push(touched.iter().map(|&t| (t, dense[t])).collect());
        for t in touched {
            dense[t] = 0.0;
        }
    }

    let cap = iteration_cap(tol, gamma, reward_scale(mdp));
    let mut values = vec![0.0; n];
    let mut next_values = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..cap {
        residual = 0.0;
        for s in 0..n {
            let expected: f64 = chain[s].iter().map(|&(t, p)| p * values[t]).sum();
            next_values[s] = reward_pi[s] + gamma * expected;
            residual = residual.max((next_values[s] - values[s]).abs());
        }
        std::mem::swap(&mut values, &mut next_values);
        if residual <= tol {
            break;
        }
    }
    if residual > tol {
        return Err(Error::NumericFailure {
            solver: "policy evaluation",
            cap,
            residual,
        });
    }

    let q = q_from_values(mdp, &values)?;
    let v = VTable::new(q.expected_under(policy), gamma)?;
    Ok((q, v))
}

/// How in-sample value iteration values states with no allowed action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnvisitedFallback {
    /// `r_min / (1 − γ)` with `r_min` the smallest reward of the MDP.
    Pessimistic,
    /// A fixed value.
    Value(f64),
    /// Bootstrapping into such a state is a degenerate-support error.
    Error,
}

impl Default for UnvisitedFallback {
    fn default() -> Self {
        UnvisitedFallback::Pessimistic
    }
}

/// Solves the Bellman optimality equation; the greedy policy is one-hot.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<(QTable, VTable, Policy)> {
    optimal_iteration(mdp, None, UnvisitedFallback::Pessimistic, tol)
}

/// Solves the in-sample optimality equation: the max in each backup runs
/// over allowed actions only. Unvisited states use the pessimistic fallback.
pub fn in_sample_value_iteration(
    mdp: &TabularMdp,
    support: &SupportMask,
    tol: f64,
) -> Result<(QTable, VTable, Policy)> {
    in_sample_value_iteration_with(mdp, support, UnvisitedFallback::Pessimistic, tol)
}

/// [`in_sample_value_iteration`] with an explicit rule for unvisited states.
///
/// Unvisited states get a uniform row in the returned policy since they
/// have no allowed action to put mass on.
pub fn in_sample_value_iteration_with(
    mdp: &TabularMdp,
    support: &SupportMask,
    fallback: UnvisitedFallback,
    tol: f64,
) -> Result<(QTable, VTable, Policy)> {
    if support.n_states() != mdp.n_states() || support.n_actions() != mdp.n_actions() {
        return Err(Error::invalid("support mask shape does not match the MDP"));
    }
    optimal_iteration(mdp, Some(support), fallback, tol)
}

fn optimal_iteration(
    mdp: &TabularMdp,
    support: Option<&SupportMask>,
    fallback: UnvisitedFallback,
    tol: f64,
) -> Result<(QTable, VTable, Policy)> {
    check_tol(tol)?;
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let gamma = mdp.discount();
    let allowed = |s: usize, a: usize| support.map_or(true, |m| m.allowed(s, a));

    // Fixed values for unvisited non-terminal states.
    let mut pinned: Vec<Option<f64>> = vec![None; n];
    let (r_min, _) = mdp.reward_range();
    for s in (0..n).filter(|&s| !mdp.is_terminal(s)) {
        if (0..na).any(|a| allowed(s, a)) {
            continue;
        }
        pinned[s] = Some(match fallback {
            UnvisitedFallback::Pessimistic => r_min / (1.0 - gamma),
            UnvisitedFallback::Value(v) => v,
            UnvisitedFallback::Error => r_min / (1.0 - gamma),
        });
    }
    if fallback == UnvisitedFallback::Error {
        for s in 0..n {
            for a in (0..na).filter(|&a| allowed(s, a)) {
                if let Some(&(next, _)) = mdp.next(s, a).iter().find(|&&(t, _)| pinned[t].is_some()) {
                    return Err(Error::degenerate(
                        next,
                        format!("reached from ({s}, {a}) but has no allowed action"),
                    ));
                }
            }
        }
    }

    let mut scale = reward_scale(mdp);
    for v in pinned.iter().flatten() {
        scale = scale.max(v.abs() * (1.0 - gamma));
    }
    let cap = iteration_cap(tol, gamma, scale);

    let mut values: Vec<f64> = pinned.iter().map(|p| p.unwrap_or(0.0)).collect();
    let mut next_values = values.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..cap {
        residual = 0.0;
        for s in 0..n {
            if mdp.is_terminal(s) || pinned[s].is_some() {
                continue;
            }
            let best = (0..na)
                .filter(|&a| allowed(s, a))
                .map(|a| backup(mdp, &values, s, a))
                .fold(f64::NEG_INFINITY, f64::max);
            next_values[s] = best;
            residual = residual.max((best - values[s]).abs());
        }
        std::mem::swap(&mut values, &mut next_values);
        if residual <= tol {
            break;
        }
    }
    if residual > tol {
        return Err(Error::NumericFailure {
            solver: if support.is_some() {
                "in-sample value iteration"
            } else {
                "value iteration"
            },
            cap,
            residual,
        });
    }

    let q = q_from_values(mdp, &values)?;
    let mut v = values;
    let mut probs = vec![0.0; n * na];
    for s in 0..n {
        let row = &mut probs[s * na..(s + 1) * na];
        if let Some(pin) = pinned[s] {
            row.fill(1.0 / na as f64);
            v[s] = pin;
            continue;
        }
        // terminal states may carry an empty mask row
        let a = masked_argmax(q.row(s), |a| allowed(s, a)).unwrap_or_else(|| argmax(q.row(s)));
        row[a] = 1.0;
        if !mdp.is_terminal(s) {
            v[s] = q.get(s, a);
        }
    }
    let policy = Policy::from_rows_unchecked(n, na, probs);
    Ok((q, VTable::new(v, gamma)?, policy))
}

fn masked_argmax(values: &[f64], allowed: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (a, &v) in values.iter().enumerate() {
        if !allowed(a) {
            continue;
        }
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(a),
        }
    }
    best
}

/// Deterministic policy maximizing `q` over allowed actions, lowest index
/// on ties.
pub fn greedy_policy(q: &QTable, support: Option<&SupportMask>) -> Result<Policy> {
    let (n, na) = (q.n_states(), q.n_actions());
    if let Some(m) = support {
        if m.n_states() != n || m.n_actions() != na {
            return Err(Error::invalid("support mask shape does not match the Q table"));
        }
    }
    let mut probs = vec![0.0; n * na];
    for s in 0..n {
        let a = match support {
            None => argmax(q.row(s)),
            Some(m) => masked_argmax(q.row(s), |a| m.allowed(s, a))
                .ok_or_else(|| Error::degenerate(s, "no allowed action"))?,
        };
        probs[s * na + a] = 1.0;
    }
    Ok(Policy::from_rows_unchecked(n, na, probs))
}

/// How [`rollout_return`] picks actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutMode {
    /// Highest-probability action, lowest index on ties.
    Greedy,
    /// Sample from the policy row.
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rollout {
    pub undiscounted: f64,
    pub discounted: f64,
    pub steps: usize,
}

/// Draws an index from nonnegative weights summing to one.
pub(crate) fn sample_index(rng: &mut impl Rng, weights: impl Iterator<Item = (usize, f64)>) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Simulates one episode from `start`, stopping on terminal entry or after
/// `cap` steps.
pub fn rollout_return(
    mdp: &TabularMdp,
    policy: &Policy,
    start: usize,
    cap: usize,
    seed: u64,
    mode: RolloutMode,
) -> Result<Rollout> {
    policy.check_shape(mdp)?;
    if cap == 0 {
        return Err(Error::invalid("rollout cap must be at least 1"));
    }
    if start >= mdp.n_states() {
        return Err(Error::invalid(format!("start state {start} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = mdp.discount();
    let mut out = Rollout {
        undiscounted: 0.0,
        discounted: 0.0,
        steps: 0,
    };
    let mut weight = 1.0;
    let mut s = start;
    while out.steps < cap && !mdp.is_terminal(s) {
        let a = match mode {
            RolloutMode::Greedy => policy.greedy_action(s),
            RolloutMode::Stochastic => {
                sample_index(&mut rng, policy.row(s).iter().copied().enumerate())
            }
        };
        let r = mdp.reward(s, a);
        out.undiscounted += r;
        out.discounted += weight * r;
        weight *= gamma;
        let next = mdp.next(s, a);
        s = if next.len() == 1 {
            next[0].0
        } else {
            sample_index(&mut rng, next.iter().copied())
        };
        out.steps += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_state(reward: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 2, vec![vec![(0, 1.0)]; 2], vec![reward; 2], gamma, vec![false], 0)
            .unwrap()
    }

    /// s0 --a0 (+1)--> terminal, s0 --a1 (0)--> s0.
    fn chain() -> TabularMdp {
        TabularMdp::new(
            2,
            2,
            vec![vec![(1, 1.0)], vec![(0, 1.0)], vec![(1, 1.0)], vec![(1, 1.0)]],
            vec![1.0, 0.0, 0.0, 0.0],
            0.9,
            vec![false, true],
            0,
        )
        .unwrap()
    }

    #[test]
    fn single_state_value_is_geometric_series() {
        let mdp = single_state(1.0, 0.9);
        let (_, v) = exact_policy_evaluation(&mdp, &Policy::uniform(1, 2), 1e-12).unwrap();
        assert!((v.get(0) - 10.0).abs() < 1e-10);
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let mdp = single_state(0.0, 0.9);
        let (q, v) = exact_policy_evaluation(&mdp, &Policy::uniform(1, 2), 1e-10).unwrap();
        assert!(q.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(v.get(0), 0.0);
        let (q, v, pi) = value_iteration(&mdp, 1e-10).unwrap();
        assert!(q.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(v.get(0), 0.0);
        assert!(pi.is_deterministic());
    }

    #[test]
    fn one_step_reach_has_value_one() {
        let (_, v, pi) = value_iteration(&chain(), 1e-12).unwrap();
        assert!((v.get(0) - 1.0).abs() < 1e-12);
        assert_eq!(pi.greedy_action(0), 0);
    }

    #[test]
    fn bad_tolerance_and_shape_are_rejected() {
        let mdp = chain();
        assert!(exact_policy_evaluation(&mdp, &Policy::uniform(2, 2), 0.0).is_err());
        assert!(exact_policy_evaluation(&mdp, &Policy::uniform(3, 2), 1e-6).is_err());
    }

    #[test]
    fn cap_matches_contraction_formula() {
        // ln(1e-8 * 0.1 / 1) / ln 0.9 = 196.6..., so 197 + 100
        assert_eq!(iteration_cap(1e-8, 0.9, 1.0), 297);
        assert_eq!(iteration_cap(1e-8, 0.0, 1.0), 101);
    }

    #[test]
    fn greedy_policy_tie_break_and_mask() {
        let q = QTable::new(2, 3, vec![1.0, 1.0, 1.0, 5.0, 2.0, 3.0], 0.9).unwrap();
        let pi = greedy_policy(&q, None).unwrap();
        assert_eq!(pi.greedy_action(0), 0);
        assert_eq!(pi.greedy_action(1), 0);
        let mask = SupportMask::new(2, 3, vec![true, true, true, false, true, true]).unwrap();
        let pi = greedy_policy(&q, Some(&mask)).unwrap();
        assert_eq!(pi.greedy_action(1), 2);
        let empty = SupportMask::new(2, 3, vec![true, true, true, false, false, false]).unwrap();
        match greedy_policy(&q, Some(&empty)) {
            Err(Error::DegenerateSupport { state, .. }) => assert_eq!(state, 1),
            other => panic!("expected degenerate support, got {other:?}"),
        }
    }

    #[test]
    fn in_sample_error_mode_names_the_state() {
        let mdp = chain();
        // s0 may only loop on itself via a1: fine. Allow a0 into the terminal: fine.
        let mask = SupportMask::new(2, 2, vec![false, true, false, false]).unwrap();
        let (_, v, pi) =
            in_sample_value_iteration_with(&mdp, &mask, UnvisitedFallback::Error, 1e-10).unwrap();
        assert!(v.get(0).abs() < 1e-9);
        assert_eq!(pi.row(0), &[0.0, 1.0]);

        // Three states: s0 -> s1 where s1 is never observed.
        let mdp = TabularMdp::new(
            3,
            1,
            vec![vec![(1, 1.0)], vec![(2, 1.0)], vec![(2, 1.0)]],
            vec![1.0, 1.0, 0.0],
            0.5,
            vec![false, false, true],
            0,
        )
        .unwrap();
        let mask = SupportMask::new(3, 1, vec![true, false, false]).unwrap();
        match in_sample_value_iteration_with(&mdp, &mask, UnvisitedFallback::Error, 1e-10) {
            Err(Error::DegenerateSupport { state, .. }) => assert_eq!(state, 1),
            other => panic!("expected degenerate support, got {other:?}"),
        }
        let (_, v, _) = in_sample_value_iteration(&mdp, &mask, 1e-12).unwrap();
        // pessimistic: r_min / (1 - γ) = 1 / 0.5
        assert!((v.get(1) - 2.0).abs() < 1e-12);
        assert!((v.get(0) - (1.0 + 0.5 * 2.0)).abs() < 1e-10);
    }

    #[test]
    fn rollout_counts_rewards_and_steps() {
        let mdp = chain();
        let go = Policy::deterministic(2, &[0, 0]).unwrap();
        let r = rollout_return(&mdp, &go, 0, 30, 1, RolloutMode::Greedy).unwrap();
        assert_eq!((r.undiscounted, r.steps), (1.0, 1));
        let stay = Policy::deterministic(2, &[1, 0]).unwrap();
        let r = rollout_return(&mdp, &stay, 0, 7, 1, RolloutMode::Greedy).unwrap();
        assert_eq!((r.undiscounted, r.steps), (0.0, 7));
        assert!(rollout_return(&mdp, &stay, 0, 0, 1, RolloutMode::Greedy).is_err());
    }
}
