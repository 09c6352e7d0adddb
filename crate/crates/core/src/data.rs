//! Offline datasets: behavior policies, collection, filters and the
//! empirical quantities estimated from a dataset (support, behavior policy,
//! maximum-likelihood MDP).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{sample_index, value_iteration};
use crate::{Error, Policy, Result, SupportMask, TabularMdp};

/// Action probabilities of the inferior behavior policy over
/// (up, down, right, left).
pub const INFERIOR_PROBS: [f64; 4] = [0.1, 0.4, 0.1, 0.4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub done: bool,
}

/// Free-form description of where a dataset came from.
pub type Provenance = BTreeMap<String, serde_json::Value>;

/// Return summary of one trajectory slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySummary {
    pub start: usize,
    pub len: usize,
    pub undiscounted_return: f64,
}

/// Ordered transitions split into trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    transitions: Vec<Transition>,
    trajectory_starts: Vec<usize>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Header {
    provenance: Provenance,
    trajectory_starts: Vec<usize>,
}

impl Dataset {
    /// Checks boundary ordering and within-trajectory continuity.
    pub fn new(
        transitions: Vec<Transition>,
        trajectory_starts: Vec<usize>,
        provenance: Provenance,
    ) -> Result<Self> {
        if transitions.is_empty() {
            if !trajectory_starts.is_empty() {
                return Err(Error::invalid("empty dataset cannot have trajectory starts"));
            }
        } else {
            if trajectory_starts.first() != Some(&0) {
                return Err(Error::invalid("first trajectory must start at 0"));
            }
            if trajectory_starts.windows(2).any(|w| w[0] >= w[1])
                || *trajectory_starts.last().unwrap() >= transitions.len()
            {
                return Err(Error::invalid("trajectory starts must increase within bounds"));
            }
        }
        let ds = Self {
            transitions,
            trajectory_starts,
            provenance,
        };
        for traj in ds.trajectories() {
            if let Some(k) = traj.windows(2).position(|w| w[0].s_next != w[1].s) {
                return Err(Error::invalid(format!(
                    "trajectory breaks continuity after step {k}"
                )));
            }
        }
        Ok(ds)
    }

    pub fn empty(provenance: Provenance) -> Self {
        Self {
            transitions: Vec::new(),
            trajectory_starts: Vec::new(),
            provenance,
        }
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn trajectory_starts(&self) -> &[usize] {
        &self.trajectory_starts
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectory_starts.len()
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &[Transition]> + '_ {
        let ends = self
            .trajectory_starts
            .iter()
            .skip(1)
            .copied()
            .chain(std::iter::once(self.transitions.len()));
        self.trajectory_starts
            .iter()
            .zip(ends)
            .map(move |(&a, b)| &self.transitions[a..b])
    }

    pub fn summaries(&self) -> Vec<TrajectorySummary> {
        self.trajectory_starts
            .iter()
            .zip(self.trajectories())
            .map(|(&start, t)| TrajectorySummary {
                start,
                len: t.len(),
                undiscounted_return: t.iter().map(|x| x.r).sum(),
            })
            .collect()
    }

    /// Appends `other` after `self`, keeping both trajectory structures.
    pub fn concat(&self, other: &Dataset, provenance: Provenance) -> Dataset {
        let offset = self.transitions.len();
        let mut transitions = self.transitions.clone();
        transitions.extend_from_slice(&other.transitions);
        let mut starts = self.trajectory_starts.clone();
        starts.extend(other.trajectory_starts.iter().map(|s| s + offset));
        Dataset {
            transitions,
            trajectory_starts: starts,
            provenance,
        }
    }

    fn from_trajectories<'a>(
        trajs: impl IntoIterator<Item = &'a [Transition]>,
        provenance: Provenance,
    ) -> Dataset {
        let mut transitions = Vec::new();
        let mut starts = Vec::new();
        for t in trajs.into_iter().filter(|t| !t.is_empty()) {
            starts.push(transitions.len());
            transitions.extend_from_slice(t);
        }
        Dataset {
            transitions,
            trajectory_starts: starts,
            provenance,
        }
    }

    /// JSON-lines: a header line with provenance and trajectory starts,
    /// then one transition object per line.
    pub fn write_jsonl(&self, writer: impl Write) -> Result<()> {
        let mut w = BufWriter::new(writer);
        let header = Header {
            provenance: self.provenance.clone(),
            trajectory_starts: self.trajectory_starts.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for t in &self.transitions {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(reader: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::invalid("dataset file is empty")),
        };
        let mut transitions = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            transitions.push(serde_json::from_str(&line)?);
        }
        Self::new(transitions, header.trajectory_starts, header.provenance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_jsonl(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(std::fs::File::open(path)?)
    }

    /// Flat CSV with columns `s,a,r,s_next,done`.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for t in &self.transitions {
            w.serialize(t)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Largest state index plus one, over `s` and `s_next`.
    pub fn state_bound(&self) -> usize {
        self.transitions
            .iter()
            .map(|t| t.s.max(t.s_next) + 1)
            .max()
            .unwrap_or(0)
    }
}

/// Which behavior policy generates a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehaviorKind {
    /// (0.1, 0.4, 0.1, 0.4) over (up, down, right, left) everywhere.
    Inferior,
    Uniform,
    /// Greedy policy of value iteration on the true MDP.
    Expert,
    /// The same action distribution at every state.
    Custom(Vec<f64>),
}

impl BehaviorKind {
    pub fn name(&self) -> &'static str {
        match self {
            BehaviorKind::Inferior => "inferior",
            BehaviorKind::Uniform => "uniform",
            BehaviorKind::Expert => "expert",
            BehaviorKind::Custom(_) => "custom",
        }
    }
}

impl std::str::FromStr for BehaviorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inferior" => Ok(BehaviorKind::Inferior),
            "uniform" | "random" => Ok(BehaviorKind::Uniform),
            "expert" => Ok(BehaviorKind::Expert),
            other => {
                let probs: std::result::Result<Vec<f64>, _> = other
                    .strip_prefix("custom:")
                    .ok_or_else(|| Error::invalid(format!("unknown behavior `{other}`")))?
                    .split(',')
                    .map(str::parse)
                    .collect();
                probs
                    .map(BehaviorKind::Custom)
                    .map_err(|e| Error::invalid(format!("bad custom probabilities: {e}")))
            }
        }
    }
}

pub fn make_behavior_policy(kind: &BehaviorKind, mdp: &TabularMdp) -> Result<Policy> {
    let n = mdp.n_states();
    match kind {
        BehaviorKind::Inferior => {
            if mdp.n_actions() != INFERIOR_PROBS.len() {
                return Err(Error::invalid("the inferior policy needs exactly four actions"));
            }
            Policy::stationary(n, &INFERIOR_PROBS)
        }
        BehaviorKind::Uniform => Ok(Policy::uniform(n, mdp.n_actions())),
        BehaviorKind::Expert => Ok(value_iteration(mdp, 1e-10)?.2),
        BehaviorKind::Custom(row) => {
            if row.len() != mdp.n_actions() {
                return Err(Error::invalid("custom row length differs from the action count"));
            }
            Policy::stationary(n, row)
        }
    }
}

/// Where each collected episode starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Restart {
    FixedStart,
    /// Uniform over the MDP's restart states.
    RandomRestart,
}

impl std::str::FromStr for Restart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" | "fixed-start" => Ok(Restart::FixedStart),
            "random" | "random-restart" => Ok(Restart::RandomRestart),
            other => Err(Error::invalid(format!("unknown restart mode `{other}`"))),
        }
    }
}

/// Samples episodes until `n_transitions` are recorded, truncating the last
/// episode. Episodes end on terminal entry or after `episode_cap` steps.
pub fn collect(
    mdp: &TabularMdp,
    behavior: &Policy,
    n_transitions: usize,
    episode_cap: usize,
    restart: Restart,
    seed: u64,
) -> Result<Dataset> {
    behavior.check_shape(mdp)?;
    if n_transitions == 0 || episode_cap == 0 {
        return Err(Error::invalid("n_transitions and episode_cap must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(n_transitions);
    let mut starts = Vec::new();
    let restarts = mdp.restart_states();
    while transitions.len() < n_transitions {
        let mut s = match restart {
            Restart::FixedStart => mdp.start_state(),
            Restart::RandomRestart => restarts[rng.gen_range(0..restarts.len())],
        };
        starts.push(transitions.len());
        for _ in 0..episode_cap {
            if transitions.len() == n_transitions {
                break;
            }
            let a = sample_index(&mut rng, behavior.row(s).iter().copied().enumerate());
            let next = mdp.next(s, a);
            let s_next = if next.len() == 1 {
                next[0].0
            } else {
                sample_index(&mut rng, next.iter().copied())
            };
            let done = mdp.is_terminal(s_next);
            transitions.push(Transition {
                s,
                a,
                r: mdp.reward(s, a),
                s_next,
                done,
            });
            if done {
                break;
            }
            s = s_next;
        }
    }
    let mut provenance = Provenance::new();
    provenance.insert("n".into(), n_transitions.into());
    provenance.insert("cap".into(), episode_cap.into());
    provenance.insert("seed".into(), seed.into());
    provenance.insert(
        "restart".into(),
        serde_json::to_value(restart).expect("restart serializes"),
    );
    Dataset::new(transitions, starts, provenance)
}

/// Removes every transition taking `action` from a state in `region`.
/// Each removal cuts its trajectory in two.
pub fn missing_action_filter(dataset: &Dataset, region: &[usize], action: usize) -> Dataset {
    let removed = |t: &Transition| t.a == action && region.contains(&t.s);
    let mut pieces: Vec<&[Transition]> = Vec::new();
    for traj in dataset.trajectories() {
        pieces.extend(traj.split(removed));
    }
    let mut provenance = dataset.provenance.clone();
    provenance.insert(
        "filter".into(),
        format!("missing-action:{}-states:{action}", region.len()).into(),
    );
    Dataset::from_trajectories(pieces, provenance)
}

/// Pairs observed at least once.
pub fn empirical_support(dataset: &Dataset, n_states: usize, n_actions: usize) -> SupportMask {
    let mut mask = SupportMask::new(n_states, n_actions, vec![false; n_states * n_actions])
        .expect("shape is consistent");
    for t in dataset.transitions() {
        mask.set(t.s, t.a, true);
    }
    mask
}

/// How the estimated behavior policy fills states with no data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    /// Unvisited rows stay undefined; reading them is an error.
    None,
    UniformOnUnvisited,
}

/// State-conditional action frequencies.
#[derive(Debug, Clone)]
pub struct BehaviorEstimate {
    policy: Policy,
    visits: Vec<usize>,
    smoothing: Smoothing,
}

impl BehaviorEstimate {
    pub fn visits(&self, s: usize) -> usize {
        self.visits[s]
    }

    pub fn row(&self, s: usize) -> Result<&[f64]> {
        if self.visits[s] == 0 && self.smoothing == Smoothing::None {
            return Err(Error::degenerate(s, "state never visited in the dataset"));
        }
        Ok(self.policy.row(s))
    }

    /// The full policy; with `Smoothing::None` this fails on the first
    /// unvisited state.
    pub fn policy(&self) -> Result<&Policy> {
        if self.smoothing == Smoothing::None {
            if let Some(s) = self.visits.iter().position(|&v| v == 0) {
                return Err(Error::degenerate(s, "state never visited in the dataset"));
            }
        }
        Ok(&self.policy)
    }

    /// The policy with unvisited rows uniform, whatever the smoothing mode.
    pub fn smoothed(&self) -> &Policy {
        &self.policy
    }
}

pub fn empirical_behavior_policy(
    dataset: &Dataset,
    n_states: usize,
    n_actions: usize,
    smoothing: Smoothing,
) -> BehaviorEstimate {
    let mut counts = vec![0usize; n_states * n_actions];
    let mut visits = vec![0usize; n_states];
    for t in dataset.transitions() {
        counts[t.s * n_actions + t.a] += 1;
        visits[t.s] += 1;
    }
    let mut probs = vec![0.0; n_states * n_actions];
    for s in 0..n_states {
        let row = &mut probs[s * n_actions..(s + 1) * n_actions];
        if visits[s] == 0 {
            row.fill(1.0 / n_actions as f64);
        } else {
            for (a, p) in row.iter_mut().enumerate() {
                *p = counts[s * n_actions + a] as f64 / visits[s] as f64;
            }
        }
    }
    BehaviorEstimate {
        policy: Policy::from_rows_unchecked(n_states, n_actions, probs),
        visits,
        smoothing,
    }
}

/// Maximum-likelihood MDP from transition counts.
///
/// Unobserved pairs of non-terminal states self-loop with
/// `pessimistic_reward`, defaulting to the template's smallest reward.
/// Discount, terminal mask, start and restart states come from `template`.
pub fn empirical_mdp(
    dataset: &Dataset,
    n_states: usize,
    n_actions: usize,
    template: &TabularMdp,
    pessimistic_reward: Option<f64>,
) -> Result<TabularMdp> {
    if template.n_states() != n_states || template.n_actions() != n_actions {
        return Err(Error::invalid("template MDP shape differs from the requested shape"));
    }
    let r_min = pessimistic_reward.unwrap_or_else(|| template.reward_range().0);
    let pairs = n_states * n_actions;
    let mut next_counts: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); pairs];
    let mut reward_sum = vec![0.0; pairs];
    let mut count = vec![0usize; pairs];
    for t in dataset.transitions() {
        if t.s >= n_states || t.s_next >= n_states || t.a >= n_actions {
            return Err(Error::invalid("transition index out of range"));
        }
        let idx = t.s * n_actions + t.a;
        *next_counts[idx].entry(t.s_next).or_default() += 1;
        reward_sum[idx] += t.r;
        count[idx] += 1;
    }
    let mut rows = Vec::with_capacity(pairs);
    let mut reward = Vec::with_capacity(pairs);
    for s in 0..n_states {
        for a in 0..n_actions {
            let idx = s * n_actions + a;
            if template.is_terminal(s) {
                rows.push(vec![(s, 1.0)]);
                reward.push(0.0);
            } else if count[idx] == 0 {
                rows.push(vec![(s, 1.0)]);
                reward.push(r_min);
            } else {
                let n = count[idx] as f64;
                rows.push(
                    next_counts[idx]
                        .iter()
                        .map(|(&next, &c)| (next, c as f64 / n))
                        .collect(),
                );
                reward.push(reward_sum[idx] / n);
            }
        }
    }
    let mdp = TabularMdp::new(
        n_states,
        n_actions,
        rows,
        reward,
        template.discount(),
        template.terminal_mask().to_vec(),
        template.start_state(),
    )?;
    mdp.with_restart_states(template.restart_states().to_vec())
}

/// Resamples transitions with replacement; each draw is its own trajectory.
pub fn bootstrap_resample(dataset: &Dataset, seed: u64) -> Dataset {
    let n = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transitions: Vec<Transition> = (0..n)
        .map(|_| dataset.transitions[rng.gen_range(0..n)])
        .collect();
    let mut provenance = dataset.provenance.clone();
    provenance.insert("bootstrap_seed".into(), seed.into());
    Dataset {
        trajectory_starts: (0..transitions.len()).collect(),
        transitions,
        provenance,
    }
}

/// Return band selected by [`percentile_filter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Top,
    Median,
    Bottom,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Top, Band::Median, Band::Bottom];

    pub fn name(self) -> &'static str {
        match self {
            Band::Top => "top",
            Band::Median => "median",
            Band::Bottom => "bottom",
        }
    }
}

/// `⌈fraction · K⌉` for `K` trajectories, at least one.
pub fn band_size(fraction: f64, n_trajectories: usize) -> usize {
    // absorb float noise such as 0.05 * 20 = 1.0000000000000002
    let k = (fraction * n_trajectories as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n_trajectories)
}

/// Keeps `⌈fraction · K⌉` trajectories from one band of the return ranking.
///
/// Trajectories are ranked by undiscounted return, highest first, ties in
/// dataset order. The median band is centered on rank `⌊K/2⌋`. Selected
/// trajectories keep their original dataset order.
pub fn percentile_filter(dataset: &Dataset, band: Band, fraction: f64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let summaries = dataset.summaries();
    let total = summaries.len();
    if total == 0 {
        return Err(Error::invalid("dataset has no trajectories"));
    }
    let k = band_size(fraction, total);
    let mut ranked: Vec<usize> = (0..total).collect();
    ranked.sort_by(|&i, &j| {
        summaries[j]
            .undiscounted_return
            .total_cmp(&summaries[i].undiscounted_return)
    });
    let lo = match band {
        Band::Top => 0,
        Band::Bottom => total - k,
        Band::Median => (total / 2).saturating_sub(k / 2).min(total - k),
    };
    let mut keep: Vec<usize> = ranked[lo..lo + k].to_vec();
    keep.sort_unstable();
    let trajs: Vec<&[Transition]> = dataset.trajectories().collect();
    let mut provenance = dataset.provenance.clone();
    provenance.insert("band".into(), band.name().into());
    provenance.insert("fraction".into(), fraction.into());
    Ok(Dataset::from_trajectories(
        keep.into_iter().map(|i| trajs[i]),
        provenance,
    ))
}
