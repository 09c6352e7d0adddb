//! Experiment grids, dataset recipes and the reports behind the CLI.
//!
//! Everything here is deterministic given its spec. Runs of a grid execute
//! on a rayon pool and are merged in plan order, so the written CSV and
//! JSON files do not depend on the worker count. Wall-clock timings only
//! go to the `timing.log` sidecar.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    band_size, collect, empirical_behavior_policy, empirical_support, make_behavior_policy,
    missing_action_filter, percentile_filter, Band, BehaviorKind, Dataset, Provenance, Restart,
    Smoothing,
};
use crate::dp::{
    in_sample_value_iteration, in_sample_value_iteration_with, rollout_return, value_iteration,
    RolloutMode, UnvisitedFallback,
};
use crate::envs::{build_four_room, build_gridworld, find_rooms, Action, GridSpec, GridWorld, Rooms};
use crate::seed::derive_seed;
use crate::solvers::{
    run_br, run_cpi, run_cpi_re, BrMode, Ensemble, EvalMode, EvalNoise, LearningCurve,
    OfflineProblem, SolverConfig,
};
use crate::theory::{
    check_improvement_with, check_softmax_optimality, check_theorem1_suite, BoundRecord,
    BoundSupport, ImprovementReport, RandomMdpSpec, SoftmaxReport,
};
use crate::{Error, Policy, QTable, Result, SupportMask, TabularMdp};

pub const DEFAULT_DISCOUNT: f64 = 0.9;
pub const DEFAULT_CAP: usize = 30;
pub const DEFAULT_TAUS: [f64; 5] = [0.05, 0.1, 0.5, 1.0, 2.0];

/// Tolerance of every fixed-point solve made by the runner.
const SOLVE_TOL: f64 = 1e-10;

/// Redraws allowed when a recipe requires the optimal path to be covered.
pub const MAX_COVERAGE_ATTEMPTS: usize = 64;

const STREAM_PART: u64 = 0x5041;
const STREAM_COVERAGE: u64 = 0x434f;

/// A gridworld plus its rooms when the map has them.
#[derive(Debug, Clone)]
pub struct Environment {
    pub name: String,
    pub grid: GridWorld,
    pub rooms: Option<Rooms>,
}

impl Environment {
    /// `grid7x7`, `fourroom`, or a path to a gridworld JSON file.
    pub fn load(id: &str, discount: f64) -> Result<Self> {
        match id {
            "grid7x7" => Ok(Self {
                name: id.into(),
                grid: build_gridworld(&GridSpec::grid7x7(), discount)?,
                rooms: None,
            }),
            "fourroom" => {
                let (grid, rooms) = build_four_room(discount)?;
                Ok(Self {
                    name: id.into(),
                    grid,
                    rooms: Some(rooms),
                })
            }
            path => {
                if !Path::new(path).is_file() {
                    return Err(Error::InvalidSpec(format!(
                        "unknown environment `{path}` (expected grid7x7, fourroom or a JSON file)"
                    )));
                }
                let grid = build_gridworld(&GridSpec::load(path)?, discount)?;
                let rooms = find_rooms(&grid).ok();
                Ok(Self {
                    name: path.into(),
                    grid,
                    rooms,
                })
            }
        }
    }

    pub fn mdp(&self) -> &TabularMdp {
        self.grid.mdp()
    }

    fn region(&self, name: &str) -> Result<Vec<usize>> {
        let rooms = self
            .rooms
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec(format!("environment `{}` has no rooms", self.name)))?;
        let region = rooms
            .by_name(name)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown region `{name}`")))?;
        Ok(region.states().to_vec())
    }
}

/// Dataset post-processing step, written `missing-action:<region>:<action>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Filter {
    MissingAction { region: String, action: Action },
}

impl std::str::FromStr for Filter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["missing-action", region, action] => Ok(Filter::MissingAction {
                region: (*region).to_string(),
                action: action.parse()?,
            }),
            _ => Err(Error::invalid(format!(
                "bad filter `{s}` (expected missing-action:<region>:<action>)"
            ))),
        }
    }
}

impl TryFrom<String> for Filter {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Filter::MissingAction { region, action } => {
                write!(f, "missing-action:{region}:{action}")
            }
        }
    }
}

impl From<Filter> for String {
    fn from(f: Filter) -> String {
        f.to_string()
    }
}

/// One behavior policy's share of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPart {
    pub behavior: BehaviorKind,
    pub n: usize,
    /// Defaults to the fixed start for the expert and random restarts
    /// otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restart: Option<Restart>,
}

impl DatasetPart {
    pub fn new(behavior: BehaviorKind, n: usize) -> Self {
        Self {
            behavior,
            n,
            restart: None,
        }
    }

    pub fn restart(&self) -> Restart {
        self.restart.unwrap_or(match self.behavior {
            BehaviorKind::Expert => Restart::FixedStart,
            _ => Restart::RandomRestart,
        })
    }
}

fn default_cap() -> usize {
    DEFAULT_CAP
}

/// How to build a dataset: parts are collected in order and concatenated,
/// then filters apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecipe {
    pub parts: Vec<DatasetPart>,
    #[serde(default = "default_cap")]
    pub cap: usize,
    /// Fixed collection seed; when absent each run seed collects its own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub filters: Vec<Filter>,
    /// Redraw (with derived seeds) until the data support holds an optimal
    /// start-to-goal path.
    #[serde(default)]
    pub require_optimal_path: bool,
}

pub const RECIPE_PRESETS: [&str; 6] = [
    "inferior",
    "expert",
    "random",
    "mixed",
    "missing-action",
    "expert-inferior",
];

impl DatasetRecipe {
    pub fn single(behavior: BehaviorKind, n: usize) -> Self {
        Self {
            parts: vec![DatasetPart::new(behavior, n)],
            cap: DEFAULT_CAP,
            seed: None,
            filters: Vec::new(),
            require_optimal_path: false,
        }
    }

    /// Named recipes with 10k transitions each:
    ///
    /// * `inferior`: the (0.1, 0.4, 0.1, 0.4) policy, optimal path required
    /// * `expert`, `random`: optimal and uniform policies
    /// * `mixed`: 5k expert then 5k uniform
    /// * `missing-action`: `mixed` without `down` in the upper-left room
    /// * `expert-inferior`: 5k expert then 5k inferior
    pub fn preset(name: &str) -> Result<Self> {
        let half = |a, b| Self {
            parts: vec![DatasetPart::new(a, 5000), DatasetPart::new(b, 5000)],
            ..Self::single(BehaviorKind::Uniform, 0)
        };
        Ok(match name {
            "inferior" => Self {
                require_optimal_path: true,
                ..Self::single(BehaviorKind::Inferior, 10_000)
            },
            "expert" => Self::single(BehaviorKind::Expert, 10_000),
            "random" => Self::single(BehaviorKind::Uniform, 10_000),
            "mixed" => half(BehaviorKind::Expert, BehaviorKind::Uniform),
            "missing-action" => Self {
                filters: vec![Filter::MissingAction {
                    region: "upper-left".into(),
                    action: Action::Down,
                }],
                ..half(BehaviorKind::Expert, BehaviorKind::Uniform)
            },
            "expert-inferior" => half(BehaviorKind::Expert, BehaviorKind::Inferior),
            other => {
                return Err(Error::InvalidSpec(format!(
                    "unknown dataset preset `{other}` (known: {})",
                    RECIPE_PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::InvalidSpec("dataset recipe has no parts".into()));
        }
        if self.cap == 0 || self.parts.iter().any(|p| p.n == 0) {
            return Err(Error::InvalidSpec("cap and part sizes must be positive".into()));
        }
        Ok(())
    }

    /// Distinct behavior kinds across the parts.
    pub fn behavior_kinds(&self) -> usize {
        self.parts
            .iter()
            .map(|p| serde_json::to_string(&p.behavior).unwrap_or_default())
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// True when in-sample value iteration on `support` reaches the optimal
/// start value of the full MDP.
pub fn optimal_path_covered(mdp: &TabularMdp, support: &SupportMask) -> Result<bool> {
    let start = mdp.start_state();
    let (_, full, _) = value_iteration(mdp, SOLVE_TOL)?;
    let (_, restricted, _) = in_sample_value_iteration(mdp, support, SOLVE_TOL)?;
    Ok(restricted.get(start) >= full.get(start) - 1e-8)
}

fn part_seed(seed: u64, part: usize) -> u64 {
    if part == 0 {
        seed
    } else {
        derive_seed(seed, STREAM_PART, part as u64)
    }
}

fn collect_once(env: &Environment, recipe: &DatasetRecipe, seed: u64) -> Result<Dataset> {
    let mdp = env.mdp();
    let mut out: Option<Dataset> = None;
    for (i, part) in recipe.parts.iter().enumerate() {
        let behavior = make_behavior_policy(&part.behavior, mdp)?;
        let ds = collect(mdp, &behavior, part.n, recipe.cap, part.restart(), part_seed(seed, i))?;
        out = Some(match out {
            None => ds,
            Some(prev) => prev.concat(&ds, Provenance::new()),
        });
    }
    let mut ds = out.ok_or_else(|| Error::InvalidSpec("dataset recipe has no parts".into()))?;
    for filter in &recipe.filters {
        match filter {
            Filter::MissingAction { region, action } => {
                ds = missing_action_filter(&ds, &env.region(region)?, action.index());
            }
        }
    }
    Ok(ds)
}

/// Collects `recipe` with `seed` on `env` and stamps the provenance.
pub fn build_dataset(env: &Environment, recipe: &DatasetRecipe, seed: u64) -> Result<Dataset> {
    recipe.validate()?;
    let seed = recipe.seed.unwrap_or(seed);
    let attempts = if recipe.require_optimal_path {
        MAX_COVERAGE_ATTEMPTS
    } else {
        1
    };
    for attempt in 0..attempts {
        let attempt_seed = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, STREAM_COVERAGE, attempt as u64)
        };
        let mut ds = collect_once(env, recipe, attempt_seed)?;
        if recipe.require_optimal_path {
            let mdp = env.mdp();
            let support = empirical_support(&ds, mdp.n_states(), mdp.n_actions());
            if !optimal_path_covered(mdp, &support)? {
                continue;
            }
        }
        let mut provenance = Provenance::new();
        provenance.insert("env".into(), env.name.clone().into());
        provenance.insert("recipe".into(), serde_json::to_value(recipe)?);
        provenance.insert("seed".into(), seed.into());
        provenance.insert("attempt".into(), attempt.into());
        provenance.insert("collection_seed".into(), attempt_seed.into());
        provenance.insert("transitions".into(), ds.len().into());
        provenance.insert("trajectories".into(), ds.n_trajectories().into());
        ds.provenance = provenance;
        return Ok(ds);
    }
    Err(Error::InvalidSpec(format!(
        "no dataset covering an optimal path within {attempts} draws from seed {seed}"
    )))
}

/// Return statistics of a dataset's trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub transitions: usize,
    pub trajectories: usize,
    pub return_mean: f64,
    pub return_min: f64,
    pub return_max: f64,
}

impl DatasetStats {
    pub fn of(ds: &Dataset) -> Self {
        let returns: Vec<f64> = ds.summaries().iter().map(|s| s.undiscounted_return).collect();
        let n = returns.len().max(1) as f64;
        Self {
            transitions: ds.len(),
            trajectories: ds.n_trajectories(),
            return_mean: returns.iter().sum::<f64>() / n,
            return_min: returns.iter().copied().fold(f64::INFINITY, f64::min),
            return_max: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} transitions, {} trajectories, return mean {:.3} min {} max {}",
            self.transitions, self.trajectories, self.return_mean, self.return_min, self.return_max
        )
    }
}

/// Where a spec gets its data: a preset name, a dataset file or a recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Preset(String),
    File { file: PathBuf },
    Recipe(DatasetRecipe),
}

impl DatasetSource {
    pub fn recipe(&self) -> Result<Option<DatasetRecipe>> {
        match self {
            DatasetSource::Preset(name) => DatasetRecipe::preset(name).map(Some),
            DatasetSource::File { .. } => Ok(None),
            DatasetSource::Recipe(r) => Ok(Some(r.clone())),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DatasetSource::File { file } if !file.is_file() => Err(Error::InvalidSpec(format!(
                "dataset file {} does not exist",
                file.display()
            ))),
            DatasetSource::File { .. } => Ok(()),
            _ => self.recipe()?.map_or(Ok(()), |r| r.validate()),
        }
    }

    /// The seed the dataset is collected with for run seed `seed`.
    pub fn dataset_seed(&self, seed: u64) -> Result<Option<u64>> {
        Ok(match self.recipe()? {
            None => None,
            Some(r) => Some(r.seed.unwrap_or(seed)),
        })
    }

    pub fn build(&self, env: &Environment, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSource::File { file } => Dataset::load(file),
            _ => {
                let recipe = self.recipe()?.expect("non-file sources have a recipe");
                build_dataset(env, &recipe, seed)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Cpi,
    Br,
    CpiRe,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Cpi => "cpi",
            Algorithm::Br => "br",
            Algorithm::CpiRe => "cpi-re",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpi" => Ok(Algorithm::Cpi),
            "br" => Ok(Algorithm::Br),
            "cpi-re" => Ok(Algorithm::CpiRe),
            other => Err(Error::invalid(format!("unknown algorithm `{other}`"))),
        }
    }
}

fn default_discount() -> f64 {
    DEFAULT_DISCOUNT
}

fn default_lambdas() -> Vec<f64> {
    vec![1.0]
}

fn default_eval_mode() -> EvalMode {
    EvalMode::FittedOnEmpiricalMdp
}

fn default_eval_episodes() -> usize {
    20
}

fn default_name() -> String {
    "experiment".into()
}

/// A grid of runs: algorithms × τ × λ × seeds on one environment and one
/// dataset recipe.
///
/// BR ignores the λ grid and is recorded with λ = 0, the mixed-step
/// weight at which CPI's update coincides with BR's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub env: String,
    #[serde(default = "default_discount")]
    pub discount: f64,
    pub dataset: DatasetSource,
    pub algorithms: Vec<Algorithm>,
    pub taus: Vec<f64>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_mode")]
    pub eval_mode: EvalMode,
    #[serde(default)]
    pub noise: EvalNoise,
    #[serde(default)]
    pub br_mode: BrMode,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_cap")]
    pub eval_cap: usize,
    /// Output directory; not part of the spec hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

pub const EXPERIMENT_PRESETS: [&str; 5] = [
    "grid7x7-inferior",
    "fourroom-expert",
    "fourroom-random",
    "fourroom-missing-action",
    "grid7x7-ensemble",
];

impl ExperimentSpec {
    pub fn new(env: &str, dataset: DatasetSource, algorithms: Vec<Algorithm>) -> Self {
        Self {
            name: default_name(),
            env: env.into(),
            discount: DEFAULT_DISCOUNT,
            dataset,
            algorithms,
            taus: DEFAULT_TAUS.to_vec(),
            lambdas: default_lambdas(),
            iterations: 200,
            seeds: (0..5).collect(),
            eval_mode: default_eval_mode(),
            noise: EvalNoise::None,
            br_mode: BrMode::MultiStep,
            eval_episodes: default_eval_episodes(),
            eval_cap: DEFAULT_CAP,
            output: None,
        }
    }

    /// Ready-made grids:
    ///
    /// * `grid7x7-inferior`: CPI and BR on the inferior dataset, 200 iterations
    /// * `fourroom-{expert,random,missing-action}`: CPI and BR, 300 iterations
    /// * `grid7x7-ensemble`: CPI and CPI-RE under bootstrap evaluation noise
    pub fn preset(name: &str) -> Result<Self> {
        let pair = vec![Algorithm::Cpi, Algorithm::Br];
        let mut spec = match name {
            "grid7x7-inferior" => Self::new("grid7x7", DatasetSource::Preset("inferior".into()), pair),
            "fourroom-expert" | "fourroom-random" | "fourroom-missing-action" => {
                let data = name.trim_start_matches("fourroom-");
                Self {
                    iterations: 300,
                    ..Self::new("fourroom", DatasetSource::Preset(data.into()), pair)
                }
            }
            "grid7x7-ensemble" => Self {
                noise: EvalNoise::Bootstrap,
                taus: vec![1.0],
                ..Self::new(
                    "grid7x7",
                    DatasetSource::Recipe(DatasetRecipe {
                        seed: Some(0),
                        ..DatasetRecipe::preset("inferior")?
                    }),
                    vec![Algorithm::Cpi, Algorithm::CpiRe],
                )
            },
            other => {
                return Err(Error::InvalidSpec(format!(
                    "unknown experiment preset `{other}` (known: {})",
                    EXPERIMENT_PRESETS.join(", ")
                )))
            }
        };
        spec.name = name.into();
        Ok(spec)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidSpec(format!("experiment spec: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidSpec(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpec(msg.into()));
        if self.algorithms.is_empty() {
            return bad("algorithm list is empty");
        }
        if self.taus.is_empty() {
            return bad("tau grid is empty");
        }
        if self.taus.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return bad("tau values must be positive and finite");
        }
        if self.lambdas.is_empty() {
            return bad("lambda grid is empty");
        }
        if self.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad("lambda values must lie in [0, 1]");
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty");
        }
        if self.eval_episodes == 0 || self.eval_cap == 0 {
            return bad("eval_episodes and eval_cap must be positive");
        }
        if self.algorithms.contains(&Algorithm::CpiRe) && self.eval_mode != EvalMode::FittedOnEmpiricalMdp {
            return bad("cpi-re needs fitted evaluation");
        }
        if !matches!(self.env.as_str(), "grid7x7" | "fourroom") && !Path::new(&self.env).is_file() {
            return Err(Error::InvalidSpec(format!("environment file {} does not exist", self.env)));
        }
        self.dataset.validate()
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        spec_hash(&Self {
            output: None,
            ..self.clone()
        })
    }

    /// Runs in output order: algorithms, then τ, then λ, then seeds.
    pub fn plan(&self) -> Vec<RunKey> {
        let mut keys = Vec::new();
        for &algorithm in &self.algorithms {
            for &tau in &self.taus {
                let lambdas: &[f64] = if algorithm == Algorithm::Br { &[0.0] } else { &self.lambdas };
                for &lambda in lambdas {
                    for &seed in &self.seeds {
                        keys.push(RunKey {
                            algorithm,
                            tau,
                            lambda,
                            seed,
                        });
                    }
                }
            }
        }
        keys
    }

    fn solver_config(&self, key: &RunKey) -> SolverConfig {
        SolverConfig {
            lambda: if key.algorithm == Algorithm::Br { 1.0 } else { key.lambda },
            noise: self.noise,
            rng_seed: key.seed,
            ensemble: if key.algorithm == Algorithm::CpiRe {
                Ensemble::On
            } else {
                Ensemble::Off
            },
            br_mode: self.br_mode,
            eval_episodes: self.eval_episodes,
            eval_cap: self.eval_cap,
            ..SolverConfig::new(key.tau, self.iterations, self.eval_mode)
        }
    }
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn spec_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("specs serialize");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub algorithm: Algorithm,
    pub tau: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl RunKey {
    /// File stem of the run's curve CSV.
    pub fn stem(&self) -> String {
        format!(
            "{}_tau{}_lambda{}_seed{}",
            self.algorithm, self.tau, self.lambda, self.seed
        )
    }
}

/// Full-support and in-sample optimal values at the start state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleValues {
    pub full_value_start: f64,
    pub full_return: f64,
    pub in_sample_value_start: f64,
    pub in_sample_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub key: RunKey,
    pub spec_hash: String,
    pub dataset_seed: Option<u64>,
    pub oracle: OracleValues,
    pub final_return: f64,
    #[serde(skip)]
    pub curve: LearningCurve,
    #[serde(skip)]
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    #[serde(flatten)]
    pub key: RunKey,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub spec_hash: String,
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
}

impl GridOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }

    /// Records of one algorithm and τ, in seed order.
    pub fn select(&self, algorithm: Algorithm, tau: f64) -> Vec<&RunRecord> {
        self.records
            .iter()
            .filter(|r| r.key.algorithm == algorithm && r.key.tau == tau)
            .collect()
    }
}

/// Greedy return of `policy` on `mdp` from the start state.
pub fn greedy_return(mdp: &TabularMdp, policy: &Policy, cap: usize) -> Result<f64> {
    Ok(rollout_return(mdp, policy, mdp.start_state(), cap, 0, RolloutMode::Greedy)?.undiscounted)
}

struct Prepared {
    dataset_seed: Option<u64>,
    problem: OfflineProblem,
    oracle: OracleValues,
}

fn prepare(env: &Environment, source: &DatasetSource, seed: u64, cap: usize) -> Result<Prepared> {
    let dataset_seed = source.dataset_seed(seed)?;
    let dataset = source.build(env, seed)?;
    let problem = OfflineProblem::from_dataset(env.mdp().clone(), dataset)?;
    let (_, v_star, pi_star) = value_iteration(env.mdp(), SOLVE_TOL)?;
    let in_sample = problem.in_sample_oracle(cap, SOLVE_TOL)?;
    let start = env.mdp().start_state();
    Ok(Prepared {
        dataset_seed,
        oracle: OracleValues {
            full_value_start: v_star.get(start),
            full_return: greedy_return(env.mdp(), &pi_star, cap)?,
            in_sample_value_start: in_sample.value_start,
            in_sample_return: in_sample.greedy_return,
        },
        problem,
    })
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
}

/// Runs every key of `spec.plan()` on at most `jobs` workers (all
/// processors when `None`). Failed runs are collected, not propagated.
pub fn run_grid(spec: &ExperimentSpec, jobs: Option<usize>) -> Result<GridOutcome> {
    spec.validate()?;
    let env = Environment::load(&spec.env, spec.discount)?;
    let hash = spec.hash();
    let plan = spec.plan();
    pool(jobs)?.install(|| {
        // one problem per distinct dataset seed
        let shared = spec.dataset.recipe()?.map_or(true, |r| r.seed.is_some());
        let data_keys: Vec<u64> = if shared {
            vec![spec.seeds[0]]
        } else {
            spec.seeds.clone()
        };
        let prepared: Vec<(u64, Result<Prepared>)> = data_keys
            .par_iter()
            .map(|&s| (s, prepare(&env, &spec.dataset, s, spec.eval_cap)))
            .collect();
        let lookup = |seed: u64| -> &Result<Prepared> {
            prepared
                .iter()
                .find(|(s, _)| *s == seed)
                .map_or(&prepared[0].1, |(_, p)| p)
        };
        let results: Vec<std::result::Result<RunRecord, RunFailure>> = plan
            .par_iter()
            .map(|key| {
                let fail = |e: &dyn fmt::Display| RunFailure {
                    key: *key,
                    error: e.to_string(),
                };
                let prepared = lookup(key.seed).as_ref().map_err(|e| fail(e))?;
                let config = spec.solver_config(key);
                let started = Instant::now();
                let outcome = match key.algorithm {
                    Algorithm::Cpi => run_cpi(&prepared.problem, &config),
                    Algorithm::Br => run_br(&prepared.problem, &config),
                    Algorithm::CpiRe => run_cpi_re(&prepared.problem, &config),
                };
                let (_, curve) = outcome.map_err(|e| fail(&e))?;
                Ok(RunRecord {
                    key: *key,
                    spec_hash: hash.clone(),
                    dataset_seed: prepared.dataset_seed,
                    oracle: prepared.oracle,
                    final_return: curve.final_return(),
                    curve,
                    wall_clock: started.elapsed(),
                })
            })
            .collect();
        let mut records = Vec::new();
        let mut failures = Vec::new();
        for r in results {
            match r {
                Ok(rec) => records.push(rec),
                Err(f) => failures.push(f),
            }
        }
        Ok(GridOutcome {
            spec_hash: hash.clone(),
            records,
            failures,
        })
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub algorithm: Algorithm,
    pub tau: f64,
    pub lambda: f64,
    pub iteration: usize,
    pub n_seeds: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub value_start_mean: f64,
    pub value_start_std: f64,
    pub policy_delta_mean: f64,
    pub policy_delta_std: f64,
    pub oracle_gap_mean: f64,
    pub oracle_gap_std: f64,
}

/// Per-iteration mean and std across seeds for every (algorithm, τ, λ).
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut groups: Vec<((Algorithm, f64, f64), Vec<&RunRecord>)> = Vec::new();
    for r in records {
        let id = (r.key.algorithm, r.key.tau, r.key.lambda);
        match groups.iter_mut().find(|(g, _)| *g == id) {
            Some((_, members)) => members.push(r),
            None => groups.push((id, vec![r])),
        }
    }
    let mut rows = Vec::new();
    for ((algorithm, tau, lambda), members) in groups {
        let len = members.iter().map(|r| r.curve.records.len()).min().unwrap_or(0);
        for i in 0..len {
            let column = |f: &dyn Fn(&crate::solvers::CurveRecord) -> f64| {
                let values: Vec<f64> = members.iter().map(|r| f(&r.curve.records[i])).collect();
                mean_std(&values)
            };
            let (return_mean, return_std) = column(&|c| c.return_undiscounted);
            let (value_start_mean, value_start_std) = column(&|c| c.value_start_discounted);
            let (policy_delta_mean, policy_delta_std) = column(&|c| c.policy_delta);
            let (oracle_gap_mean, oracle_gap_std) = column(&|c| c.oracle_gap.unwrap_or(f64::NAN));
            rows.push(AggregateRow {
                algorithm,
                tau,
                lambda,
                iteration: members[0].curve.records[i].iteration,
                n_seeds: members.len(),
                return_mean,
                return_std,
                value_start_mean,
                value_start_std,
                policy_delta_mean,
                policy_delta_std,
                oracle_gap_mean,
                oracle_gap_std,
            });
        }
    }
    rows
}

fn hash_line(hash: &str) -> String {
    format!("# spec_hash={hash}\n")
}

fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const RUNS_FILE: &str = "runs.json";
pub const TIMING_FILE: &str = "timing.log";

/// Writes `runs/<stem>.csv` per run, `aggregate.csv`, `runs.json`,
/// `spec.json` and the `timing.log` sidecar under `dir`. Every file except
/// the sidecar starts with (CSV) or contains (JSON) the spec hash.
pub fn write_grid(spec: &ExperimentSpec, outcome: &GridOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    let runs_dir = dir.join("runs");
    fs::create_dir_all(&runs_dir)?;
    let mut written = Vec::new();
    let hash = &outcome.spec_hash;
    for r in &outcome.records {
        let path = runs_dir.join(format!("{}.csv", r.key.stem()));
        fs::write(&path, hash_line(hash) + &r.curve.to_csv())?;
        written.push(path);
    }
    let path = dir.join(AGGREGATE_FILE);
    fs::write(&path, hash_line(hash) + &csv_string(&aggregate(&outcome.records))?)?;
    written.push(path);

    let summary = serde_json::json!({
        "spec_hash": hash,
        "runs": outcome.records,
        "failures": outcome.failures,
    });
    let path = dir.join(RUNS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")?;
    written.push(path);

    let path = dir.join("spec.json");
    let canonical = ExperimentSpec {
        output: None,
        ..spec.clone()
    };
    fs::write(&path, serde_json::to_string_pretty(&canonical)? + "\n")?;
    written.push(path);

    let mut log = String::new();
    for r in &outcome.records {
        log += &format!("{} {:.3} ms\n", r.key.stem(), r.wall_clock.as_secs_f64() * 1e3);
    }
    fs::write(dir.join(TIMING_FILE), log)?;
    Ok(written)
}

/// Start-state values of the full and in-sample optimal policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub env: String,
    pub full_value_start: f64,
    pub full_return: f64,
    pub in_sample: Option<InSampleReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InSampleReport {
    pub value_start: f64,
    pub greedy_return: f64,
    pub unvisited_states: Vec<usize>,
    pub covered_pairs: usize,
    pub path_covered: bool,
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: V*(start) = {:.6}, greedy return {}",
            self.env, self.full_value_start, self.full_return
        )?;
        if let Some(i) = &self.in_sample {
            write!(
                f,
                "\nin-sample: V*(start) = {:.6}, greedy return {}, {} covered pairs, {} unvisited states, optimal path covered: {}",
                i.value_start,
                i.greedy_return,
                i.covered_pairs,
                i.unvisited_states.len(),
                i.path_covered
            )?;
        }
        Ok(())
    }
}

/// Oracle values for `env`, plus the in-sample ones when a dataset is given.
/// With [`UnvisitedFallback::Error`] a reachable state without data is
/// reported as a degenerate-support error naming it.
pub fn oracle_report(
    env: &Environment,
    dataset: Option<&Dataset>,
    fallback: UnvisitedFallback,
    cap: usize,
) -> Result<OracleReport> {
    let mdp = env.mdp();
    let start = mdp.start_state();
    let (_, v, pi) = value_iteration(mdp, SOLVE_TOL)?;
    let in_sample = match dataset {
        None => None,
        Some(ds) => {
            if ds.state_bound() > mdp.n_states() {
                return Err(Error::invalid("dataset refers to states outside the environment"));
            }
            let support = empirical_support(ds, mdp.n_states(), mdp.n_actions());
            let (_, vs, ps) = in_sample_value_iteration_with(mdp, &support, fallback, SOLVE_TOL)?;
            let unvisited = support
                .unvisited_states()
                .into_iter()
                .filter(|&s| !mdp.is_terminal(s))
                .collect();
            Some(InSampleReport {
                value_start: vs.get(start),
                greedy_return: greedy_return(mdp, &ps, cap)?,
                unvisited_states: unvisited,
                covered_pairs: support.count(),
                path_covered: vs.get(start) >= v.get(start) - 1e-8,
            })
        }
    };
    Ok(OracleReport {
        env: env.name.clone(),
        full_value_start: v.get(start),
        full_return: greedy_return(mdp, &pi, cap)?,
        in_sample,
    })
}

fn default_fraction() -> f64 {
    0.05
}

fn default_tau() -> f64 {
    1.0
}

fn default_percentile_dataset() -> DatasetSource {
    DatasetSource::Preset("expert-inferior".into())
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_env() -> String {
    "grid7x7".into()
}

fn default_iterations() -> usize {
    200
}

/// Percentile-reference study: clone the top, median and bottom return
/// bands of a mixed dataset, then run BR with each clone as the frozen
/// reference while evaluating on the full dataset's empirical MDP.
///
/// This is a desk-scale analog of percentile cloning with an actor-critic
/// learner; tabular BR plays the learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileSpec {
    #[serde(default = "default_env")]
    pub env: String,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default = "default_percentile_dataset")]
    pub dataset: DatasetSource,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_cap")]
    pub eval_cap: usize,
}

impl Default for PercentileSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl PercentileSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidSpec(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidSpec("tau must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidSpec("seed list is empty".into()));
        }
        self.dataset.validate()?;
        if let Some(recipe) = self.dataset.recipe()? {
            if recipe.behavior_kinds() < 2 {
                return Err(Error::InvalidSpec(
                    "the percentile study needs a dataset mixing at least two behavior kinds".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    /// `None` on the across-seed mean rows.
    pub seed: Option<u64>,
    pub band: Band,
    pub trajectories: usize,
    pub transitions: usize,
    /// Greedy return of the band's behavior clone.
    pub clone_return: f64,
    /// Final greedy return of BR regularized toward the clone.
    pub br_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileReport {
    pub spec_hash: String,
    pub fraction: f64,
    pub tau: f64,
    pub rows: Vec<PercentileRow>,
}

pub const PERCENTILE_LABEL: &str =
    "desk-scale analog: tabular BR with a percentile-cloned reference";

impl PercentileReport {
    pub fn mean(&self, band: Band) -> Option<&PercentileRow> {
        self.rows.iter().find(|r| r.seed.is_none() && r.band == band)
    }

    /// CSV with columns seed, band, trajectories, transitions,
    /// clone_return, br_return; mean rows use seed `mean`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# {PERCENTILE_LABEL}\n") + &hash_line(&self.spec_hash);
        out += "seed,band,trajectories,transitions,clone_return,br_return\n";
        for r in &self.rows {
            let seed = r.seed.map_or("mean".to_string(), |s| s.to_string());
            out += &format!(
                "{seed},{},{},{},{},{}\n",
                r.band.name(),
                r.trajectories,
                r.transitions,
                r.clone_return,
                r.br_return
            );
        }
        out
    }
}

impl fmt::Display for PercentileReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{PERCENTILE_LABEL} (fraction {}, tau {})", self.fraction, self.tau)?;
        for band in Band::ALL {
            if let Some(r) = self.mean(band) {
                writeln!(
                    f,
                    "  {:<6} clone {:>8.3}  br {:>8.3}",
                    band.name(),
                    r.clone_return,
                    r.br_return
                )?;
            }
        }
        Ok(())
    }
}

fn percentile_seed(
    spec: &PercentileSpec,
    env: &Environment,
    seed: u64,
) -> Result<Vec<PercentileRow>> {
    let mdp = env.mdp();
    let dataset = spec.dataset.build(env, seed)?;
    let total = dataset.n_trajectories();
    if spec.fraction * (total as f64) < 1.0 - 1e-9 {
        return Err(Error::invalid(format!(
            "fraction {} of {total} trajectories selects less than one trajectory",
            spec.fraction
        )));
    }
    let base = OfflineProblem::from_dataset(mdp.clone(), dataset.clone())?;
    let config = SolverConfig {
        rng_seed: seed,
        eval_episodes: 1,
        eval_cap: spec.eval_cap,
        ..SolverConfig::new(spec.tau, spec.iterations, EvalMode::FittedOnEmpiricalMdp)
    };
    let mut rows = Vec::new();
    for band in Band::ALL {
        let sub = percentile_filter(&dataset, band, spec.fraction)?;
        debug_assert_eq!(sub.n_trajectories(), band_size(spec.fraction, total));
        let clone = empirical_behavior_policy(&sub, mdp.n_states(), mdp.n_actions(), Smoothing::UniformOnUnvisited)
            .smoothed()
            .clone();
        let clone_return = greedy_return(mdp, &clone, spec.eval_cap)?;
        let problem = base.clone().with_behavior(clone)?;
        let (_, curve) = run_br(&problem, &config)?;
        rows.push(PercentileRow {
            seed: Some(seed),
            band,
            trajectories: sub.n_trajectories(),
            transitions: sub.len(),
            clone_return,
            br_return: curve.final_return(),
        });
    }
    Ok(rows)
}

pub fn run_percentile(spec: &PercentileSpec, jobs: Option<usize>) -> Result<PercentileReport> {
    spec.validate()?;
    let env = Environment::load(&spec.env, spec.discount)?;
    let per_seed: Vec<Vec<PercentileRow>> = pool(jobs)?.install(|| {
        spec.seeds
            .par_iter()
            .map(|&s| percentile_seed(spec, &env, s))
            .collect::<Result<_>>()
    })?;
    let mut rows: Vec<PercentileRow> = per_seed.into_iter().flatten().collect();
    for band in Band::ALL {
        let members: Vec<&PercentileRow> = rows.iter().filter(|r| r.band == band).collect();
        let mean = |f: &dyn Fn(&PercentileRow) -> f64| {
            members.iter().map(|r| f(r)).sum::<f64>() / members.len() as f64
        };
        let row = PercentileRow {
            seed: None,
            band,
            trajectories: members.iter().map(|r| r.trajectories).sum::<usize>() / members.len(),
            transitions: members.iter().map(|r| r.transitions).sum::<usize>() / members.len(),
            clone_return: mean(&|r| r.clone_return),
            br_return: mean(&|r| r.br_return),
        };
        rows.push(row);
    }
    Ok(PercentileReport {
        spec_hash: spec_hash(spec),
        fraction: spec.fraction,
        tau: spec.tau,
        rows,
    })
}

fn default_check_taus() -> Vec<f64> {
    vec![0.1, 1.0, 10.0]
}

fn default_softmax_taus() -> Vec<f64> {
    vec![0.01, 0.1, 1.0, 10.0]
}

fn default_supports() -> Vec<BoundSupport> {
    vec![BoundSupport::Full, BoundSupport::Random]
}

fn n100() -> usize {
    100
}

fn n50() -> usize {
    50
}

fn n500() -> usize {
    500
}

fn n20() -> usize {
    20
}

fn n5() -> usize {
    5
}

/// Trial counts and families for the theory suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "n20")]
    pub max_states: usize,
    #[serde(default = "n5")]
    pub max_actions: usize,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default = "n100")]
    pub improvement_trials: usize,
    #[serde(default = "default_check_taus")]
    pub improvement_taus: Vec<f64>,
    #[serde(default = "n50")]
    pub bound_trials: usize,
    #[serde(default = "n500")]
    pub horizon: usize,
    #[serde(default = "default_supports")]
    pub bound_supports: Vec<BoundSupport>,
    #[serde(default = "n100")]
    pub softmax_trials: usize,
    #[serde(default = "n5")]
    pub softmax_actions: usize,
    #[serde(default = "default_softmax_taus")]
    pub softmax_taus: Vec<f64>,
    /// Test hook: run the improvement suite on `ref · exp(−Q/τ)`.
    #[serde(default)]
    pub flip_kl_sign: bool,
}

impl Default for CheckConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Per-trial outcome of a bound check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTrial {
    pub trial: usize,
    pub seed: u64,
    pub support: BoundSupport,
    pub n_states: usize,
    pub n_actions: usize,
    pub tau: f64,
    pub final_gap: f64,
    pub worst_slack: f64,
    pub satisfied: bool,
    pub first_violation: Option<BoundRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub config: CheckConfig,
    pub improvement: Option<ImprovementReport>,
    pub bounds: Vec<BoundTrial>,
    pub bound_note: String,
    pub softmax: Option<SoftmaxReport>,
    pub warnings: Vec<String>,
    pub passed: bool,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        if let Some(r) = &self.improvement {
            writeln!(f, "{r}")?;
            for v in r.violations.iter().take(5) {
                writeln!(
                    f,
                    "  counterexample: trial {} seed {} tau {} state {} {:?} by {:.3e}",
                    v.trial, v.seed, v.tau, v.state, v.kind, v.amount
                )?;
            }
        }
        if !self.bounds.is_empty() {
            let failed: Vec<&BoundTrial> = self.bounds.iter().filter(|b| !b.satisfied).collect();
            let slack = self.bounds.iter().map(|b| b.worst_slack).fold(f64::INFINITY, f64::min);
            writeln!(
                f,
                "convergence bound: {} trials, worst slack {:.4}, {} failing -> {}",
                self.bounds.len(),
                slack,
                failed.len(),
                if failed.is_empty() { "PASS" } else { "FAIL" }
            )?;
            writeln!(f, "  {}", self.bound_note)?;
            for b in failed.iter().take(5) {
                writeln!(f, "  failing trial {} seed {} ({:?} support)", b.trial, b.seed, b.support)?;
            }
        }
        if let Some(s) = &self.softmax {
            writeln!(f, "{s}")?;
        }
        write!(f, "overall: {}", if self.passed { "PASS" } else { "FAIL" })
    }
}

fn flipped_step(q: &QTable, reference: &Policy, tau: f64) -> Result<Policy> {
    let negated: Vec<f64> = q.as_slice().iter().map(|x| -x).collect();
    let negated = QTable::new(q.n_states(), q.n_actions(), negated, q.discount())?;
    crate::solvers::conservative_step(&negated, reference, tau)
}

/// Runs the three theory suites; `passed` is true iff none fails.
pub fn run_checks(config: &CheckConfig, jobs: Option<usize>) -> Result<CheckReport> {
    let family = RandomMdpSpec::new(config.max_states, config.max_actions, config.discount, config.seed);
    family.validate().map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut warnings = Vec::new();
    pool(jobs)?.install(|| {
        let improvement = if config.improvement_trials == 0 {
            warnings.push("improvement suite has 0 trials; vacuous pass".to_string());
            None
        } else {
            let step: &crate::theory::StepFn = if config.flip_kl_sign {
                warnings.push("KL sign flipped on purpose; violations are expected".to_string());
                &flipped_step
            } else {
                &crate::solvers::conservative_step
            };
            Some(check_improvement_with(
                &family,
                config.improvement_trials,
                &config.improvement_taus,
                step,
            )?)
        };

        let mut bounds = Vec::new();
        if config.bound_trials == 0 || config.bound_supports.is_empty() {
            warnings.push("bound suite has 0 trials; vacuous pass".to_string());
        }
        if config.bound_trials > 0 {
            for &support in &config.bound_supports {
                for r in check_theorem1_suite(&family, config.bound_trials, config.horizon, support)? {
                    bounds.push(BoundTrial {
                        trial: r.trial.unwrap_or(0),
                        seed: r.seed.unwrap_or(0),
                        support,
                        n_states: r.n_states,
                        n_actions: r.n_actions,
                        tau: r.tau,
                        final_gap: r.final_gap(),
                        worst_slack: r.worst_slack(),
                        satisfied: r.satisfied,
                        first_violation: r.records.iter().find(|x| !x.satisfied).copied(),
                    });
                }
            }
        }

        let softmax = if config.softmax_trials == 0 {
            warnings.push("softmax suite has 0 trials; vacuous pass".to_string());
            None
        } else {
            Some(check_softmax_optimality(
                config.softmax_trials,
                config.softmax_actions,
                &config.softmax_taus,
                config.seed,
            )?)
        };

        let passed = improvement.as_ref().map_or(true, |r| r.passed())
            && bounds.iter().all(|b| b.satisfied)
            && softmax.as_ref().map_or(true, |s| s.passed);
        Ok(CheckReport {
            config: config.clone(),
            improvement,
            bounds,
            bound_note: format!(
                "tau = (1/(1-gamma))*sqrt(T/(2 ln|A|)) fixed per run with T = {}; gap checked for 1 <= t <= T",
                config.horizon
            ),
            softmax,
            warnings,
            passed,
        })
    })
}
