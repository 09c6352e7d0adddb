//! Gridworld environments: the open 7×7 grid and the 11×11 four-room map.
//!
//! Cells are `[row, col]` with row 0 at the top. Non-wall cells are numbered
//! in row-major order; the absorbing terminal is the last state. Actions are
//! ordered (up, down, right, left).

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, TabularMdp};

/// When true, the step into the goal pays `step_reward + goal_reward`;
/// otherwise it pays `goal_reward` alone.
pub const GOAL_ENTRY_PAYS_STEP_COST: bool = false;

pub const N_ACTIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up = 0,
    Down = 1,
    Right = 2,
    Left = 3,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [Action::Up, Action::Down, Action::Right, Action::Left];

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Right => (0, 1),
            Action::Left => (0, -1),
        }
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Right => "right",
            Action::Left => "left",
        })
    }
}

impl std::str::FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up" => Ok(Action::Up),
            "down" => Ok(Action::Down),
            "right" => Ok(Action::Right),
            "left" => Ok(Action::Left),
            other => Err(Error::invalid(format!("unknown action `{other}`"))),
        }
    }
}

/// Serializable gridworld description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub walls: Vec<[usize; 2]>,
    pub start: [usize; 2],
    pub goal: [usize; 2],
    pub step_reward: f64,
    pub goal_reward: f64,
}

const GRID7X7_JSON: &str = include_str!("../envs/grid7x7.json");
const FOURROOM_JSON: &str = include_str!("../envs/fourroom.json");

impl GridSpec {
    /// 7×7 open grid, start bottom-left, goal top-right.
    pub fn grid7x7() -> Self {
        serde_json::from_str(GRID7X7_JSON).expect("bundled grid7x7.json parses")
    }

    /// 11×11 four-room map with one doorway per wall segment.
    pub fn four_room() -> Self {
        serde_json::from_str(FOURROOM_JSON).expect("bundled fourroom.json parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn in_bounds(&self, cell: [usize; 2]) -> bool {
        cell[0] < self.height && cell[1] < self.width
    }

    pub fn is_wall(&self, cell: [usize; 2]) -> bool {
        self.walls.contains(&cell)
    }

    /// Neighbor reached by `action`, or `None` when it is off-grid or a wall.
    pub fn step(&self, cell: [usize; 2], action: Action) -> Option<[usize; 2]> {
        let (dr, dc) = action.delta();
        let r = cell[0].checked_add_signed(dr)?;
        let c = cell[1].checked_add_signed(dc)?;
        let next = [r, c];
        (self.in_bounds(next) && !self.is_wall(next)).then_some(next)
    }

    /// Breadth-first move count from `from` to `to` over open cells.
    pub fn distance(&self, from: [usize; 2], to: [usize; 2]) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.width * self.height];
        let idx = |c: [usize; 2]| c[0] * self.width + c[1];
        let mut queue = VecDeque::from([from]);
        dist[idx(from)] = 0;
        while let Some(cell) = queue.pop_front() {
            if cell == to {
                return Some(dist[idx(cell)]);
            }
            for a in Action::ALL {
                if let Some(next) = self.step(cell, a) {
                    if dist[idx(next)] == usize::MAX {
                        dist[idx(next)] = dist[idx(cell)] + 1;
                        queue.push_back(next);
                    }
                }
            }
        }
        None
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidSpec("grid must be nonempty".into()));
        }
        for cell in self.walls.iter().chain([&self.start, &self.goal]) {
            if !self.in_bounds(*cell) {
                return Err(Error::InvalidSpec(format!("cell {cell:?} is off the grid")));
            }
        }
        if self.start == self.goal {
            return Err(Error::InvalidSpec("start and goal coincide".into()));
        }
        if self.is_wall(self.start) || self.is_wall(self.goal) {
            return Err(Error::InvalidSpec("start or goal is a wall".into()));
        }
        if self.distance(self.start, self.goal).is_none() {
            return Err(Error::InvalidSpec("goal is unreachable from start".into()));
        }
        Ok(())
    }
}

/// A named set of states, e.g. one room of the four-room map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    states: Vec<usize>,
}

impl Region {
    pub fn new(name: impl Into<String>, mut states: Vec<usize>) -> Self {
        states.sort_unstable();
        states.dedup();
        Self {
            name: name.into(),
            states,
        }
    }

    pub fn empty() -> Self {
        Self::new("empty", Vec::new())
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn contains(&self, s: usize) -> bool {
        self.states.binary_search(&s).is_ok()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// A built gridworld: the MDP plus the cell/state bookkeeping.
#[derive(Debug, Clone)]
pub struct GridWorld {
    spec: GridSpec,
    mdp: TabularMdp,
    cells: Vec<[usize; 2]>,
    state_of_cell: Vec<Option<usize>>,
}

impl GridWorld {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn into_mdp(self) -> TabularMdp {
        self.mdp
    }

    /// State index of an open cell.
    pub fn state(&self, cell: [usize; 2]) -> Option<usize> {
        if !self.spec.in_bounds(cell) {
            return None;
        }
        self.state_of_cell[cell[0] * self.spec.width + cell[1]]
    }

    /// Cell of a non-terminal state.
    pub fn cell(&self, state: usize) -> Option<[usize; 2]> {
        self.cells.get(state).copied()
    }

    /// Number of open cells (non-terminal states).
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn terminal_state(&self) -> usize {
        self.cells.len()
    }

    pub fn goal_state(&self) -> usize {
        self.state(self.spec.goal).expect("goal is an open cell")
    }

    /// Region of all open cells matching `pred`.
    pub fn region(&self, name: &str, pred: impl Fn([usize; 2]) -> bool) -> Region {
        let states = self
            .cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| pred(c))
            .map(|(s, _)| s)
            .collect();
        Region::new(name, states)
    }

    /// Renders the grid with the given per-state glyphs.
    pub fn render(&self, glyph: impl Fn(usize) -> char) -> String {
        let mut out = String::new();
        for r in 0..self.spec.height {
            for c in 0..self.spec.width {
                out.push(match self.state([r, c]) {
                    None => '#',
                    Some(s) => glyph(s),
                });
            }
            out.push('\n');
        }
        out
    }
}

/// Deterministic gridworld MDP.
///
/// Bumping into a wall or the border keeps the agent in place and pays
/// `step_reward`. The step into the goal pays `goal_reward` and moves to the
/// absorbing terminal. The goal cell itself exits to the terminal with zero
/// reward from every action and is excluded from random restarts.
pub fn build_gridworld(spec: &GridSpec, discount: f64) -> Result<GridWorld> {
    spec.validate()?;
    let mut cells = Vec::new();
    let mut state_of_cell = vec![None; spec.width * spec.height];
    for r in 0..spec.height {
        for c in 0..spec.width {
            if !spec.is_wall([r, c]) {
                state_of_cell[r * spec.width + c] = Some(cells.len());
                cells.push([r, c]);
            }
        }
    }
    let n_cells = cells.len();
    let terminal = n_cells;
    let n_states = n_cells + 1;
    let goal_reward = if GOAL_ENTRY_PAYS_STEP_COST {
        spec.step_reward + spec.goal_reward
    } else {
        spec.goal_reward
    };

    let mut transitions = Vec::with_capacity(n_states * N_ACTIONS);
    let mut reward = Vec::with_capacity(n_states * N_ACTIONS);
    for &cell in &cells {
        for a in Action::ALL {
            if cell == spec.goal {
                transitions.push(vec![(terminal, 1.0)]);
                reward.push(0.0);
                continue;
            }
            match spec.step(cell, a) {
                Some(next) if next == spec.goal => {
                    transitions.push(vec![(terminal, 1.0)]);
                    reward.push(goal_reward);
                }
                Some(next) => {
                    let s = state_of_cell[next[0] * spec.width + next[1]].unwrap();
                    transitions.push(vec![(s, 1.0)]);
                    reward.push(spec.step_reward);
                }
                None => {
                    let s = state_of_cell[cell[0] * spec.width + cell[1]].unwrap();
                    transitions.push(vec![(s, 1.0)]);
                    reward.push(spec.step_reward);
                }
            }
        }
    }
    for _ in Action::ALL {
        transitions.push(vec![(terminal, 1.0)]);
        reward.push(0.0);
    }
    let mut terminal_mask = vec![false; n_states];
    terminal_mask[terminal] = true;

    let start = state_of_cell[spec.start[0] * spec.width + spec.start[1]].unwrap();
    let goal = state_of_cell[spec.goal[0] * spec.width + spec.goal[1]].unwrap();
    let restarts = (0..n_cells).filter(|&s| s != goal).collect();
    let mdp = TabularMdp::new(
        n_states,
        N_ACTIONS,
        transitions,
        reward,
        discount,
        terminal_mask,
        start,
    )?
    .with_restart_states(restarts)?;
    Ok(GridWorld {
        spec: spec.clone(),
        mdp,
        cells,
        state_of_cell,
    })
}

/// The four rooms of [`GridSpec::four_room`], in the order
/// upper-left, upper-right, lower-left, lower-right.
#[derive(Debug, Clone)]
pub struct Rooms {
    pub upper_left: Region,
    pub upper_right: Region,
    pub lower_left: Region,
    pub lower_right: Region,
}

impl Rooms {
    pub fn all(&self) -> [&Region; 4] {
        [
            &self.upper_left,
            &self.upper_right,
            &self.lower_left,
            &self.lower_right,
        ]
    }

    pub fn by_name(&self, name: &str) -> Option<&Region> {
        self.all().into_iter().find(|r| r.name == name)
    }
}

/// Builds the four-room MDP and its rooms.
pub fn build_four_room(discount: f64) -> Result<(GridWorld, Rooms)> {
    let grid = build_gridworld(&GridSpec::four_room(), discount)?;
    let rooms = find_rooms(&grid)?;
    Ok((grid, rooms))
}

/// Open cells walled in on two opposite sides.
pub fn doorways(spec: &GridSpec) -> Vec<[usize; 2]> {
    let blocked = |cell: [usize; 2], dr: isize, dc: isize| -> bool {
        match (cell[0].checked_add_signed(dr), cell[1].checked_add_signed(dc)) {
            (Some(r), Some(c)) => spec.in_bounds([r, c]) && spec.is_wall([r, c]),
            _ => false,
        }
    };
    let mut out = Vec::new();
    for r in 0..spec.height {
        for c in 0..spec.width {
            let cell = [r, c];
            if spec.is_wall(cell) {
                continue;
            }
            let vertical = blocked(cell, -1, 0) && blocked(cell, 1, 0);
            let horizontal = blocked(cell, 0, -1) && blocked(cell, 0, 1);
            if vertical || horizontal {
                out.push(cell);
            }
        }
    }
    out
}

/// Rooms are the connected components of open, non-doorway cells that
/// contain each corner of the grid.
pub fn find_rooms(grid: &GridWorld) -> Result<Rooms> {
    let spec = grid.spec();
    let doors = doorways(spec);
    let flood = |seed: [usize; 2], name: &str| -> Result<Region> {
        if spec.is_wall(seed) || doors.contains(&seed) {
            return Err(Error::InvalidSpec(format!("corner {seed:?} is not inside a room")));
        }
        let mut seen = vec![false; spec.width * spec.height];
        let mut queue = VecDeque::from([seed]);
        seen[seed[0] * spec.width + seed[1]] = true;
        let mut states = Vec::new();
        while let Some(cell) = queue.pop_front() {
            states.push(grid.state(cell).unwrap());
            for a in Action::ALL {
                if let Some(next) = spec.step(cell, a) {
                    let k = next[0] * spec.width + next[1];
                    if !seen[k] && !doors.contains(&next) {
                        seen[k] = true;
                        queue.push_back(next);
                    }
                }
            }
        }
        Ok(Region::new(name, states))
    };
    let (h, w) = (spec.height - 1, spec.width - 1);
    Ok(Rooms {
        upper_left: flood([0, 0], "upper-left")?,
        upper_right: flood([0, w], "upper-right")?,
        lower_left: flood([h, 0], "lower-left")?,
        lower_right: flood([h, w], "lower-right")?,
    })
}

/// Sorted state indices of `region`, checked against the MDP's state count.
pub fn region_states(mdp: &TabularMdp, region: &Region) -> Result<Vec<usize>> {
    if let Some(&s) = region.states().iter().find(|&&s| s >= mdp.n_states() || mdp.is_terminal(s)) {
        return Err(Error::invalid(format!(
            "region `{}` holds state {s} which is not an open cell",
            region.name
        )));
    }
    Ok(region.states().to_vec())
}
