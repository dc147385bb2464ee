//! The assistance-game environment.
//!
//! A [`WorldState`] is a dense voxel grid plus the two players. Both players
//! act every tick; the human's action resolves first and the assistant's
//! action is re-validated against the intermediate state. Rewards are the
//! per-player decrease in edit distance to the hidden goal grid.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goals::GoalGrid;

/// Number of global (non-spatial) actions: no-op plus six moves.
pub const NUM_GLOBAL_ACTIONS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct BlockType(pub u8);

impl BlockType {
    pub const AIR: BlockType = BlockType(0);

    pub fn is_air(self) -> bool {
        self.0 == 0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Dims {
    pub w: usize,
    pub h: usize,
    pub d: usize,
}

impl Dims {
    pub const fn new(w: usize, h: usize, d: usize) -> Self {
        Dims { w, h, d }
    }

    pub fn volume(&self) -> usize {
        self.w * self.h * self.d
    }

    /// Flat index, y-major then z then x (the goal-file order).
    #[inline]
    pub fn index(&self, c: Vec3) -> usize {
        (c.y as usize * self.d + c.z as usize) * self.w + c.x as usize
    }

    #[inline]
    pub fn cell(&self, index: usize) -> Vec3 {
        let x = index % self.w;
        let z = (index / self.w) % self.d;
        let y = index / (self.w * self.d);
        Vec3::new(x as u8, y as u8, z as u8)
    }

    #[inline]
    pub fn offset(&self, c: Vec3, dx: i32, dy: i32, dz: i32) -> Option<Vec3> {
        let x = c.x as i32 + dx;
        let y = c.y as i32 + dy;
        let z = c.z as i32 + dz;
        if x < 0 || y < 0 || z < 0 || x >= self.w as i32 || y >= self.h as i32 || z >= self.d as i32 {
            None
        } else {
            Some(Vec3::new(x as u8, y as u8, z as u8))
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.w, self.h, self.d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: u8,
    pub y: u8,
    pub z: u8,
}

impl Vec3 {
    pub const fn new(x: u8, y: u8, z: u8) -> Self {
        Vec3 { x, y, z }
    }

    pub fn chebyshev(self, other: Vec3) -> u8 {
        let dx = self.x.abs_diff(other.x);
        let dy = self.y.abs_diff(other.y);
        let dz = self.z.abs_diff(other.z);
        dx.max(dy).max(dz)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::PosX,
        Direction::NegX,
        Direction::PosY,
        Direction::NegY,
        Direction::PosZ,
        Direction::NegZ,
    ];

    pub fn delta(self) -> (i32, i32, i32) {
        match self {
            Direction::PosX => (1, 0, 0),
            Direction::NegX => (-1, 0, 0),
            Direction::PosY => (0, 1, 0),
            Direction::NegY => (0, -1, 0),
            Direction::PosZ => (0, 0, 1),
            Direction::NegZ => (0, 0, -1),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::PosX => "+x",
            Direction::NegX => "-x",
            Direction::PosY => "+y",
            Direction::NegY => "-y",
            Direction::PosZ => "+z",
            Direction::NegZ => "-z",
        }
    }

    pub fn from_name(name: &str) -> Option<Direction> {
        Direction::ALL.into_iter().find(|d| d.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Action {
    #[default]
    NoOp,
    Move(Direction),
    Place { cell: Vec3, block: BlockType },
    Break { cell: Vec3 },
}

impl Action {
    pub fn is_noop(&self) -> bool {
        matches!(self, Action::NoOp)
    }

    /// Place and break are the only actions that touch the grid.
    pub fn is_edit(&self) -> bool {
        matches!(self, Action::Place { .. } | Action::Break { .. })
    }

    pub fn cell(&self) -> Option<Vec3> {
        match *self {
            Action::Place { cell, .. } | Action::Break { cell } => Some(cell),
            _ => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::NoOp => write!(f, "noop"),
            Action::Move(d) => write!(f, "move {}", d.name()),
            Action::Place { cell, block } => {
                write!(f, "place {} at ({},{},{})", block.0, cell.x, cell.y, cell.z)
            }
            Action::Break { cell } => write!(f, "break ({},{},{})", cell.x, cell.y, cell.z),
        }
    }
}

/// Coarse action category used by bi-level search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionType {
    NoOp,
    Move(Direction),
    Break,
    Place,
}

impl ActionType {
    pub const COUNT: usize = 9;

    pub fn index(self) -> usize {
        match self {
            ActionType::NoOp => 0,
            ActionType::Move(d) => 1 + d.index(),
            ActionType::Break => 7,
            ActionType::Place => 8,
        }
    }

    pub fn is_parameterized(self) -> bool {
        matches!(self, ActionType::Break | ActionType::Place)
    }
}

/// Flat integer encoding of the action space.
///
/// Layout: `0` no-op, `1..=6` moves, then one break code per cell, then
/// `num_block_types` place codes per cell (the air slot is never valid).
/// The same layout is used by the network heads and the trajectory corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub dims: Dims,
    pub num_block_types: usize,
}

impl ActionSpace {
    pub fn new(dims: Dims, num_block_types: usize) -> Self {
        ActionSpace {
            dims,
            num_block_types,
        }
    }

    pub fn size(&self) -> usize {
        NUM_GLOBAL_ACTIONS + self.dims.volume() * (1 + self.num_block_types)
    }

    #[inline]
    pub fn break_code(&self, cell_index: usize) -> usize {
        NUM_GLOBAL_ACTIONS + cell_index
    }

    #[inline]
    pub fn place_code(&self, cell_index: usize, block: BlockType) -> usize {
        NUM_GLOBAL_ACTIONS + self.dims.volume() + cell_index * self.num_block_types + block.index()
    }

    pub fn encode(&self, action: &Action) -> usize {
        match *action {
            Action::NoOp => 0,
            Action::Move(d) => 1 + d.index(),
            Action::Break { cell } => self.break_code(self.dims.index(cell)),
            Action::Place { cell, block } => self.place_code(self.dims.index(cell), block),
        }
    }

    pub fn decode(&self, code: usize) -> Option<Action> {
        let n = self.dims.volume();
        if code == 0 {
            Some(Action::NoOp)
        } else if code < NUM_GLOBAL_ACTIONS {
            Some(Action::Move(Direction::ALL[code - 1]))
        } else if code < NUM_GLOBAL_ACTIONS + n {
            Some(Action::Break {
                cell: self.dims.cell(code - NUM_GLOBAL_ACTIONS),
            })
        } else if code < self.size() {
            let rest = code - NUM_GLOBAL_ACTIONS - n;
            let block = BlockType((rest % self.num_block_types) as u8);
            if block.is_air() {
                return None;
            }
            Some(Action::Place {
                cell: self.dims.cell(rest / self.num_block_types),
                block,
            })
        } else {
            None
        }
    }

    pub fn action_type(&self, code: usize) -> ActionType {
        let n = self.dims.volume();
        if code == 0 {
            ActionType::NoOp
        } else if code < NUM_GLOBAL_ACTIONS {
            ActionType::Move(Direction::ALL[code - 1])
        } else if code < NUM_GLOBAL_ACTIONS + n {
            ActionType::Break
        } else {
            ActionType::Place
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Player {
    Human,
    Assistant,
}

impl Player {
    pub fn index(self) -> usize {
        match self {
            Player::Human => 0,
            Player::Assistant => 1,
        }
    }

    pub fn other(self) -> Player {
        match self {
            Player::Human => Player::Assistant,
            Player::Assistant => Player::Human,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlayerState {
    pub position: Vec3,
    pub last_action: Action,
}

/// Environment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub dims: Dims,
    pub num_block_types: usize,
    pub horizon: u32,
    /// Max Chebyshev distance for place/break.
    pub reach: u8,
    pub seed: u64,
    /// Strict mode errors on invalid actions; lenient mode turns them into no-ops.
    #[serde(default)]
    pub strict: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dims: Dims::new(6, 6, 6),
            num_block_types: 4,
            horizon: 200,
            reach: 3,
            seed: 0,
            strict: false,
        }
    }
}

impl EnvConfig {
    /// The 11x10x10, ten-block-type, 1500-step setting.
    pub fn full_scale() -> Self {
        EnvConfig {
            dims: Dims::new(11, 10, 10),
            num_block_types: 10,
            horizon: 1500,
            reach: 3,
            seed: 0,
            strict: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_block_types < 2 {
            return Err(Error::Config("num_block_types must be at least 2".into()));
        }
        if self.num_block_types > u8::MAX as usize {
            return Err(Error::Config("num_block_types must fit in a byte".into()));
        }
        if self.reach < 1 {
            return Err(Error::Config("reach must be at least 1".into()));
        }
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.dims.volume() < 8 {
            return Err(Error::Config(format!(
                "grid {} has fewer than 8 cells",
                self.dims
            )));
        }
        if self.dims.w > 255 || self.dims.h > 255 || self.dims.d > 255 {
            return Err(Error::Config("grid dimensions must be below 256".into()));
        }
        Ok(())
    }

    pub fn action_space(&self) -> ActionSpace {
        ActionSpace::new(self.dims, self.num_block_types)
    }
}

/// Which player last edited a cell.
pub type Modifier = Option<Player>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    pub dims: Dims,
    pub grid: Vec<BlockType>,
    /// Index 0 is the human, index 1 the assistant.
    pub players: Vec<PlayerState>,
    pub timestep: u32,
    pub last_modifier: Vec<Modifier>,
}

impl WorldState {
    /// An all-air grid with players at the given cells.
    pub fn empty(dims: Dims, positions: &[Vec3]) -> Self {
        WorldState {
            dims,
            grid: vec![BlockType::AIR; dims.volume()],
            players: positions
                .iter()
                .map(|&position| PlayerState {
                    position,
                    last_action: Action::NoOp,
                })
                .collect(),
            timestep: 0,
            last_modifier: vec![None; dims.volume()],
        }
    }

    #[inline]
    pub fn block(&self, c: Vec3) -> BlockType {
        self.grid[self.dims.index(c)]
    }

    pub fn set_block(&mut self, c: Vec3, b: BlockType) {
        let i = self.dims.index(c);
        self.grid[i] = b;
    }

    pub fn player(&self, p: Player) -> &PlayerState {
        &self.players[p.index()]
    }

    pub fn is_occupied(&self, c: Vec3) -> bool {
        self.players.iter().any(|p| p.position == c)
    }

    pub fn occupant(&self, c: Vec3) -> Option<Player> {
        self.players.iter().position(|p| p.position == c).map(|i| {
            if i == 0 {
                Player::Human
            } else {
                Player::Assistant
            }
        })
    }
}

/// Per-cell edit cost between a current block and a goal block.
#[inline]
pub fn cell_cost(current: BlockType, goal: BlockType) -> u32 {
    if current == goal {
        0
    } else if current.is_air() || goal.is_air() {
        1
    } else {
        2
    }
}

/// Minimum number of place/break actions turning `state` into `goal`.
pub fn edit_distance(state: &WorldState, goal: &GoalGrid) -> Result<u32> {
    if state.dims != goal.dims {
        return Err(Error::DimensionMismatch {
            expected: goal.dims,
            actual: state.dims,
        });
    }
    Ok(grid_distance(&state.grid, &goal.cells))
}

pub(crate) fn grid_distance(grid: &[BlockType], goal: &[BlockType]) -> u32 {
    grid.iter().zip(goal).map(|(&c, &g)| cell_cost(c, g)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: WorldState,
    pub reward_human: f64,
    pub reward_assistant: f64,
    pub done: bool,
    /// Actions as actually executed after validation and conflict resolution.
    pub human_action: Action,
    pub assistant_action: Action,
    pub distance: u32,
}

/// Stateless environment logic bound to one configuration.
#[derive(Clone, Debug)]
pub struct Env {
    config: EnvConfig,
    space: ActionSpace,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::new_unchecked(config))
    }

    /// Skips the size checks; used for hand-built toy worlds.
    pub fn new_unchecked(config: EnvConfig) -> Self {
        let space = config.action_space();
        Env { config, space }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    /// Empty grid with both players dropped on distinct random cells.
    pub fn new_episode(&self, goal: &GoalGrid, rng_seed: u64) -> Result<WorldState> {
        if goal.dims != self.config.dims {
            return Err(Error::Config(format!(
                "goal dims {} do not match environment dims {}",
                goal.dims, self.config.dims
            )));
        }
        let dims = self.config.dims;
        let n = dims.volume();
        if n < 2 {
            return Err(Error::Config("need at least two cells for two players".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let human = rng.random_range(0..n);
        let mut assistant = rng.random_range(0..n - 1);
        if assistant >= human {
            assistant += 1;
        }
        Ok(WorldState::empty(dims, &[dims.cell(human), dims.cell(assistant)]))
    }

    pub fn valid_actions(&self, state: &WorldState, player: Player) -> Vec<Action> {
        let mut codes = Vec::new();
        self.valid_codes(state, player, &mut codes);
        codes
            .into_iter()
            .map(|c| self.space.decode(c as usize).expect("valid code decodes"))
            .collect()
    }

    /// Valid action codes for `player`, ascending.
    pub fn valid_codes(&self, state: &WorldState, player: Player, out: &mut Vec<u32>) {
        out.clear();
        let dims = state.dims;
        let Some(me) = state.players.get(player.index()) else {
            out.push(0);
            return;
        };
        let pos = me.position;
        out.push(0);
        for d in Direction::ALL {
            let (dx, dy, dz) = d.delta();
            if let Some(t) = dims.offset(pos, dx, dy, dz) {
                if state.block(t).is_air() && !state.is_occupied(t) {
                    out.push(1 + d.index() as u32);
                }
            }
        }
        let r = self.config.reach as i32;
        let lo = |p: u8| (p as i32 - r).max(0) as usize;
        let hi = |p: u8, n: usize| ((p as i32 + r) as usize).min(n - 1);
        let (x0, x1) = (lo(pos.x), hi(pos.x, dims.w));
        let (y0, y1) = (lo(pos.y), hi(pos.y, dims.h));
        let (z0, z1) = (lo(pos.z), hi(pos.z, dims.d));
        let mark = out.len();
        // breaks first (lower codes), then places
        for y in y0..=y1 {
            for z in z0..=z1 {
                for x in x0..=x1 {
                    let c = Vec3::new(x as u8, y as u8, z as u8);
                    let i = dims.index(c);
                    if !state.grid[i].is_air() {
                        out.push(self.space.break_code(i) as u32);
                    }
                }
            }
        }
        out[mark..].sort_unstable();
        let mark = out.len();
        let nb = self.config.num_block_types;
        for y in y0..=y1 {
            for z in z0..=z1 {
                for x in x0..=x1 {
                    let c = Vec3::new(x as u8, y as u8, z as u8);
                    let i = dims.index(c);
                    if state.grid[i].is_air() && !state.is_occupied(c) {
                        for b in 1..nb {
                            out.push(self.space.place_code(i, BlockType(b as u8)) as u32);
                        }
                    }
                }
            }
        }
        out[mark..].sort_unstable();
    }

    pub fn is_valid(&self, state: &WorldState, player: Player, action: &Action) -> bool {
        let Some(me) = state.players.get(player.index()) else {
            return action.is_noop();
        };
        let dims = state.dims;
        match *action {
            Action::NoOp => true,
            Action::Move(d) => {
                let (dx, dy, dz) = d.delta();
                match dims.offset(me.position, dx, dy, dz) {
                    Some(t) => state.block(t).is_air() && !state.is_occupied(t),
                    None => false,
                }
            }
            Action::Break { cell } => {
                in_bounds(dims, cell)
                    && !state.block(cell).is_air()
                    && me.position.chebyshev(cell) <= self.config.reach
            }
            Action::Place { cell, block } => {
                in_bounds(dims, cell)
                    && !block.is_air()
                    && block.index() < self.config.num_block_types
                    && state.block(cell).is_air()
                    && !state.is_occupied(cell)
                    && me.position.chebyshev(cell) <= self.config.reach
            }
        }
    }

    /// Applies one action for one player in place. Returns the executed action.
    fn apply_one(&self, state: &mut WorldState, player: Player, action: Action) -> Action {
        if !self.is_valid(state, player, &action) {
            return Action::NoOp;
        }
        let dims = state.dims;
        match action {
            Action::NoOp => {}
            Action::Move(d) => {
                let (dx, dy, dz) = d.delta();
                let p = &mut state.players[player.index()];
                p.position = dims.offset(p.position, dx, dy, dz).expect("validated move");
            }
            Action::Place { cell, block } => {
                let i = dims.index(cell);
                state.grid[i] = block;
                state.last_modifier[i] = Some(player);
            }
            Action::Break { cell } => {
                let i = dims.index(cell);
                state.grid[i] = BlockType::AIR;
                state.last_modifier[i] = Some(player);
            }
        }
        action
    }

    /// Goal-free transition: human first, then the assistant re-validated.
    /// Invalid actions become no-ops. Returns the executed actions.
    pub fn transition(
        &self,
        state: &WorldState,
        a_h: Action,
        a_r: Action,
    ) -> (WorldState, Action, Action) {
        let mut next = state.clone();
        let eh = self.apply_one(&mut next, Player::Human, a_h);
        let er = if next.players.len() > 1 {
            self.apply_one(&mut next, Player::Assistant, a_r)
        } else {
            Action::NoOp
        };
        for (p, a) in next.players.iter_mut().zip([eh, er]) {
            p.last_action = a;
        }
        next.timestep += 1;
        (next, eh, er)
    }

    /// One environment tick with rewards.
    pub fn apply(
        &self,
        state: &WorldState,
        a_h: Action,
        a_r: Action,
        goal: &GoalGrid,
    ) -> Result<StepResult> {
        if state.dims != goal.dims {
            return Err(Error::DimensionMismatch {
                expected: goal.dims,
                actual: state.dims,
            });
        }
        if self.config.strict {
            if !self.is_valid(state, Player::Human, &a_h) {
                return Err(Error::InvalidAction {
                    player: 0,
                    action: a_h.to_string(),
                });
            }
            if state.players.len() > 1 && !self.is_valid(state, Player::Assistant, &a_r) {
                return Err(Error::InvalidAction {
                    player: 1,
                    action: a_r.to_string(),
                });
            }
        }
        let mut next = state.clone();
        let before_h = edit_reward_cell(&next, &a_h, goal);
        let eh = self.apply_one(&mut next, Player::Human, a_h);
        let reward_human = if eh.is_edit() {
            before_h - edit_reward_cell(&next, &eh, goal)
        } else {
            0.0
        };
        let (er, reward_assistant) = if next.players.len() > 1 {
            let before_r = edit_reward_cell(&next, &a_r, goal);
            let er = self.apply_one(&mut next, Player::Assistant, a_r);
            let r = if er.is_edit() {
                before_r - edit_reward_cell(&next, &er, goal)
            } else {
                0.0
            };
            (er, r)
        } else {
            (Action::NoOp, 0.0)
        };
        for (p, a) in next.players.iter_mut().zip([eh, er]) {
            p.last_action = a;
        }
        next.timestep += 1;
        let distance = grid_distance(&next.grid, &goal.cells);
        let done = distance == 0 || next.timestep >= self.config.horizon;
        Ok(StepResult {
            next_state: next,
            reward_human,
            reward_assistant,
            done,
            human_action: eh,
            assistant_action: er,
            distance,
        })
    }
}

fn in_bounds(dims: Dims, c: Vec3) -> bool {
    (c.x as usize) < dims.w && (c.y as usize) < dims.h && (c.z as usize) < dims.d
}

/// Cost of the cell an edit action touches, as a float; 0 for non-edits.
fn edit_reward_cell(state: &WorldState, action: &Action, goal: &GoalGrid) -> f64 {
    match action.cell() {
        Some(c) if in_bounds(state.dims, c) => {
            let i = state.dims.index(c);
            cell_cost(state.grid[i], goal.cells[i]) as f64
        }
        _ => 0.0,
    }
}

/// The smallest two-player world: a 4×1×1 row with the human at x=0, the
/// assistant at x=3 and the two middle cells editable. Validation is
/// bypassed since the row has no air margin.
pub fn line_world(num_block_types: usize, horizon: u32, reach: u8) -> (Env, WorldState) {
    let dims = Dims::new(4, 1, 1);
    let env = Env::new_unchecked(EnvConfig {
        dims,
        num_block_types,
        horizon,
        reach,
        seed: 0,
        strict: false,
    });
    let state = WorldState::empty(dims, &[Vec3::new(0, 0, 0), Vec3::new(3, 0, 0)]);
    (env, state)
}

// ---------------------------------------------------------------------------
// Episode records and metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub human: Action,
    pub assistant: Action,
    pub reward_human: f64,
    pub reward_assistant: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial_distance: u32,
    pub final_distance: u32,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn new(initial_distance: u32) -> Self {
        Trajectory {
            initial_distance,
            final_distance: initial_distance,
            steps: Vec::new(),
        }
    }

    pub fn push(&mut self, step: &StepResult) {
        self.steps.push(StepRecord {
            human: step.human_action,
            assistant: step.assistant_action,
            reward_human: step.reward_human,
            reward_assistant: step.reward_assistant,
        });
        self.final_distance = step.distance;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalMetrics {
    pub overall_goal_pct: f64,
    pub human_actions: u32,
    pub assistant_goal_pct: f64,
}

pub fn goal_metrics(trajectory: &Trajectory) -> Result<GoalMetrics> {
    let d0 = trajectory.initial_distance;
    if d0 == 0 {
        return Err(Error::DegenerateGoal);
    }
    let d0 = d0 as f64;
    let human_actions = trajectory.steps.iter().filter(|s| s.human.is_edit()).count() as u32;
    let assistant_reward: f64 = trajectory.steps.iter().map(|s| s.reward_assistant).sum();
    Ok(GoalMetrics {
        overall_goal_pct: 100.0 * (1.0 - trajectory.final_distance as f64 / d0),
        human_actions,
        assistant_goal_pct: 100.0 * assistant_reward / d0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn goal_from(dims: Dims, cells: Vec<u8>) -> GoalGrid {
        GoalGrid::from_cells_unchecked(dims, cells.into_iter().map(BlockType).collect())
    }

    fn strict_env(dims: Dims, nb: usize, reach: u8) -> Env {
        Env::new_unchecked(EnvConfig {
            dims,
            num_block_types: nb,
            horizon: 100,
            reach,
            seed: 0,
            strict: true,
        })
    }

    #[test]
    fn new_episode_is_empty_and_deterministic() {
        let env = Env::new(EnvConfig {
            dims: Dims::new(4, 4, 4),
            ..EnvConfig::default()
        })
        .unwrap();
        let goal = GoalGrid::from_cells_unchecked(Dims::new(4, 4, 4), vec![BlockType(1); 64]);
        let a = env.new_episode(&goal, 7).unwrap();
        let b = env.new_episode(&goal, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.grid.iter().all(|b| b.is_air()));
        assert_ne!(a.players[0].position, a.players[1].position);
        assert_eq!(a.timestep, 0);
    }

    #[test]
    fn new_episode_rejects_mismatched_goal() {
        let env = Env::new(EnvConfig::default()).unwrap();
        let goal = GoalGrid::from_cells_unchecked(Dims::new(4, 4, 4), vec![BlockType(1); 64]);
        assert!(matches!(env.new_episode(&goal, 0), Err(Error::Config(_))));
    }

    #[test]
    fn start_positions_vary_with_seed() {
        let env = Env::new(EnvConfig {
            dims: Dims::new(4, 4, 4),
            ..EnvConfig::default()
        })
        .unwrap();
        let goal = GoalGrid::from_cells_unchecked(Dims::new(4, 4, 4), vec![BlockType(1); 64]);
        let mut seen = std::collections::HashSet::new();
        for seed in 0..100 {
            seen.insert(env.new_episode(&goal, seed).unwrap().players[0].position);
        }
        assert!(seen.len() >= 2);
    }

    #[test]
    fn boxed_in_player_can_only_noop() {
        let dims = Dims::new(1, 1, 1);
        let env = strict_env(dims, 4, 3);
        let state = WorldState::empty(dims, &[Vec3::new(0, 0, 0)]);
        assert_eq!(env.valid_actions(&state, Player::Human), vec![Action::NoOp]);
    }

    #[test]
    fn open_neighbourhood_actions() {
        let dims = Dims::new(3, 3, 3);
        let env = strict_env(dims, 3, 1);
        let state = WorldState::empty(dims, &[Vec3::new(1, 1, 1), Vec3::new(0, 0, 0)]);
        let acts = env.valid_actions(&state, Player::Human);
        let moves = acts.iter().filter(|a| matches!(a, Action::Move(_))).count();
        let places = acts.iter().filter(|a| matches!(a, Action::Place { .. })).count();
        let breaks = acts.iter().filter(|a| matches!(a, Action::Break { .. })).count();
        assert_eq!(moves, 6);
        assert_eq!(breaks, 0);
        // 26 neighbours minus the assistant's cell, two solid types each
        assert_eq!(places, 25 * 2);
    }

    #[test]
    fn never_breaks_air() {
        let dims = Dims::new(3, 3, 3);
        let env = strict_env(dims, 3, 2);
        let mut state = WorldState::empty(dims, &[Vec3::new(1, 1, 1), Vec3::new(0, 0, 0)]);
        state.set_block(Vec3::new(2, 2, 2), BlockType(1));
        for a in env.valid_actions(&state, Player::Human) {
            if let Action::Break { cell } = a {
                assert!(!state.block(cell).is_air());
            }
        }
    }

    #[test]
    fn edit_distance_cases() {
        let dims = Dims::new(2, 2, 2);
        let goal = goal_from(dims, vec![1, 1, 1, 1, 1, 0, 0, 0]);
        let mut s = WorldState::empty(dims, &[]);
        assert_eq!(edit_distance(&s, &goal).unwrap(), 5);
        s.grid = goal.cells.clone();
        assert_eq!(edit_distance(&s, &goal).unwrap(), 0);
        s.grid[0] = BlockType(2);
        assert_eq!(edit_distance(&s, &goal).unwrap(), 2);
        let other = goal_from(Dims::new(1, 1, 8), vec![0; 8]);
        assert!(edit_distance(&s, &other).is_err());
    }

    fn line_world() -> (Env, WorldState, GoalGrid) {
        // 4x1x1: human at x=0, assistant at x=3, cells 1 and 2 buildable
        let dims = Dims::new(4, 1, 1);
        let env = strict_env(dims, 3, 3);
        let state = WorldState::empty(dims, &[Vec3::new(0, 0, 0), Vec3::new(3, 0, 0)]);
        let goal = goal_from(dims, vec![0, 1, 0, 0]);
        (env, state, goal)
    }

    #[test]
    fn correct_place_rewards_plus_one() {
        let (env, s, goal) = line_world();
        let place = Action::Place {
            cell: Vec3::new(1, 0, 0),
            block: BlockType(1),
        };
        let r = env.apply(&s, place, Action::NoOp, &goal).unwrap();
        assert_eq!(r.reward_human, 1.0);
        assert_eq!(r.reward_assistant, 0.0);
        assert_eq!(r.next_state.last_modifier[1], Some(Player::Human));
        assert!(r.done);
    }

    #[test]
    fn wrong_place_by_assistant_costs_one() {
        let (env, s, goal) = line_world();
        let place = Action::Place {
            cell: Vec3::new(2, 0, 0),
            block: BlockType(2),
        };
        let r = env.apply(&s, Action::NoOp, place, &goal).unwrap();
        assert_eq!(r.reward_assistant, -1.0);
        assert_eq!(r.reward_human, 0.0);
    }

    #[test]
    fn double_noop_only_advances_time() {
        let (env, s, goal) = line_world();
        let r = env.apply(&s, Action::NoOp, Action::NoOp, &goal).unwrap();
        assert_eq!(r.reward_human + r.reward_assistant, 0.0);
        assert_eq!(r.next_state.grid, s.grid);
        assert_eq!(r.next_state.timestep, 1);
    }

    #[test]
    fn same_cell_conflict_resolves_human_first() {
        let (env, s, goal) = line_world();
        let cell = Vec3::new(1, 0, 0);
        let h = Action::Place {
            cell,
            block: BlockType(1),
        };
        let r_act = Action::Place {
            cell,
            block: BlockType(2),
        };
        let r = env.apply(&s, h, r_act, &goal).unwrap();
        assert_eq!(r.next_state.block(cell), BlockType(1));
        assert_eq!(r.assistant_action, Action::NoOp);
        assert_eq!(r.reward_assistant, 0.0);
        assert_eq!(r.reward_human, 1.0);
    }

    #[test]
    fn strict_mode_rejects_invalid() {
        let (env, s, goal) = line_world();
        let bad = Action::Break {
            cell: Vec3::new(1, 0, 0),
        };
        assert!(matches!(
            env.apply(&s, bad, Action::NoOp, &goal),
            Err(Error::InvalidAction { player: 0, .. })
        ));
    }

    #[test]
    fn lenient_mode_degrades_invalid_to_noop() {
        let (_, s, goal) = line_world();
        let env = Env::new_unchecked(EnvConfig {
            dims: s.dims,
            num_block_types: 3,
            horizon: 10,
            reach: 3,
            seed: 0,
            strict: false,
        });
        let bad = Action::Break {
            cell: Vec3::new(1, 0, 0),
        };
        let r = env.apply(&s, bad, Action::NoOp, &goal).unwrap();
        assert_eq!(r.human_action, Action::NoOp);
        assert_eq!(r.reward_human, 0.0);
    }

    #[test]
    fn metrics_examples() {
        let mut t = Trajectory::new(10);
        let place = Action::Place {
            cell: Vec3::new(0, 0, 0),
            block: BlockType(1),
        };
        for r in [1.0, 1.0, -1.0] {
            t.steps.push(StepRecord {
                human: Action::NoOp,
                assistant: place,
                reward_human: 0.0,
                reward_assistant: r,
            });
        }
        t.final_distance = 9;
        let m = goal_metrics(&t).unwrap();
        assert!((m.assistant_goal_pct - 10.0).abs() < 1e-12);
        assert_eq!(m.human_actions, 0);
        assert!((m.overall_goal_pct - 10.0).abs() < 1e-12);

        t.final_distance = 0;
        assert_eq!(goal_metrics(&t).unwrap().overall_goal_pct, 100.0);
        assert!(matches!(goal_metrics(&Trajectory::new(0)), Err(Error::DegenerateGoal)));
    }

    #[test]
    fn action_codes_round_trip() {
        let space = ActionSpace::new(Dims::new(3, 2, 4), 4);
        for code in 0..space.size() {
            if let Some(a) = space.decode(code) {
                assert_eq!(space.encode(&a), code);
            } else {
                // only the air place slots fail to decode
                assert_eq!(space.action_type(code), ActionType::Place);
            }
        }
    }
}
