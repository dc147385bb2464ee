//! Wire messages. Every message is one JSON object with a `type` field.
//!
//! Grids are flat arrays in goal-file order (index `(y*d + z)*w + x`),
//! cells are `[x, y, z]`, and action codes match the trajectory corpus.

use mbag::world::{Action, ActionSpace, BlockType, Direction, Dims, Vec3};
use serde::{Deserialize, Serialize};

/// How the client shows the goal blueprint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplayMode {
    #[default]
    Full,
    PlaceableOnly,
    Hidden,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlayerView {
    pub role: String,
    pub pos: [u8; 3],
    /// Code of the player's last executed action.
    pub last_action: u32,
}

/// Running episode metrics in the evaluation columns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_goal_pct: f64,
    /// Accepted human place/break actions.
    pub human_actions: u32,
    pub assistant_goal_pct: f64,
    pub timestep: u32,
    pub ticks: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefCell {
    pub block: u8,
    pub p: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    OutOfBounds,
    OutOfReach,
    BadBlock,
    BreakAir,
    CellFilled,
    Occupied,
    Blocked,
    /// Valid when sent but no longer valid when its tick came.
    Stale,
    QueueFull,
    EpisodeOver,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Hello {
        dims: [usize; 3],
        palette: Vec<String>,
        goal: Vec<u8>,
        display_mode: DisplayMode,
        tick_ms: u64,
        horizon: u32,
        reach: u8,
    },
    State {
        grid: Vec<u8>,
        players: Vec<PlayerView>,
        timestep: u32,
        metrics: Metrics,
        done: bool,
    },
    Invalid {
        reason: InvalidReason,
    },
    Belief {
        cells: Vec<BeliefCell>,
    },
    Bye {
        metrics: Metrics,
    },
    Error {
        message: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActKind {
    Noop,
    Move,
    Place,
    Break,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    /// Either `kind` with its fields, or a raw action `code`.
    Act {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kind: Option<ActKind>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cell: Option<[i64; 3]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        block: Option<i64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        code: Option<u32>,
    },
    /// Request a belief snapshot.
    Belief,
    Bye,
}

impl ClientMsg {
    pub fn act(action: &Action) -> ClientMsg {
        let (kind, cell, block, dir) = match *action {
            Action::NoOp => (ActKind::Noop, None, None, None),
            Action::Move(d) => (ActKind::Move, None, None, Some(d.name().to_string())),
            Action::Place { cell, block } => (ActKind::Place, Some(cell), Some(block.0 as i64), None),
            Action::Break { cell } => (ActKind::Break, Some(cell), None, None),
        };
        ClientMsg::Act {
            kind: Some(kind),
            cell: cell.map(|c| [c.x as i64, c.y as i64, c.z as i64]),
            block,
            dir,
            code: None,
        }
    }
}

/// Why an `act` could not be turned into an action.
#[derive(Clone, Debug, PartialEq)]
pub enum DecodeError {
    /// Malformed message: reported as `error`.
    Malformed(String),
    /// Well-formed but names something outside the world: reported as `invalid`.
    Invalid(InvalidReason),
}

/// Converts `act` fields to an action in `space`.
pub fn decode_act(
    space: &ActionSpace,
    kind: Option<ActKind>,
    cell: Option<[i64; 3]>,
    block: Option<i64>,
    dir: Option<&str>,
    code: Option<u32>,
) -> Result<Action, DecodeError> {
    if let Some(code) = code {
        if kind.is_some() {
            return Err(DecodeError::Malformed("act has both `kind` and `code`".into()));
        }
        return space
            .decode(code as usize)
            .ok_or(DecodeError::Invalid(InvalidReason::OutOfBounds));
    }
    let kind = kind.ok_or_else(|| DecodeError::Malformed("act needs `kind` or `code`".into()))?;
    let need_cell = || -> Result<Vec3, DecodeError> {
        let [x, y, z] = cell.ok_or_else(|| DecodeError::Malformed("act needs `cell`".into()))?;
        let Dims { w, h, d } = space.dims;
        let inside = |v: i64, n: usize| (0..n as i64).contains(&v);
        if inside(x, w) && inside(y, h) && inside(z, d) {
            Ok(Vec3::new(x as u8, y as u8, z as u8))
        } else {
            Err(DecodeError::Invalid(InvalidReason::OutOfBounds))
        }
    };
    match kind {
        ActKind::Noop => Ok(Action::NoOp),
        ActKind::Move => {
            let name = dir.ok_or_else(|| DecodeError::Malformed("move needs `dir`".into()))?;
            Direction::from_name(name)
                .map(Action::Move)
                .ok_or_else(|| DecodeError::Malformed(format!("unknown direction `{name}`")))
        }
        ActKind::Break => Ok(Action::Break { cell: need_cell()? }),
        ActKind::Place => {
            let cell = need_cell()?;
            let b = block.ok_or_else(|| DecodeError::Malformed("place needs `block`".into()))?;
            if b <= 0 || b as usize >= space.num_block_types {
                return Err(DecodeError::Invalid(InvalidReason::BadBlock));
            }
            Ok(Action::Place {
                cell,
                block: BlockType(b as u8),
            })
        }
    }
}

/// Display names for block ids; id 0 is air.
pub fn palette(num_block_types: usize) -> Vec<String> {
    const NAMES: [&str; 10] = [
        "air", "stone", "dirt", "planks", "cobblestone", "glass", "wool", "bricks", "sandstone", "log",
    ];
    (0..num_block_types)
        .map(|i| NAMES.get(i).map_or_else(|| format!("block{i}"), |s| s.to_string()))
        .collect()
}
