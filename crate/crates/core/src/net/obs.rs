//! Per-cell observation features, channel-last.
//!
//! Channel groups, in order: current block one-hot, goal block one-hot (all
//! zero when the goal is hidden), occupancy one-hot (none / self / other),
//! last-modifier one-hot (none / self / other), the timestep divided by
//! 1000, and optionally the observer's previous action laid out like the
//! action head (7 global channels broadcast to every cell, one break
//! channel, one place channel per block type).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goals::GoalGrid;
use crate::world::{Action, Player, WorldState, NUM_GLOBAL_ACTIONS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsSpec {
    pub num_block_types: usize,
    pub prev_action: bool,
}

impl ObsSpec {
    pub fn channels(&self) -> usize {
        let b = self.num_block_types;
        let base = 2 * b + 7;
        if self.prev_action {
            base + b + NUM_GLOBAL_ACTIONS + 1
        } else {
            base
        }
    }

    pub fn block_offset(&self) -> usize {
        0
    }

    pub fn goal_offset(&self) -> usize {
        self.num_block_types
    }

    pub fn occupancy_offset(&self) -> usize {
        2 * self.num_block_types
    }

    pub fn modifier_offset(&self) -> usize {
        2 * self.num_block_types + 3
    }

    pub fn time_offset(&self) -> usize {
        2 * self.num_block_types + 6
    }

    pub fn prev_action_offset(&self) -> usize {
        2 * self.num_block_types + 7
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObsTensor {
    pub cells: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ObsTensor {
    pub fn at(&self, cell: usize, ch: usize) -> f64 {
        self.data[cell * self.channels + ch]
    }

    /// Zeroes the goal channels in place.
    pub fn strip_goal(&mut self, spec: &ObsSpec) {
        let g0 = spec.goal_offset();
        for row in self.data.chunks_exact_mut(self.channels) {
            row[g0..g0 + spec.num_block_types].fill(0.0);
        }
    }

    pub fn goal_channels_zero(&self, spec: &ObsSpec) -> bool {
        let g0 = spec.goal_offset();
        self.data
            .chunks_exact(self.channels)
            .all(|row| row[g0..g0 + spec.num_block_types].iter().all(|&v| v == 0.0))
    }
}

/// Encodes `state` from `role`'s point of view. The assistant never sees
/// the goal; a human observation without a goal has zeroed goal channels.
pub fn encode_observation(
    state: &WorldState,
    role: Player,
    goal: Option<&GoalGrid>,
    spec: &ObsSpec,
) -> Result<ObsTensor> {
    if role == Player::Assistant && goal.is_some() {
        return Err(Error::Contract(
            "the assistant observation must not include the goal".into(),
        ));
    }
    if let Some(g) = goal {
        if g.dims != state.dims {
            return Err(Error::DimensionMismatch {
                expected: state.dims,
                actual: g.dims,
            });
        }
    }
    let n = state.dims.volume();
    let ch = spec.channels();
    let mut data = vec![0.0; n * ch];
    let b = spec.num_block_types;
    let t = state.timestep as f64 / 1000.0;
    let me = role.index();
    let occ = spec.occupancy_offset();
    let modo = spec.modifier_offset();
    for (i, row) in data.chunks_exact_mut(ch).enumerate() {
        let block = state.grid[i].index();
        if block >= b {
            return Err(Error::Shape(format!("block code {block} exceeds {b} types")));
        }
        row[block] = 1.0;
        if let Some(g) = goal {
            row[spec.goal_offset() + g.cells[i].index()] = 1.0;
        }
        row[occ] = 1.0;
        row[modo + relative(state.last_modifier[i].map(|p| p.index()), me)] = 1.0;
        row[spec.time_offset()] = t;
    }
    for (pi, p) in state.players.iter().enumerate() {
        let i = state.dims.index(p.position);
        let row = &mut data[i * ch..(i + 1) * ch];
        row[occ] = 0.0;
        row[occ + relative(Some(pi), me)] = 1.0;
    }
    if spec.prev_action {
        let p0 = spec.prev_action_offset();
        if let Some(me_state) = state.players.get(me) {
            match me_state.last_action {
                Action::NoOp => set_global(&mut data, ch, p0),
                Action::Move(d) => set_global(&mut data, ch, p0 + 1 + d.index()),
                Action::Break { cell } => {
                    let i = state.dims.index(cell);
                    data[i * ch + p0 + NUM_GLOBAL_ACTIONS] = 1.0;
                }
                Action::Place { cell, block } => {
                    let i = state.dims.index(cell);
                    data[i * ch + p0 + NUM_GLOBAL_ACTIONS + 1 + block.index()] = 1.0;
                }
            }
        }
    }
    Ok(ObsTensor {
        cells: n,
        channels: ch,
        data,
    })
}

fn relative(player: Option<usize>, me: usize) -> usize {
    match player {
        None => 0,
        Some(p) if p == me => 1,
        Some(_) => 2,
    }
}

fn set_global(data: &mut [f64], ch: usize, offset: usize) {
    for row in data.chunks_exact_mut(ch) {
        row[offset] = 1.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goals::generate_house;
    use crate::world::{BlockType, Dims, Vec3};

    const SPEC: ObsSpec = ObsSpec {
        num_block_types: 4,
        prev_action: false,
    };

    fn state() -> WorldState {
        WorldState::empty(Dims::new(6, 6, 6), &[Vec3::new(0, 0, 0), Vec3::new(5, 5, 5)])
    }

    #[test]
    fn all_air_sets_air_channel() {
        let obs = encode_observation(&state(), Player::Assistant, None, &SPEC).unwrap();
        for c in 0..obs.cells {
            assert_eq!(obs.at(c, 0), 1.0);
            for b in 1..4 {
                assert_eq!(obs.at(c, b), 0.0);
            }
        }
    }

    #[test]
    fn one_hot_groups_sum_to_one() {
        let mut s = state();
        s.set_block(Vec3::new(2, 2, 2), BlockType(3));
        s.last_modifier[s.dims.index(Vec3::new(2, 2, 2))] = Some(Player::Human);
        let goal = generate_house(1, s.dims, 4).unwrap();
        let obs = encode_observation(&s, Player::Human, Some(&goal), &SPEC).unwrap();
        for c in 0..obs.cells {
            for (off, len) in [(0, 4), (4, 4), (8, 3), (11, 3)] {
                let sum: f64 = (off..off + len).map(|k| obs.at(c, k)).sum();
                assert_eq!(sum, 1.0);
            }
        }
    }

    #[test]
    fn assistant_view_ignores_goal() {
        let s = state();
        let a = encode_observation(&s, Player::Assistant, None, &SPEC).unwrap();
        let goal = generate_house(3, s.dims, 4).unwrap();
        assert!(encode_observation(&s, Player::Assistant, Some(&goal), &SPEC).is_err());
        // same state, different hidden goal: identical tensors by construction
        let b = encode_observation(&s, Player::Assistant, None, &SPEC).unwrap();
        assert_eq!(a, b);
        assert!(a.goal_channels_zero(&SPEC));
    }

    #[test]
    fn timestep_channel_scales_by_thousand() {
        let mut s = state();
        s.timestep = 500;
        let obs = encode_observation(&s, Player::Assistant, None, &SPEC).unwrap();
        for c in 0..obs.cells {
            assert_eq!(obs.at(c, SPEC.time_offset()), 0.5);
        }
    }

    #[test]
    fn previous_action_is_encoded_for_the_observer() {
        let spec = ObsSpec {
            num_block_types: 4,
            prev_action: true,
        };
        let mut s = state();
        let cell = Vec3::new(1, 1, 1);
        s.players[0].last_action = Action::Place {
            cell,
            block: BlockType(2),
        };
        let obs = encode_observation(&s, Player::Human, None, &spec).unwrap();
        let i = s.dims.index(cell);
        assert_eq!(obs.at(i, spec.prev_action_offset() + 8 + 2), 1.0);
        let total: f64 = (0..obs.cells)
            .flat_map(|c| (0..12).map(move |k| (c, k)))
            .map(|(c, k)| obs.at(c, spec.prev_action_offset() + k))
            .sum();
        assert_eq!(total, 1.0);
    }
}
