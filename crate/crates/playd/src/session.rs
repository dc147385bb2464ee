//! One human and one assistant sharing a world. Human actions are queued
//! as they arrive and applied one per tick together with the assistant's
//! action for that tick.
//!
//! The assistant sees the world only through [`WorldState`] bytes passed
//! across [`Session::assistant_input`]; the goal never crosses it.

use std::collections::VecDeque;

use mbag::goals::GoalGrid;
use mbag::net::dist::softmax_rows;
use mbag::net::encode_observation;
use mbag::training::NetAssistant;
use mbag::world::{edit_distance, goal_metrics, Action, Env, EnvConfig, Player, Trajectory, WorldState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::protocol::{
    decode_act, palette, BeliefCell, ClientMsg, DecodeError, DisplayMode, InvalidReason, Metrics, PlayerView,
    ServerMsg,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub tick_ms: u64,
    /// Send a belief snapshot every this many ticks; 0 sends only on request.
    pub belief_every: u64,
    pub display_mode: DisplayMode,
    /// Bound on queued human actions.
    pub queue_capacity: usize,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            tick_ms: 250,
            belief_every: 0,
            display_mode: DisplayMode::Full,
            queue_capacity: 8,
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tick_ms == 0 {
            return Err(Error::Config("tick_ms must be positive".into()));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue_capacity must be positive".into()));
        }
        Ok(())
    }
}

/// The assistant side of a session.
pub enum AssistantRuntime {
    None,
    Net(NetAssistant),
}

type Tap = Box<dyn FnMut(&[u8]) + Send>;

pub struct Session {
    env: Env,
    goal: GoalGrid,
    state: WorldState,
    assistant: AssistantRuntime,
    queue: VecDeque<Action>,
    trajectory: Trajectory,
    ticks: u64,
    done: bool,
    closed: bool,
    config: SessionConfig,
    rng: ChaCha8Rng,
    tap: Option<Tap>,
}

fn pos(v: mbag::world::Vec3) -> [u8; 3] {
    [v.x, v.y, v.z]
}

impl Session {
    pub fn new(
        env_config: EnvConfig,
        goal: GoalGrid,
        assistant: AssistantRuntime,
        config: SessionConfig,
        episode_seed: u64,
    ) -> Result<Session> {
        config.validate()?;
        let env = Env::new(env_config)?;
        if let AssistantRuntime::Net(a) = &assistant {
            let c = &a.net.config;
            if c.dims != env.config().dims || c.num_block_types != env.config().num_block_types {
                return Err(Error::Config("assistant checkpoint does not match the environment".into()));
            }
        }
        let state = env.new_episode(&goal, episode_seed)?;
        let d0 = edit_distance(&state, &goal)?;
        if d0 == 0 {
            return Err(Error::Core(mbag::Error::DegenerateGoal));
        }
        let mut assistant = assistant;
        if let AssistantRuntime::Net(a) = &mut assistant {
            a.reset();
        }
        Ok(Session {
            env,
            goal,
            state,
            assistant,
            queue: VecDeque::new(),
            trajectory: Trajectory::new(d0),
            ticks: 0,
            done: false,
            closed: false,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            tap: None,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// True once the client said `bye`.
    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    /// Observes every byte string handed to the assistant.
    pub fn set_assistant_tap(&mut self, tap: impl FnMut(&[u8]) + Send + 'static) {
        self.tap = Some(Box::new(tap));
    }

    pub fn hello(&self) -> ServerMsg {
        let c = self.env.config();
        ServerMsg::Hello {
            dims: [c.dims.w, c.dims.h, c.dims.d],
            palette: palette(c.num_block_types),
            goal: self.goal.cells.iter().map(|b| b.0).collect(),
            display_mode: self.config.display_mode,
            tick_ms: self.config.tick_ms,
            horizon: c.horizon,
            reach: c.reach,
        }
    }

    pub fn metrics(&self) -> Metrics {
        let m = goal_metrics(&self.trajectory).expect("non-degenerate goal checked at start");
        Metrics {
            overall_goal_pct: m.overall_goal_pct,
            human_actions: m.human_actions,
            assistant_goal_pct: m.assistant_goal_pct,
            timestep: self.state.timestep,
            ticks: self.ticks,
        }
    }

    pub fn snapshot(&self) -> ServerMsg {
        let space = self.env.action_space();
        let roles = ["human", "assistant"];
        ServerMsg::State {
            grid: self.state.grid.iter().map(|b| b.0).collect(),
            players: self
                .state
                .players
                .iter()
                .zip(roles)
                .map(|(p, r)| PlayerView {
                    role: r.into(),
                    pos: pos(p.position),
                    last_action: space.encode(&p.last_action) as u32,
                })
                .collect(),
            timestep: self.state.timestep,
            metrics: self.metrics(),
            done: self.done,
        }
    }

    pub fn bye(&self) -> ServerMsg {
        ServerMsg::Bye { metrics: self.metrics() }
    }

    /// Handles one client text message; returns the immediate replies.
    pub fn handle_client(&mut self, text: &str) -> Vec<ServerMsg> {
        let msg: ClientMsg = match serde_json::from_str(text) {
            Ok(m) => m,
            Err(e) => {
                return vec![ServerMsg::Error {
                    message: format!("malformed message: {e}"),
                }]
            }
        };
        match msg {
            ClientMsg::Act {
                kind,
                cell,
                block,
                dir,
                code,
            } => {
                let space = self.env.action_space();
                match decode_act(space, kind, cell, block, dir.as_deref(), code) {
                    Ok(a) => self.handle_human_action(a).err().into_iter().collect(),
                    Err(DecodeError::Invalid(reason)) => vec![ServerMsg::Invalid { reason }],
                    Err(DecodeError::Malformed(message)) => vec![ServerMsg::Error { message }],
                }
            }
            ClientMsg::Belief => match self.belief_snapshot() {
                Ok(Some(cells)) => vec![ServerMsg::Belief { cells }],
                Ok(None) => vec![ServerMsg::Error {
                    message: "assistant has no goal belief".into(),
                }],
                Err(e) => vec![ServerMsg::Error { message: e.to_string() }],
            },
            ClientMsg::Bye => {
                self.closed = true;
                vec![self.bye()]
            }
        }
    }

    /// Validates and queues a human action for the next tick.
    pub fn handle_human_action(&mut self, action: Action) -> std::result::Result<(), ServerMsg> {
        let reject = |reason| Err(ServerMsg::Invalid { reason });
        if self.done {
            return reject(InvalidReason::EpisodeOver);
        }
        if !self.env.is_valid(&self.state, Player::Human, &action) {
            return reject(invalid_reason(&self.env, &self.state, &action));
        }
        if self.queue.len() >= self.config.queue_capacity {
            return reject(InvalidReason::QueueFull);
        }
        self.queue.push_back(action);
        Ok(())
    }

    /// The bytes the assistant runtime consumes for the current state.
    pub fn assistant_input(&mut self) -> Result<Vec<u8>> {
        let bytes = serde_json::to_vec(&self.state)?;
        if let Some(tap) = self.tap.as_mut() {
            tap(&bytes);
        }
        Ok(bytes)
    }

    /// One tick: at most one queued human action and one assistant action
    /// go through a single environment step.
    pub fn tick(&mut self) -> Result<Vec<ServerMsg>> {
        if self.done {
            return Ok(vec![self.snapshot()]);
        }
        let mut out = Vec::new();
        let mut human = self.queue.pop_front().unwrap_or(Action::NoOp);
        if !self.env.is_valid(&self.state, Player::Human, &human) {
            out.push(ServerMsg::Invalid {
                reason: InvalidReason::Stale,
            });
            human = Action::NoOp;
        }
        let view = self.assistant_input()?;
        let assistant = match &mut self.assistant {
            AssistantRuntime::None => Action::NoOp,
            AssistantRuntime::Net(a) => {
                let seen: WorldState = serde_json::from_slice(&view)?;
                a.decide(&self.env, &seen, &mut self.rng)?.action
            }
        };
        let step = self.env.apply(&self.state, human, assistant, &self.goal)?;
        self.trajectory.push(&step);
        self.state = step.next_state;
        self.ticks += 1;
        self.done = step.done;
        if self.done {
            self.queue.clear();
        }
        out.push(self.snapshot());
        if self.config.belief_every > 0 && self.ticks % self.config.belief_every == 0 {
            if let Some(cells) = self.belief_snapshot()? {
                out.push(ServerMsg::Belief { cells });
            }
        }
        if self.done {
            out.push(self.bye());
        }
        Ok(out)
    }

    /// Full per-cell goal distribution of the assistant at the current
    /// state, `cells × B`, without advancing its memory.
    pub fn belief_distribution(&mut self) -> Result<Option<Vec<f64>>> {
        let view = self.assistant_input()?;
        let AssistantRuntime::Net(a) = &self.assistant else {
            return Ok(None);
        };
        if !a.net.has_goal_head() {
            return Ok(None);
        }
        let seen: WorldState = serde_json::from_slice(&view)?;
        let obs = encode_observation(&seen, Player::Assistant, None, &a.net.obs_spec())?;
        let raw = a.net.forward_raw(&obs, a.carry.as_deref())?;
        let logits = raw.goal_logits.expect("goal head present");
        Ok(Some(softmax_rows(&logits, a.net.config.num_block_types)))
    }

    /// Per-cell most likely goal block and its probability.
    pub fn belief_snapshot(&mut self) -> Result<Option<Vec<BeliefCell>>> {
        let nb = self.env.config().num_block_types;
        Ok(self.belief_distribution()?.map(|dist| {
            dist.chunks(nb)
                .map(|row| {
                    let (b, p) = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
                    BeliefCell { block: b as u8, p }
                })
                .collect()
        }))
    }
}

/// Human-readable cause for an action `Env::is_valid` rejected.
pub fn invalid_reason(env: &Env, state: &WorldState, action: &Action) -> InvalidReason {
    let me = state.player(Player::Human);
    let reach = env.config().reach;
    match *action {
        Action::NoOp => InvalidReason::Blocked,
        Action::Move(_) => InvalidReason::Blocked,
        Action::Break { cell } => {
            if state.block(cell).is_air() {
                InvalidReason::BreakAir
            } else if me.position.chebyshev(cell) > reach {
                InvalidReason::OutOfReach
            } else {
                InvalidReason::Blocked
            }
        }
        Action::Place { cell, block } => {
            if block.is_air() || block.index() >= env.config().num_block_types {
                InvalidReason::BadBlock
            } else if !state.block(cell).is_air() {
                InvalidReason::CellFilled
            } else if state.is_occupied(cell) {
                InvalidReason::Occupied
            } else if me.position.chebyshev(cell) > reach {
                InvalidReason::OutOfReach
            } else {
                InvalidReason::Blocked
            }
        }
    }
}
