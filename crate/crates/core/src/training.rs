//! Trainers: AssistanceZero, single-agent AlphaZero for the human role, the
//! PPO assistant baseline and the pretrain/SFT pipeline, together with the
//! fragment replay buffer, the assistant agents and the episode runner they
//! share with evaluation.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goals::{GoalGrid, GoalSet};
use crate::humans::{
    bc_continue, bc_train, boltzmann_act, net_act, BcConfig, BcDataset, BoltzmannConfig, BoltzmannHuman, Corpus,
    EpisodeRecord, HumanModel, Memory,
};
use crate::mcts::{MctsConfig, NetEvaluator, Partner, RewardMode, SearchSpec};
use crate::net::dist::{head_channels, log_softmax_rows, GroupedSoftmax};
use crate::net::{
    checkpoint, encode_observation, loss_and_grads, Adam, AdamConfig, Fragment, HeadGrads,
    LossBreakdown, LossWeights, NetConfig, Network, StepMasks, TrainBatch, TrainStep,
};
use crate::world::{
    edit_distance, grid_distance, Action, Env, EnvConfig, Player, Trajectory, WorldState,
    NUM_GLOBAL_ACTIONS,
};

// ---------------------------------------------------------------------------
// Assistant agents
// ---------------------------------------------------------------------------

/// How a network assistant turns its outputs into actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AssistantMode {
    PolicyHead { temperature: f64 },
    Mcts { config: MctsConfig },
}

/// What an assistant decided, with the distribution it sampled from.
#[derive(Clone, Debug)]
pub struct AssistantStep {
    pub action: Action,
    pub codes: Vec<u32>,
    pub probs: Vec<f64>,
    /// Per-cell goal belief, when the network has a goal head.
    pub belief: Option<Vec<f64>>,
    pub value: f64,
}

pub trait AssistantAgent {
    fn name(&self) -> &str;

    /// Episode start. Only scripted demonstrators may read the goal;
    /// learned assistants must ignore it.
    fn begin(&mut self, scripted_goal: &GoalGrid);

    fn act(&mut self, env: &Env, state: &WorldState, rng: &mut ChaCha8Rng) -> Result<Action>;
}

/// The human builds alone.
#[derive(Clone, Debug, Default)]
pub struct NoAssistant;

impl AssistantAgent for NoAssistant {
    fn name(&self) -> &str {
        "none"
    }

    fn begin(&mut self, _scripted_goal: &GoalGrid) {}

    fn act(&mut self, _env: &Env, _state: &WorldState, _rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(Action::NoOp)
    }
}

/// Goal-aware Boltzmann builder in the assistant slot; the demonstrator
/// for supervised fine-tuning.
#[derive(Clone, Debug)]
pub struct ScriptedAssistant {
    pub config: BoltzmannConfig,
    goal: Option<GoalGrid>,
}

impl ScriptedAssistant {
    pub fn new(config: BoltzmannConfig) -> Self {
        ScriptedAssistant { config, goal: None }
    }
}

impl AssistantAgent for ScriptedAssistant {
    fn name(&self) -> &str {
        "scripted"
    }

    fn begin(&mut self, scripted_goal: &GoalGrid) {
        self.goal = Some(scripted_goal.clone());
    }

    fn act(&mut self, env: &Env, state: &WorldState, rng: &mut ChaCha8Rng) -> Result<Action> {
        let goal = self
            .goal
            .as_ref()
            .ok_or_else(|| Error::Contract("scripted assistant used before begin".into()))?;
        Ok(boltzmann_act(env, state, goal, &self.config, Player::Assistant, rng).action)
    }
}

/// A checkpointed assistant: policy head or belief search, recurrent
/// carry threaded across the episode. Never sees the goal.
#[derive(Clone, Debug)]
pub struct NetAssistant {
    pub name: String,
    pub net: Arc<Network>,
    pub mode: AssistantMode,
    pub carry: Option<Vec<f64>>,
}

impl NetAssistant {
    pub fn new(name: impl Into<String>, net: Arc<Network>, mode: AssistantMode) -> Self {
        NetAssistant {
            name: name.into(),
            net,
            mode,
            carry: None,
        }
    }

    pub fn reset(&mut self) {
        self.carry = None;
    }

    pub fn decide(&mut self, env: &Env, state: &WorldState, rng: &mut ChaCha8Rng) -> Result<AssistantStep> {
        let net = &*self.net;
        let space = env.action_space();
        match &self.mode {
            AssistantMode::PolicyHead { temperature } => {
                let obs = encode_observation(state, Player::Assistant, None, &net.obs_spec())?;
                let raw = net.forward_raw(&obs, self.carry.as_deref())?;
                let mut codes = Vec::new();
                env.valid_codes(state, Player::Assistant, &mut codes);
                let probs =
                    crate::humans::policy_distribution(&raw.policy_logits, net, &codes, *temperature);
                let belief = raw
                    .goal_logits
                    .as_ref()
                    .map(|g| crate::net::dist::softmax_rows(g, net.config.num_block_types));
                self.carry = raw.carry;
                let i = crate::mcts::sample_index(&probs, rng);
                Ok(AssistantStep {
                    action: space.decode(codes[i] as usize).expect("valid code decodes"),
                    codes,
                    probs,
                    belief,
                    value: raw.value,
                })
            }
            AssistantMode::Mcts { config } => {
                let evaluator = NetEvaluator {
                    net,
                    role: Player::Assistant,
                    goal: None,
                    zero_value: false,
                };
                let partner = if net.has_human_head() {
                    Partner::Predicted
                } else {
                    Partner::NoOp
                };
                let spec = SearchSpec {
                    env,
                    searcher: Player::Assistant,
                    evaluator: &evaluator,
                    partner,
                    goal: None,
                    config,
                };
                let tree = spec.run(state, self.carry.as_deref(), rng)?;
                let policy = tree.policy(config);
                let code = policy.sample(rng);
                self.carry = tree.root().eval.carry.clone();
                Ok(AssistantStep {
                    action: space.decode(code as usize).expect("valid code decodes"),
                    codes: policy.codes,
                    probs: policy.probs,
                    belief: policy.belief,
                    value: policy.root_value,
                })
            }
        }
    }
}

impl AssistantAgent for NetAssistant {
    fn name(&self) -> &str {
        &self.name
    }

    fn begin(&mut self, _scripted_goal: &GoalGrid) {
        self.reset();
    }

    fn act(&mut self, env: &Env, state: &WorldState, rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(self.decide(env, state, rng)?.action)
    }
}

// ---------------------------------------------------------------------------
// Episode runner and corpus generation
// ---------------------------------------------------------------------------

/// Plays one episode to completion or the horizon.
pub fn run_episode(
    env: &Env,
    goal: &GoalGrid,
    episode_seed: u64,
    human: &dyn HumanModel,
    assistant: &mut dyn AssistantAgent,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<(u32, u32)>, Trajectory)> {
    let space = env.action_space();
    let mut s = env.new_episode(goal, episode_seed)?;
    let mut tr = Trajectory::new(edit_distance(&s, goal)?);
    let mut codes = Vec::new();
    let mut memory = Memory::default();
    assistant.begin(goal);
    loop {
        let ah = human.act(env, &s, goal, &mut memory, rng)?.action;
        let ar = assistant.act(env, &s, rng)?;
        let step = env.apply(&s, ah, ar, goal)?;
        codes.push((
            space.encode(&step.human_action) as u32,
            space.encode(&step.assistant_action) as u32,
        ));
        tr.push(&step);
        s = step.next_state;
        if step.done {
            break;
        }
    }
    Ok((codes, tr))
}

/// Episodes on goals drawn uniformly from `goals`, recorded as a corpus.
pub fn generate_rollouts(
    env_config: &EnvConfig,
    goals: &GoalSet,
    human: &dyn HumanModel,
    assistant: &mut dyn AssistantAgent,
    n_episodes: usize,
    strip_goal: bool,
    seed: u64,
) -> Result<(Corpus, Vec<Trajectory>)> {
    collect_rollouts(env_config, goals, HumanSource::Fixed(human), assistant, n_episodes, strip_goal, seed)
}

/// Rollouts with a Boltzmann human whose β is drawn per episode, uniformly
/// from `beta_range`, so the corpus mixes careful and sloppy builders.
pub fn mixed_boltzmann_rollouts(
    env_config: &EnvConfig,
    goals: &GoalSet,
    beta_range: (f64, f64),
    assistant: &mut dyn AssistantAgent,
    n_episodes: usize,
    strip_goal: bool,
    seed: u64,
) -> Result<(Corpus, Vec<Trajectory>)> {
    let (lo, hi) = beta_range;
    if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
        return Err(Error::Config(format!("beta range ({lo}, {hi}) must satisfy 0 <= lo <= hi")));
    }
    collect_rollouts(env_config, goals, HumanSource::BetaRange(lo, hi), assistant, n_episodes, strip_goal, seed)
}

enum HumanSource<'a> {
    Fixed(&'a dyn HumanModel),
    BetaRange(f64, f64),
}

fn collect_rollouts(
    env_config: &EnvConfig,
    goals: &GoalSet,
    human: HumanSource,
    assistant: &mut dyn AssistantAgent,
    n_episodes: usize,
    strip_goal: bool,
    seed: u64,
) -> Result<(Corpus, Vec<Trajectory>)> {
    if n_episodes == 0 {
        return Err(Error::Config("rollouts need at least one episode".into()));
    }
    let env = Env::new(env_config.clone())?;
    if goals.dims() != env_config.dims {
        return Err(Error::Config("goal set dims do not match the environment".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut trajectories = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let goal_id = rng.random_range(0..goals.len());
        let ep_seed: u64 = rng.random();
        let goal = &goals.goals[goal_id];
        let (steps, tr) = match human {
            HumanSource::Fixed(h) => run_episode(&env, goal, ep_seed, h, assistant, &mut rng)?,
            HumanSource::BetaRange(lo, hi) => {
                let h = BoltzmannHuman::new(BoltzmannConfig {
                    beta: rng.random_range(lo..=hi),
                    ..BoltzmannConfig::default()
                });
                run_episode(&env, goal, ep_seed, &h, assistant, &mut rng)?
            }
        };
        episodes.push(EpisodeRecord {
            goal_id,
            seed: ep_seed,
            steps,
        });
        trajectories.push(tr);
    }
    Ok((
        Corpus {
            env: env_config.clone(),
            goal_visible: !strip_goal,
            episodes,
        },
        trajectories,
    ))
}

// ---------------------------------------------------------------------------
// Replay buffer
// ---------------------------------------------------------------------------

pub trait StepCount {
    fn num_steps(&self) -> usize;
}

/// FIFO store of whole fragments with a capacity in timesteps.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<F> {
    capacity: usize,
    fragments: VecDeque<F>,
    stored: usize,
}

impl<F: StepCount> ReplayBuffer<F> {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            fragments: VecDeque::new(),
            stored: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stored_steps(&self) -> usize {
        self.stored
    }

    pub fn num_fragments(&self) -> usize {
        self.fragments.len()
    }

    /// Adds a fragment, evicting the oldest whole fragments to make room.
    pub fn push(&mut self, fragment: F) -> Result<()> {
        let n = fragment.num_steps();
        if n > self.capacity {
            return Err(Error::Config(format!(
                "fragment of {n} steps exceeds buffer capacity {}",
                self.capacity
            )));
        }
        while self.stored + n > self.capacity {
            let old = self.fragments.pop_front().expect("stored > 0");
            self.stored -= old.num_steps();
        }
        self.stored += n;
        self.fragments.push_back(fragment);
        Ok(())
    }

    /// Whole fragments drawn uniformly with replacement until at least
    /// `min_steps` steps are collected.
    pub fn sample(&self, min_steps: usize, rng: &mut ChaCha8Rng) -> Vec<&F> {
        let mut out = Vec::new();
        if self.fragments.is_empty() {
            return out;
        }
        let mut got = 0;
        while got < min_steps {
            let f = &self.fragments[rng.random_range(0..self.fragments.len())];
            got += f.num_steps().max(1);
            out.push(f);
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &F> {
        self.fragments.iter()
    }
}

/// A timestep as kept in the buffer; observations are re-encoded on use.
#[derive(Clone, Debug)]
pub struct StoredStep {
    pub state: WorldState,
    pub goal: Arc<GoalGrid>,
    /// Search policy over the trained role's valid codes at `state`.
    pub target_policy: Vec<f64>,
    pub reward: f64,
    pub reward_to_go: f64,
    /// Executed human action, for the human-prediction head.
    pub human_action: Option<u32>,
    /// Goal prediction made when the step was collected.
    pub stored_goal_pred: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct StoredFragment {
    pub steps: Vec<StoredStep>,
    pub initial_carry: Option<Vec<f64>>,
}

impl StepCount for StoredFragment {
    fn num_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Encodes a stored fragment for the loss.
pub fn to_train_fragment(
    env: &Env,
    net: &Network,
    frag: &StoredFragment,
    role: Player,
    goal_visible: bool,
) -> Result<Fragment> {
    let spec = net.obs_spec();
    let mut steps = Vec::with_capacity(frag.steps.len());
    for st in &frag.steps {
        let visible = goal_visible.then_some(&*st.goal);
        let obs = encode_observation(&st.state, role, visible, &spec)?;
        let mut codes = Vec::new();
        env.valid_codes(&st.state, role, &mut codes);
        let mut human_codes = Vec::new();
        if role == Player::Assistant {
            env.valid_codes(&st.state, Player::Human, &mut human_codes);
        }
        steps.push(TrainStep {
            obs,
            policy_codes: codes,
            target_policy: st.target_policy.clone(),
            reward_to_go: st.reward_to_go,
            goal: Some(st.goal.cells.iter().map(|b| b.0).collect()),
            human_codes,
            human_action: st.human_action,
            stored_goal_pred: st.stored_goal_pred.clone(),
        });
    }
    Ok(Fragment {
        steps,
        initial_carry: frag.initial_carry.clone(),
    })
}

// ---------------------------------------------------------------------------
// Configuration and checkpoints
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub env: EnvConfig,
    pub net: NetConfig,
    pub iterations: usize,
    /// Environments stepped in turn by the single rollout loop.
    pub envs_parallel: usize,
    pub fragment_length: usize,
    pub buffer_capacity: usize,
    /// Steps drawn from the buffer per epoch (as whole fragments).
    pub steps_per_iteration: usize,
    /// Minimum steps per SGD minibatch.
    pub sgd_batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub weights: LossWeights,
    pub mcts: MctsConfig,
    /// Truncate each worker's first episode at a uniform random length.
    pub randomize_first_episode: bool,
    pub human: BoltzmannConfig,
    pub seed: u64,
}

impl TrainerConfig {
    /// Small settings sized for a single laptop core.
    pub fn desk(env: EnvConfig) -> Self {
        let mut net = NetConfig::new(env.dims, env.num_block_types);
        net.num_residual_blocks = 1;
        net.prev_action_input = true;
        TrainerConfig {
            net,
            iterations: 100,
            envs_parallel: 4,
            fragment_length: 32,
            buffer_capacity: 4096,
            steps_per_iteration: 256,
            sgd_batch_size: 64,
            epochs: 1,
            lr: 1e-3,
            gamma: 0.95,
            weights: LossWeights {
                prev_reward_final: Some(1.0),
                ..LossWeights::default()
            },
            mcts: MctsConfig::default(),
            randomize_first_episode: true,
            human: BoltzmannConfig::default(),
            seed: 0,
            env,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.net.validate()?;
        self.mcts.validate()?;
        self.weights.validate()?;
        if self.net.dims != self.env.dims || self.net.num_block_types != self.env.num_block_types {
            return Err(Error::Config("network and environment disagree on grid or block types".into()));
        }
        if self.fragment_length == 0 || self.fragment_length as u32 > self.env.horizon {
            return Err(Error::Config(format!(
                "fragment_length {} must lie in 1..={}",
                self.fragment_length, self.env.horizon
            )));
        }
        if self.envs_parallel == 0 {
            return Err(Error::Config("envs_parallel must be at least 1".into()));
        }
        if self.sgd_batch_size == 0 || self.sgd_batch_size > self.steps_per_iteration {
            return Err(Error::Config(format!(
                "sgd_batch_size {} must lie in 1..={}",
                self.sgd_batch_size, self.steps_per_iteration
            )));
        }
        if self.buffer_capacity < self.fragment_length {
            return Err(Error::Config("buffer_capacity is smaller than one fragment".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1]".into()));
        }
        self.human.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let cfg: TrainerConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-iteration training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub episodes_finished: usize,
    pub mean_goal_pct: Option<f64>,
    /// Goal-head NLL on the held-out probe, when one was given.
    pub heldout_goal_nll: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub kind: String,
    pub iteration: usize,
    pub history: Vec<IterationLog>,
    pub seed: u64,
    /// Position of the trainer's random stream when training stopped.
    pub rng_word_pos: u128,
}

/// A trained network with its metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: Network,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path.as_ref(), &self.net, &serde_json::to_value(&self.meta)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (net, meta) = checkpoint::load(path.as_ref())?;
        let meta: TrainMeta = serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("bad training metadata: {e}")))?;
        if meta.iteration != meta.history.len() {
            return Err(Error::Checkpoint(format!(
                "metadata iteration {} does not match history length {}",
                meta.iteration,
                meta.history.len()
            )));
        }
        Ok(Checkpoint { net, meta })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.net, &serde_json::to_value(&self.meta)?)
    }
}

/// Episodes whose goal-head NLL is tracked during training.
#[derive(Clone, Debug, Default)]
pub struct GoalProbe {
    pub episodes: Vec<(GoalGrid, Vec<WorldState>)>,
}

impl GoalProbe {
    /// States from `corpus` episodes replayed on `goals`.
    pub fn from_corpus(corpus: &Corpus, goals: &GoalSet) -> Result<Self> {
        let env = Env::new(corpus.env.clone())?;
        let mut episodes = Vec::new();
        for e in 0..corpus.episodes.len() {
            let (goal, mut states) = corpus.replay(&env, goals, e)?;
            states.pop();
            episodes.push((goal, states));
        }
        Ok(GoalProbe { episodes })
    }

    /// Mean over states of the per-cell goal NLL summed over cells.
    pub fn goal_nll(&self, net: &Network) -> Result<f64> {
        if !net.has_goal_head() {
            return Err(Error::Config("network has no goal head".into()));
        }
        let nb = net.config.num_block_types;
        let spec = net.obs_spec();
        let mut total = 0.0;
        let mut n = 0usize;
        for (goal, states) in &self.episodes {
            let mut carry = net.config.use_recurrent.then(|| vec![0.0; net.carry_len()]);
            for s in states {
                let obs = encode_observation(s, Player::Assistant, None, &spec)?;
                let raw = net.forward_raw(&obs, carry.as_deref())?;
                let lp = log_softmax_rows(raw.goal_logits.as_ref().expect("goal head"), nb);
                total -= goal
                    .cells
                    .iter()
                    .enumerate()
                    .map(|(c, b)| lp[c * nb + b.index()])
                    .sum::<f64>();
                carry = raw.carry;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty("goal probe has no states".into()));
        }
        Ok(total / n as f64)
    }
}

// ---------------------------------------------------------------------------
// Search-based self-play (AssistanceZero and single-agent AlphaZero)
// ---------------------------------------------------------------------------

/// Which side of the game a search trainer learns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SearchRole {
    /// The assistant, goal hidden, rewards estimated from its own beliefs.
    Assistant,
    /// The human alone with the goal visible and the single-agent tricks.
    SoloHuman,
}

/// Episodes end early after this many steps without a new minimum distance.
pub const STAGNATION_LIMIT: u32 = 100;
pub const NOOP_PENALTY: f64 = -0.2;

struct Worker {
    goal: Arc<GoalGrid>,
    state: WorldState,
    memory: Memory,
    carry: Option<Vec<f64>>,
    steps: u32,
    truncate_at: Option<u32>,
    best_distance: u32,
    since_best: u32,
    trajectory: Trajectory,
    live: bool,
}

impl Worker {
    fn idle(dims: crate::world::Dims) -> Self {
        Worker {
            goal: Arc::new(GoalGrid::from_cells_unchecked(
                dims,
                vec![crate::world::BlockType::AIR; dims.volume()],
            )),
            state: WorldState::empty(dims, &[]),
            memory: Memory::default(),
            carry: None,
            steps: 0,
            truncate_at: None,
            best_distance: 0,
            since_best: 0,
            trajectory: Trajectory::default(),
            live: false,
        }
    }

    fn start(&mut self, env: &Env, goals: &[Arc<GoalGrid>], net: &Network, truncate: Option<u32>, rng: &mut ChaCha8Rng) -> Result<()> {
        let goal = goals.choose(rng).expect("non-empty goal set").clone();
        self.state = env.new_episode(&goal, rng.random())?;
        let d0 = edit_distance(&self.state, &goal)?;
        self.trajectory = Trajectory::new(d0);
        self.best_distance = d0;
        self.since_best = 0;
        self.goal = goal;
        self.memory = Memory::default();
        self.carry = net.config.use_recurrent.then(|| vec![0.0; net.carry_len()]);
        self.steps = 0;
        self.truncate_at = truncate;
        self.live = true;
        Ok(())
    }
}

struct Collector<'a> {
    env: &'a Env,
    goals: Vec<Arc<GoalGrid>>,
    human: Option<&'a dyn HumanModel>,
    role: SearchRole,
    mcts: MctsConfig,
    gamma: f64,
    randomize_first: bool,
    first_done: Vec<bool>,
}

impl Collector<'_> {
    fn searcher(&self) -> Player {
        match self.role {
            SearchRole::Assistant => Player::Assistant,
            SearchRole::SoloHuman => Player::Human,
        }
    }

    /// Runs one worker for up to `len` steps; the fragment stops at an
    /// episode boundary. Returns the fragment and any finished trajectory.
    fn fragment(
        &mut self,
        wi: usize,
        worker: &mut Worker,
        net: &Network,
        len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(StoredFragment, Option<Trajectory>)> {
        if !worker.live {
            let trunc = (self.randomize_first && !self.first_done[wi])
                .then(|| rng.random_range(1..=self.env.config().horizon));
            self.first_done[wi] = true;
            worker.start(self.env, &self.goals, net, trunc, rng)?;
        }
        let space = self.env.action_space();
        let searcher = self.searcher();
        let mut frag = StoredFragment {
            steps: Vec::with_capacity(len),
            initial_carry: worker.carry.clone(),
        };
        let mut finished = None;
        for _ in 0..len {
            let goal = worker.goal.clone();
            let evaluator = NetEvaluator {
                net,
                role: searcher,
                goal: (searcher == Player::Human).then_some(&*goal),
                zero_value: false,
            };
            let partner = match self.role {
                SearchRole::Assistant if net.has_human_head() => Partner::Predicted,
                _ => Partner::NoOp,
            };
            let spec = SearchSpec {
                env: self.env,
                searcher,
                evaluator: &evaluator,
                partner,
                goal: (self.role == SearchRole::SoloHuman).then_some(&*goal),
                config: &self.mcts,
            };
            let tree = spec.run(&worker.state, worker.carry.as_deref(), rng)?;
            let policy = tree.policy(&self.mcts);
            let own = space.decode(policy.sample(rng) as usize).expect("valid code");
            let belief = tree.root().eval.belief.clone();
            worker.carry = tree.root().eval.carry.clone();
            drop(tree);

            let (ah, ar) = match self.role {
                SearchRole::Assistant => {
                    let human = self.human.expect("assistant training needs a human model");
                    let d = human.act(self.env, &worker.state, &goal, &mut worker.memory, rng)?;
                    (d.action, own)
                }
                SearchRole::SoloHuman => (own, Action::NoOp),
            };
            let step = self.env.apply(&worker.state, ah, ar, &goal)?;
            let mut reward = step.reward_human + step.reward_assistant;
            if self.role == SearchRole::SoloHuman && own.is_noop() {
                reward += NOOP_PENALTY;
            }
            frag.steps.push(StoredStep {
                state: worker.state.clone(),
                goal: goal.clone(),
                target_policy: policy.probs,
                reward,
                reward_to_go: 0.0,
                human_action: (self.role == SearchRole::Assistant)
                    .then(|| space.encode(&step.human_action) as u32),
                stored_goal_pred: if self.role == SearchRole::Assistant { belief } else { None },
            });
            worker.trajectory.push(&step);
            worker.state = step.next_state;
            worker.steps += 1;
            if step.distance < worker.best_distance {
                worker.best_distance = step.distance;
                worker.since_best = 0;
            } else {
                worker.since_best += 1;
            }
            let stagnant = self.role == SearchRole::SoloHuman && worker.since_best >= STAGNATION_LIMIT;
            let truncated = worker.truncate_at.is_some_and(|t| worker.steps >= t);
            if step.done || stagnant || truncated {
                worker.live = false;
                finished = Some(std::mem::take(&mut worker.trajectory));
                if step.done {
                    self.fill_returns(&mut frag, 0.0);
                    return Ok((frag, finished));
                }
                break;
            }
        }
        // bootstrap from the value head at the state after the fragment
        let visible = (searcher == Player::Human).then_some(&*worker.goal);
        let obs = encode_observation(&worker.state, searcher, visible, &net.obs_spec())?;
        let tail = net.forward_raw(&obs, worker.carry.as_deref())?.value;
        self.fill_returns(&mut frag, tail);
        Ok((frag, finished))
    }

    fn fill_returns(&self, frag: &mut StoredFragment, tail: f64) {
        let mut g = tail;
        for st in frag.steps.iter_mut().rev() {
            g = st.reward + self.gamma * g;
            st.reward_to_go = g;
        }
    }
}

fn goal_arcs(goals: &GoalSet) -> Vec<Arc<GoalGrid>> {
    goals.goals.iter().cloned().map(Arc::new).collect()
}

fn sgd_round(
    env: &Env,
    net: &mut Network,
    adam: &mut Adam,
    buffer: &ReplayBuffer<StoredFragment>,
    config: &TrainerConfig,
    weights: &LossWeights,
    role: Player,
    goal_visible: bool,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    let mut count = 0usize;
    for _ in 0..config.epochs {
        let mut sample = buffer.sample(config.steps_per_iteration, rng);
        sample.shuffle(rng);
        let mut start = 0;
        while start < sample.len() {
            let mut frags = Vec::new();
            let mut n = 0;
            while start < sample.len() && n < config.sgd_batch_size {
                n += sample[start].num_steps();
                frags.push(to_train_fragment(env, net, sample[start], role, goal_visible)?);
                start += 1;
            }
            let batch = TrainBatch { fragments: frags };
            let (lb, grads) = loss_and_grads(net, &batch, weights, Some(rng))?;
            adam.step(&mut net.params, &grads)?;
            let k = batch.num_steps() as f64;
            acc.total += lb.total * k;
            acc.policy += lb.policy * k;
            acc.value += lb.value * k;
            acc.reward += lb.reward * k;
            acc.prev_reward += lb.prev_reward * k;
            acc.action += lb.action * k;
            count += batch.num_steps();
        }
    }
    if count > 0 {
        let c = count as f64;
        acc.total /= c;
        acc.policy /= c;
        acc.value /= c;
        acc.reward /= c;
        acc.prev_reward /= c;
        acc.action /= c;
    }
    Ok(acc)
}

fn search_train(
    kind: &str,
    role: SearchRole,
    goals: &GoalSet,
    human: Option<&dyn HumanModel>,
    config: &TrainerConfig,
    mcts: MctsConfig,
    weights: LossWeights,
    probe: Option<&GoalProbe>,
) -> Result<Checkpoint> {
    config.validate()?;
    if goals.dims() != config.env.dims {
        return Err(Error::Config("goal set dims do not match the environment".into()));
    }
    let env = Env::new(config.env.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Network::new(config.net.clone(), rng.random())?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &net.params,
    );
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut workers: Vec<Worker> = (0..config.envs_parallel).map(|_| Worker::idle(config.env.dims)).collect();
    let mut collector = Collector {
        env: &env,
        goals: goal_arcs(goals),
        human,
        role,
        mcts,
        gamma: config.gamma,
        randomize_first: config.randomize_first_episode,
        first_done: vec![false; config.envs_parallel],
    };
    let (train_role, goal_visible) = match role {
        SearchRole::Assistant => (Player::Assistant, false),
        SearchRole::SoloHuman => (Player::Human, true),
    };
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut finished = Vec::new();
        for (wi, w) in workers.iter_mut().enumerate() {
            let (frag, done) = collector.fragment(wi, w, &net, config.fragment_length, &mut rng)?;
            finished.extend(done);
            if !frag.steps.is_empty() {
                buffer.push(frag)?;
            }
        }
        let progress = if config.iterations > 1 {
            it as f64 / (config.iterations - 1) as f64
        } else {
            1.0
        };
        let w = weights.at(progress);
        let loss = sgd_round(&env, &mut net, &mut adam, &buffer, config, &w, train_role, goal_visible, &mut rng)
            .map_err(|e| match e {
                Error::NonFiniteGradient(p) => Error::Training {
                    iteration: it,
                    msg: format!("non-finite gradient in {p}"),
                },
                other => other,
            })?;
        if !loss.total.is_finite() {
            return Err(Error::Training {
                iteration: it,
                msg: "non-finite loss".into(),
            });
        }
        let pcts: Vec<f64> = finished
            .iter()
            .filter_map(|t| crate::world::goal_metrics(t).ok())
            .map(|m| m.overall_goal_pct)
            .collect();
        history.push(IterationLog {
            iteration: it + 1,
            loss,
            episodes_finished: finished.len(),
            mean_goal_pct: (!pcts.is_empty()).then(|| pcts.iter().sum::<f64>() / pcts.len() as f64),
            heldout_goal_nll: match probe {
                Some(p) if net.has_goal_head() => Some(p.goal_nll(&net)?),
                _ => None,
            },
        });
    }
    Ok(Checkpoint {
        net,
        meta: TrainMeta {
            kind: kind.into(),
            iteration: history.len(),
            history,
            seed: config.seed,
            rng_word_pos: rng.get_word_pos(),
        },
    })
}

/// AssistanceZero: belief search with split reward estimates, trained on
/// the five-term loss with the stored-prediction weight annealed upward.
pub fn assistancezero_train(
    goals: &GoalSet,
    human: &dyn HumanModel,
    config: &TrainerConfig,
    probe: Option<&GoalProbe>,
) -> Result<Checkpoint> {
    let mcts = MctsConfig {
        reward_mode: RewardMode::Split,
        gamma: config.gamma,
        ..config.mcts.clone()
    };
    search_train(
        "assistancezero",
        SearchRole::Assistant,
        goals,
        Some(human),
        config,
        mcts,
        config.weights,
        probe,
    )
}

/// Single-agent AlphaZero for the human role: goal visible, known-goal
/// rewards, a no-op penalty and early termination on stagnation.
pub fn alphazero_single_train(goals: &GoalSet, config: &TrainerConfig) -> Result<Checkpoint> {
    let mcts = MctsConfig {
        reward_mode: RewardMode::KnownTheta,
        noop_penalty: NOOP_PENALTY,
        gamma: config.gamma,
        ..config.mcts.clone()
    };
    let weights = LossWeights {
        policy: config.weights.policy,
        value: config.weights.value,
        reward: 0.0,
        prev_reward: 0.0,
        action: 0.0,
        prev_reward_final: None,
    };
    let mut cfg = config.clone();
    cfg.net.goal_head = false;
    cfg.net.human_head = false;
    search_train("alphazero_single", SearchRole::SoloHuman, goals, None, &cfg, mcts, weights, None)
}

// ---------------------------------------------------------------------------
// PPO
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip: f64,
    pub gae_lambda: f64,
    pub value_coeff: f64,
    pub entropy_start: f64,
    pub entropy_end: f64,
    /// Block-placing loss coefficient, decayed linearly to `block_loss_end`.
    pub block_loss_start: f64,
    pub block_loss_end: f64,
    /// Reward only the assistant's own place/break actions.
    pub reward_engineering: bool,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            gae_lambda: 0.95,
            value_coeff: 0.5,
            entropy_start: 0.01,
            entropy_end: 0.001,
            block_loss_start: 1.0,
            block_loss_end: 0.0,
            reward_engineering: true,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.clip > 0.0
            && (0.0..=1.0).contains(&self.gae_lambda)
            && [self.value_coeff, self.entropy_start, self.entropy_end, self.block_loss_start, self.block_loss_end]
                .iter()
                .all(|c| c.is_finite() && *c >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("ppo: coefficients must be finite and non-negative, clip > 0, lambda in [0, 1]".into()))
        }
    }
}

/// Clipped surrogate objective term `min(r·A, clip(r, 1±ε)·A)` and its
/// derivative with respect to `log π(a)`.
pub fn ppo_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

/// Generalized advantage estimates for one fragment. `dones[t]` marks a
/// terminal transition after step `t`; `tail_value` bootstraps the end.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], tail_value: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = tail_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    adv
}

#[derive(Clone, Debug)]
pub struct PpoStep {
    pub state: WorldState,
    pub goal: Arc<GoalGrid>,
    pub action: u32,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PpoFragment {
    pub steps: Vec<PpoStep>,
    pub initial_carry: Option<Vec<f64>>,
}

impl StepCount for PpoFragment {
    fn num_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Unweighted PPO loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoLoss {
    pub total: f64,
    pub surrogate: f64,
    pub value: f64,
    pub entropy: f64,
    pub block: f64,
}

/// PPO loss and parameter gradients on `frags`, averaged over steps.
pub fn ppo_loss_and_grads(
    env: &Env,
    net: &Network,
    frags: &[&PpoFragment],
    cfg: &PpoConfig,
    entropy_coeff: f64,
    block_coeff: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(PpoLoss, crate::net::ParamStore)> {
    let mut grads = net.params.zeros_like();
    let total: usize = frags.iter().map(|f| f.steps.len()).sum();
    if total == 0 {
        return Err(Error::Empty("ppo batch has no steps".into()));
    }
    let scale = 1.0 / total as f64;
    let space = env.action_space();
    let spec = net.obs_spec();
    let nb = net.config.num_block_types;
    let k = head_channels(nb);
    let mut out = PpoLoss::default();
    let mut rng = rng;
    for frag in frags {
        if frag.steps.is_empty() {
            continue;
        }
        let obs: Vec<_> = frag
            .steps
            .iter()
            .map(|s| encode_observation(&s.state, Player::Assistant, None, &spec))
            .collect::<Result<_>>()?;
        let refs: Vec<_> = obs.iter().collect();
        let (raws, cache) = net.forward_train(&refs, frag.initial_carry.as_deref(), rng.as_deref_mut())?;
        let mut hgs = Vec::with_capacity(raws.len());
        for (st, raw) in frag.steps.iter().zip(&raws) {
            let mut codes = Vec::new();
            env.valid_codes(&st.state, Player::Assistant, &mut codes);
            let d = GroupedSoftmax::new(space, &raw.policy_logits, &codes);
            let pos = d.position(st.action).ok_or_else(|| {
                Error::Contract("stored PPO action is not valid in its state".into())
            })?;
            let mut g = vec![0.0; codes.len()];
            let ratio = (d.log_probs[pos] - st.log_prob).exp();
            let (surr, dsurr) = ppo_surrogate(ratio, st.advantage, cfg.clip);
            out.surrogate -= surr * scale;
            g[pos] -= dsurr * scale;
            let entropy = d.entropy();
            out.entropy += entropy * scale;
            // d(−c·H)/dl_j = c·p_j·(l_j + 1)
            for (gj, l) in g.iter_mut().zip(&d.log_probs) {
                *gj += entropy_coeff * scale * l.exp() * (l + 1.0);
            }
            let mut dlogits = vec![0.0; raw.policy_logits.len()];
            d.backward(space, &raw.policy_logits, &g, &mut dlogits);

            if block_coeff > 0.0 {
                if let Some(crate::world::Action::Place { cell, .. }) = space.decode(st.action as usize) {
                    let c = st.state.dims.index(cell);
                    let target = st.goal.cells[c];
                    if !target.is_air() {
                        let base = c * k + NUM_GLOBAL_ACTIONS + 1;
                        let z: Vec<f64> = (1..nb).map(|b| raw.policy_logits[base + b]).collect();
                        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lz = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        let ti = target.index() - 1;
                        out.block += (lz - z[ti]) * scale;
                        for (bi, v) in z.iter().enumerate() {
                            let p = (v - lz).exp();
                            let y = if bi == ti { 1.0 } else { 0.0 };
                            dlogits[base + bi + 1] += block_coeff * scale * (p - y);
                        }
                    }
                }
            }
            let dv = raw.value - st.ret;
            out.value += dv * dv * scale;
            hgs.push(HeadGrads {
                policy_logits: Some(dlogits),
                human_logits: None,
                goal_logits: None,
                value: cfg.value_coeff * 2.0 * dv * scale,
            });
        }
        net.backward(&cache, &hgs, &mut grads);
    }
    out.total = out.surrogate + cfg.value_coeff * out.value - entropy_coeff * out.entropy + block_coeff * out.block;
    Ok((out, grads))
}

/// Clipped-surrogate PPO for the assistant's policy head, goal hidden.
pub fn ppo_train(
    goals: &GoalSet,
    human: &dyn HumanModel,
    config: &TrainerConfig,
    ppo: &PpoConfig,
) -> Result<Checkpoint> {
    config.validate()?;
    ppo.validate()?;
    if goals.dims() != config.env.dims {
        return Err(Error::Config("goal set dims do not match the environment".into()));
    }
    let env = Env::new(config.env.clone())?;
    let space = env.action_space();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net_cfg = config.net.clone();
    net_cfg.goal_head = false;
    net_cfg.human_head = false;
    let mut net = Network::new(net_cfg, rng.random())?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &net.params,
    );
    let goal_list = goal_arcs(goals);
    let mut workers: Vec<Worker> = (0..config.envs_parallel).map(|_| Worker::idle(config.env.dims)).collect();
    let mut first_done = vec![false; config.envs_parallel];
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let progress = if config.iterations > 1 {
            it as f64 / (config.iterations - 1) as f64
        } else {
            1.0
        };
        let ent = ppo.entropy_start + (ppo.entropy_end - ppo.entropy_start) * progress;
        let blk = ppo.block_loss_start + (ppo.block_loss_end - ppo.block_loss_start) * progress;

        // collect on-policy fragments
        let mut frags: Vec<PpoFragment> = Vec::new();
        let mut finished = Vec::new();
        let target = config.steps_per_iteration.max(config.fragment_length);
        let mut collected = 0;
        let mut wi = 0;
        while collected < target {
            let w = &mut workers[wi];
            if !w.live {
                let trunc = (config.randomize_first_episode && !first_done[wi])
                    .then(|| rng.random_range(1..=config.env.horizon));
                first_done[wi] = true;
                w.start(&env, &goal_list, &net, trunc, &mut rng)?;
            }
            let mut frag = PpoFragment {
                steps: Vec::with_capacity(config.fragment_length),
                initial_carry: w.carry.clone(),
            };
            let mut ended = false;
            for _ in 0..config.fragment_length {
                let obs = encode_observation(&w.state, Player::Assistant, None, &net.obs_spec())?;
                let raw = net.forward_raw(&obs, w.carry.as_deref())?;
                let mut codes = Vec::new();
                env.valid_codes(&w.state, Player::Assistant, &mut codes);
                let d = GroupedSoftmax::new(space, &raw.policy_logits, &codes);
                let i = crate::mcts::sample_index(&d.probs(), &mut rng);
                let ar = space.decode(codes[i] as usize).expect("valid code");
                let goal = w.goal.clone();
                let ah = human.act(&env, &w.state, &goal, &mut w.memory, &mut rng)?.action;
                let step = env.apply(&w.state, ah, ar, &goal)?;
                let reward = if ppo.reward_engineering {
                    step.reward_assistant
                } else {
                    step.reward_human + step.reward_assistant
                };
                w.steps += 1;
                let truncated = w.truncate_at.is_some_and(|t| w.steps >= t);
                frag.steps.push(PpoStep {
                    state: w.state.clone(),
                    goal,
                    action: codes[i],
                    log_prob: d.log_probs[i],
                    value: raw.value,
                    reward,
                    done: step.done,
                    advantage: 0.0,
                    ret: 0.0,
                });
                w.carry = raw.carry;
                w.trajectory.push(&step);
                w.state = step.next_state;
                if step.done || truncated {
                    w.live = false;
                    finished.push(std::mem::take(&mut w.trajectory));
                    ended = step.done;
                    break;
                }
            }
            let tail = if ended {
                0.0
            } else {
                let obs = encode_observation(&w.state, Player::Assistant, None, &net.obs_spec())?;
                net.forward_raw(&obs, w.carry.as_deref())?.value
            };
            let rewards: Vec<f64> = frag.steps.iter().map(|s| s.reward).collect();
            let values: Vec<f64> = frag.steps.iter().map(|s| s.value).collect();
            let dones: Vec<bool> = frag.steps.iter().map(|s| s.done).collect();
            let adv = gae(&rewards, &values, &dones, tail, config.gamma, ppo.gae_lambda);
            for (s, a) in frag.steps.iter_mut().zip(adv) {
                s.advantage = a;
                s.ret = a + s.value;
            }
            collected += frag.steps.len();
            frags.push(frag);
            wi = (wi + 1) % workers.len();
        }
        if ppo.normalize_advantages {
            let all: Vec<f64> = frags.iter().flat_map(|f| f.steps.iter().map(|s| s.advantage)).collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / all.len() as f64;
            let sd = var.sqrt().max(1e-8);
            for f in frags.iter_mut() {
                for s in f.steps.iter_mut() {
                    s.advantage = (s.advantage - mean) / sd;
                }
            }
        }

        // optimize
        let mut acc = PpoLoss::default();
        let mut batches = 0usize;
        for _ in 0..config.epochs {
            let mut order: Vec<&PpoFragment> = frags.iter().collect();
            order.shuffle(&mut rng);
            let mut start = 0;
            while start < order.len() {
                let mut n = 0;
                let mut end = start;
                while end < order.len() && n < config.sgd_batch_size {
                    n += order[end].steps.len();
                    end += 1;
                }
                let (l, grads) = ppo_loss_and_grads(&env, &net, &order[start..end], ppo, ent, blk, Some(&mut rng))?;
                if !l.total.is_finite() {
                    return Err(Error::Training {
                        iteration: it,
                        msg: "non-finite PPO loss".into(),
                    });
                }
                adam.step(&mut net.params, &grads).map_err(|e| Error::Training {
                    iteration: it,
                    msg: e.to_string(),
                })?;
                acc.total += l.total;
                acc.surrogate += l.surrogate;
                acc.value += l.value;
                acc.entropy += l.entropy;
                acc.block += l.block;
                batches += 1;
                start = end;
            }
        }
        let b = batches.max(1) as f64;
        let pcts: Vec<f64> = finished
            .iter()
            .filter_map(|t| crate::world::goal_metrics(t).ok())
            .map(|m| m.overall_goal_pct)
            .collect();
        history.push(IterationLog {
            iteration: it + 1,
            loss: LossBreakdown {
                total: acc.total / b,
                policy: acc.surrogate / b,
                value: acc.value / b,
                reward: acc.block / b,
                prev_reward: 0.0,
                action: acc.entropy / b,
            },
            episodes_finished: finished.len(),
            mean_goal_pct: (!pcts.is_empty()).then(|| pcts.iter().sum::<f64>() / pcts.len() as f64),
            heldout_goal_nll: None,
        });
    }
    Ok(Checkpoint {
        net,
        meta: TrainMeta {
            kind: "ppo".into(),
            iteration: history.len(),
            history,
            seed: config.seed,
            rng_word_pos: rng.get_word_pos(),
        },
    })
}

// ---------------------------------------------------------------------------
// Pretraining and supervised fine-tuning
// ---------------------------------------------------------------------------

/// Next-action prediction on a goal-free human corpus.
pub fn pretrain(corpus: &Corpus, goals: &GoalSet, net_config: NetConfig, config: &BcConfig) -> Result<Checkpoint> {
    if corpus.goal_visible {
        return Err(Error::Config("pretraining needs a goal-stripped corpus".into()));
    }
    let data = BcDataset::from_corpus(corpus, goals, Player::Human)?;
    let (net, hist) = bc_train(&data, net_config, config)?;
    Ok(bc_checkpoint("pretrain", net, hist, config.seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub bc: BcConfig,
    /// Re-initialize the action head before fine-tuning.
    pub init_action_head: bool,
    /// Sampling temperature applied to the logits at evaluation.
    pub temperature: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            bc: BcConfig {
                lr: 1e-4,
                ..BcConfig::default()
            },
            init_action_head: true,
            temperature: 0.3,
        }
    }
}

/// Continues training the pretrained network on assistant demonstrations.
pub fn sft(pretrained: &Checkpoint, demos: &Corpus, goals: &GoalSet, config: &SftConfig) -> Result<Checkpoint> {
    if !(config.temperature > 0.0 && config.temperature.is_finite()) {
        return Err(Error::Config("SFT temperature must be positive".into()));
    }
    let mut net = pretrained.net.clone();
    if net.config.dims != demos.env.dims || net.config.num_block_types != demos.env.num_block_types {
        return Err(Error::Config("pretrained checkpoint does not match the demonstration corpus".into()));
    }
    if config.init_action_head {
        net.reinit_policy_head(config.bc.seed ^ 0x5F7);
    }
    let data = BcDataset::from_corpus(demos, goals, Player::Assistant)?;
    let (net, hist) = bc_continue(net, &data, &config.bc)?;
    Ok(bc_checkpoint("sft", net, hist, config.bc.seed))
}

fn bc_checkpoint(kind: &str, net: Network, hist: Vec<f64>, seed: u64) -> Checkpoint {
    let history: Vec<IterationLog> = hist
        .iter()
        .enumerate()
        .map(|(i, l)| IterationLog {
            iteration: i + 1,
            loss: LossBreakdown {
                total: *l,
                policy: *l,
                ..LossBreakdown::default()
            },
            ..IterationLog::default()
        })
        .collect();
    Checkpoint {
        net,
        meta: TrainMeta {
            kind: kind.into(),
            iteration: history.len(),
            history,
            seed,
            rng_word_pos: 0,
        },
    }
}

/// Greedy-or-sampled rollout of a human-role network alone.
pub fn solo_human_episode(
    net: &Network,
    env: &Env,
    goal: &GoalGrid,
    seed: u64,
    greedy: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut s = env.new_episode(goal, seed)?;
    let mut tr = Trajectory::new(edit_distance(&s, goal)?);
    let mut memory = Memory::default();
    let temperature = if greedy { 1e-3 } else { 1.0 };
    loop {
        let d = net_act(net, env, &s, Player::Human, Some(goal), temperature, &mut memory, rng)?;
        let step = env.apply(&s, d.action, Action::NoOp, goal)?;
        tr.push(&step);
        s = step.next_state;
        if step.done || grid_distance(&s.grid, &goal.cells) == 0 {
            break;
        }
    }
    Ok(tr)
}

/// Evaluates the network's masked outputs at one state for the assistant.
pub fn assistant_outputs(net: &Network, env: &Env, state: &WorldState, carry: Option<&[f64]>) -> Result<crate::net::NetOutput> {
    let obs = encode_observation(state, Player::Assistant, None, &net.obs_spec())?;
    let mut codes = Vec::new();
    env.valid_codes(state, Player::Assistant, &mut codes);
    let mut human = Vec::new();
    env.valid_codes(state, Player::Human, &mut human);
    net.evaluate(
        &obs,
        &StepMasks {
            policy: codes,
            human: net.has_human_head().then_some(human),
        },
        carry,
    )
}
