//! Human models: a scripted Boltzmann builder, behavior cloning, piKL
//! (search with an imitation prior), cross-entropy evaluation, and the
//! trajectory corpus they are trained on.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goals::{GoalGrid, GoalSet};
use crate::mcts::{
    full_support_policy, sample_index, MctsConfig, NetEvaluator, Partner, RewardMode, SearchSpec,
};
use crate::net::dist::GroupedSoftmax;
use crate::net::{
    encode_observation, loss_and_grads, Adam, AdamConfig, Fragment, LossWeights, NetConfig,
    Network, TrainBatch, TrainStep,
};
use crate::world::{
    cell_cost, Action, BlockType, Dims, Env, EnvConfig, Player, Vec3, WorldState,
};

// ---------------------------------------------------------------------------
// Model interface
// ---------------------------------------------------------------------------

/// One decision: the sampled action and the full distribution over the
/// valid codes it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub codes: Vec<u32>,
    pub probs: Vec<f64>,
}

impl Decision {
    pub fn prob_of(&self, code: u32) -> f64 {
        self.codes
            .binary_search(&code)
            .map(|i| self.probs[i])
            .unwrap_or(0.0)
    }

    fn sample(space_decode: impl Fn(u32) -> Action, codes: Vec<u32>, probs: Vec<f64>, rng: &mut ChaCha8Rng) -> Self {
        let i = sample_index(&probs, rng);
        Decision {
            action: space_decode(codes[i]),
            codes,
            probs,
        }
    }
}

/// A model's own history within an episode (the recurrent carry).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Memory {
    pub carry: Option<Vec<f64>>,
}

/// Anything that picks the human's action given the true goal.
pub trait HumanModel: Send + Sync {
    fn name(&self) -> &str;

    fn act(
        &self,
        env: &Env,
        state: &WorldState,
        goal: &GoalGrid,
        memory: &mut Memory,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decision>;
}

fn decoder(env: &Env) -> impl Fn(u32) -> Action + '_ {
    move |c| env.action_space().decode(c as usize).expect("valid code decodes")
}

// ---------------------------------------------------------------------------
// Boltzmann builder
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoltzmannConfig {
    pub beta: f64,
    pub noop_bias: f64,
}

impl Default for BoltzmannConfig {
    fn default() -> Self {
        BoltzmannConfig {
            beta: 3.0,
            noop_bias: 0.0,
        }
    }
}

impl BoltzmannConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("beta {} must be finite and >= 0", self.beta)));
        }
        if !self.noop_bias.is_finite() {
            return Err(Error::Config("noop_bias must be finite".into()));
        }
        Ok(())
    }
}

/// Moves needed before some incorrect, editable cell is within reach.
fn approach_distance(state: &WorldState, goal: &GoalGrid, pos: Vec3, reach: u8) -> u32 {
    let dims = state.dims;
    let mut best = u32::MAX;
    for (i, (&b, &g)) in state.grid.iter().zip(&goal.cells).enumerate() {
        if b == g {
            continue;
        }
        let c = dims.cell(i);
        if b.is_air() && state.is_occupied(c) {
            continue;
        }
        let d = pos.chebyshev(c).saturating_sub(reach) as u32;
        best = best.min(d);
    }
    if best == u32::MAX {
        0
    } else {
        best
    }
}

/// Score of each valid code: immediate reward for edits, the decrease in
/// approach distance for moves, 0 for NoOp.
pub fn boltzmann_scores(
    env: &Env,
    state: &WorldState,
    goal: &GoalGrid,
    player: Player,
    codes: &[u32],
) -> Vec<f64> {
    let space = env.action_space();
    let reach = env.config().reach;
    let dims = state.dims;
    let pos = state.player(player).position;
    let here = approach_distance(state, goal, pos, reach) as f64;
    codes
        .iter()
        .map(|&code| match space.decode(code as usize).expect("valid code decodes") {
            Action::NoOp => 0.0,
            Action::Move(d) => {
                let (dx, dy, dz) = d.delta();
                match dims.offset(pos, dx, dy, dz) {
                    Some(p) => here - approach_distance(state, goal, p, reach) as f64,
                    None => 0.0,
                }
            }
            Action::Break { cell } => {
                let i = dims.index(cell);
                cell_cost(state.grid[i], goal.cells[i]) as f64
                    - cell_cost(BlockType::AIR, goal.cells[i]) as f64
            }
            Action::Place { cell, block } => {
                let i = dims.index(cell);
                cell_cost(state.grid[i], goal.cells[i]) as f64 - cell_cost(block, goal.cells[i]) as f64
            }
        })
        .collect()
}

/// `p(a) ∝ exp(β·score(a) + noop_bias·[a = NoOp])` over the valid codes.
pub fn boltzmann_policy(
    env: &Env,
    state: &WorldState,
    goal: &GoalGrid,
    config: &BoltzmannConfig,
    player: Player,
) -> (Vec<u32>, Vec<f64>) {
    let mut codes = Vec::new();
    env.valid_codes(state, player, &mut codes);
    let scores = boltzmann_scores(env, state, goal, player, &codes);
    let logits: Vec<f64> = codes
        .iter()
        .zip(&scores)
        .map(|(&c, s)| config.beta * s + if c == 0 { config.noop_bias } else { 0.0 })
        .collect();
    (codes, softmax(&logits))
}

pub fn boltzmann_act(
    env: &Env,
    state: &WorldState,
    goal: &GoalGrid,
    config: &BoltzmannConfig,
    player: Player,
    rng: &mut ChaCha8Rng,
) -> Decision {
    let (codes, probs) = boltzmann_policy(env, state, goal, config, player);
    Decision::sample(decoder(env), codes, probs, rng)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

#[derive(Clone, Debug)]
pub struct BoltzmannHuman {
    pub name: String,
    pub config: BoltzmannConfig,
}

impl BoltzmannHuman {
    pub fn new(config: BoltzmannConfig) -> Self {
        BoltzmannHuman {
            name: format!("boltzmann(beta={})", config.beta),
            config,
        }
    }
}

impl HumanModel for BoltzmannHuman {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(
        &self,
        env: &Env,
        state: &WorldState,
        goal: &GoalGrid,
        _memory: &mut Memory,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decision> {
        Ok(boltzmann_act(env, state, goal, &self.config, Player::Human, rng))
    }
}

/// Uniform over valid actions.
#[derive(Clone, Debug, Default)]
pub struct UniformHuman;

impl HumanModel for UniformHuman {
    fn name(&self) -> &str {
        "uniform"
    }

    fn act(
        &self,
        env: &Env,
        state: &WorldState,
        _goal: &GoalGrid,
        _memory: &mut Memory,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decision> {
        let mut codes = Vec::new();
        env.valid_codes(state, Player::Human, &mut codes);
        let probs = vec![1.0 / codes.len() as f64; codes.len()];
        Ok(Decision::sample(decoder(env), codes, probs, rng))
    }
}

// ---------------------------------------------------------------------------
// Network-backed policies
// ---------------------------------------------------------------------------

/// Masked policy-head distribution at temperature `t`.
pub fn policy_distribution(logits: &[f64], net: &Network, codes: &[u32], temperature: f64) -> Vec<f64> {
    let space = net.action_space();
    if temperature == 1.0 {
        return GroupedSoftmax::new(space, logits, codes).probs();
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    GroupedSoftmax::new(space, &scaled, codes).probs()
}

/// Policy-head decision for `role`; advances the recurrent carry.
pub fn net_act(
    net: &Network,
    env: &Env,
    state: &WorldState,
    role: Player,
    goal: Option<&GoalGrid>,
    temperature: f64,
    memory: &mut Memory,
    rng: &mut ChaCha8Rng,
) -> Result<Decision> {
    let obs = encode_observation(state, role, goal, &net.obs_spec())?;
    let raw = net.forward_raw(&obs, memory.carry.as_deref())?;
    let mut codes = Vec::new();
    env.valid_codes(state, role, &mut codes);
    let probs = policy_distribution(&raw.policy_logits, net, &codes, temperature);
    memory.carry = raw.carry;
    Ok(Decision::sample(decoder(env), codes, probs, rng))
}

/// A human policy read from a network's policy head, goal visible (BC
/// models and the single-agent AlphaZero human).
#[derive(Clone, Debug)]
pub struct NetHuman {
    pub name: String,
    pub net: Network,
    pub temperature: f64,
}

impl NetHuman {
    pub fn new(name: impl Into<String>, net: Network) -> Self {
        NetHuman {
            name: name.into(),
            net,
            temperature: 1.0,
        }
    }
}

impl HumanModel for NetHuman {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(
        &self,
        env: &Env,
        state: &WorldState,
        goal: &GoalGrid,
        memory: &mut Memory,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decision> {
        net_act(&self.net, env, state, Player::Human, Some(goal), self.temperature, memory, rng)
    }
}

// ---------------------------------------------------------------------------
// piKL
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiklConfig {
    pub c_puct: f64,
    pub num_simulations: u32,
    pub gamma: f64,
}

impl PiklConfig {
    pub const PRESETS: [f64; 3] = [10.0, 30.0, 50.0];

    pub fn preset(c_puct: f64) -> Result<Self> {
        if !Self::PRESETS.contains(&c_puct) {
            return Err(Error::Config(format!(
                "c_puct preset must be one of {:?}, got {c_puct}",
                Self::PRESETS
            )));
        }
        Ok(PiklConfig {
            c_puct,
            ..PiklConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_puct > 0.0 && self.c_puct.is_finite()) {
            return Err(Error::Config(format!("piKL c_puct {} must be > 0", self.c_puct)));
        }
        if self.num_simulations == 0 {
            return Err(Error::Config("piKL needs at least one simulation".into()));
        }
        Ok(())
    }

    fn mcts(&self) -> MctsConfig {
        MctsConfig {
            num_simulations: self.num_simulations,
            c_puct: self.c_puct,
            gamma: self.gamma,
            reward_mode: RewardMode::KnownTheta,
            dirichlet_epsilon: 0.0,
            bilevel: false,
            noop_penalty: 0.0,
            ..MctsConfig::default()
        }
    }
}

impl Default for PiklConfig {
    fn default() -> Self {
        PiklConfig {
            c_puct: 30.0,
            num_simulations: 20,
            gamma: 0.95,
        }
    }
}

/// Known-goal search for the human with the BC prior, a NoOp partner and no
/// value function; returns the full-support policy and a sample from it.
pub fn pikl_act(
    prior: &Network,
    env: &Env,
    state: &WorldState,
    goal: &GoalGrid,
    config: &PiklConfig,
    memory: &mut Memory,
    rng: &mut ChaCha8Rng,
) -> Result<Decision> {
    config.validate()?;
    let mcts = config.mcts();
    let evaluator = NetEvaluator {
        net: prior,
        role: Player::Human,
        goal: Some(goal),
        zero_value: true,
    };
    let spec = SearchSpec {
        env,
        searcher: Player::Human,
        evaluator: &evaluator,
        partner: Partner::NoOp,
        goal: Some(goal),
        config: &mcts,
    };
    let (codes, probs, carry) = if crate::world::grid_distance(&state.grid, &goal.cells) == 0 {
        // nothing left to plan for: follow the prior
        let obs = encode_observation(state, Player::Human, Some(goal), &prior.obs_spec())?;
        let raw = prior.forward_raw(&obs, memory.carry.as_deref())?;
        let mut codes = Vec::new();
        env.valid_codes(state, Player::Human, &mut codes);
        let p = policy_distribution(&raw.policy_logits, prior, &codes, 1.0);
        (codes, p, raw.carry)
    } else {
        let tree = spec.run(state, memory.carry.as_deref(), rng)?;
        let root = tree.root();
        (
            root.codes.clone(),
            full_support_policy(root, config.c_puct),
            root.eval.carry.clone(),
        )
    };
    memory.carry = carry;
    Ok(Decision::sample(decoder(env), codes, probs, rng))
}

#[derive(Clone, Debug)]
pub struct PiklHuman {
    pub name: String,
    pub prior: Network,
    pub config: PiklConfig,
}

impl PiklHuman {
    pub fn new(prior: Network, config: PiklConfig) -> Self {
        PiklHuman {
            name: format!("pikl(c={})", config.c_puct),
            prior,
            config,
        }
    }
}

impl HumanModel for PiklHuman {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(
        &self,
        env: &Env,
        state: &WorldState,
        goal: &GoalGrid,
        memory: &mut Memory,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decision> {
        pikl_act(&self.prior, env, state, goal, &self.config, memory, rng)
    }
}

// ---------------------------------------------------------------------------
// Trajectory corpus
// ---------------------------------------------------------------------------

const CORPUS_MAGIC: &str = "mbag-corpus";
const CORPUS_VERSION: &str = "v1";

/// One episode: the goal's index in its goal set, the seed passed to
/// [`Env::new_episode`], and the executed (human, assistant) codes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub goal_id: usize,
    pub seed: u64,
    pub steps: Vec<(u32, u32)>,
}

/// Episodes replayable against the goal set they were generated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub env: EnvConfig,
    /// False when observations derived from the corpus must hide the goal.
    pub goal_visible: bool,
    pub episodes: Vec<EpisodeRecord>,
}

impl Corpus {
    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    /// States before each step plus the final state.
    pub fn replay(&self, env: &Env, goals: &GoalSet, episode: usize) -> Result<(GoalGrid, Vec<WorldState>)> {
        let rec = &self.episodes[episode];
        let goal = goals
            .goals
            .get(rec.goal_id)
            .ok_or_else(|| Error::Format(format!("episode {episode} names missing goal {}", rec.goal_id)))?
            .clone();
        let space = env.action_space();
        let mut s = env.new_episode(&goal, rec.seed)?;
        let mut states = Vec::with_capacity(rec.steps.len() + 1);
        for (t, &(h, r)) in rec.steps.iter().enumerate() {
            let ah = space.decode(h as usize);
            let ar = space.decode(r as usize);
            let (Some(ah), Some(ar)) = (ah, ar) else {
                return Err(Error::Format(format!("episode {episode} step {t}: code out of range")));
            };
            let (next, eh, er) = env.transition(&s, ah, ar);
            if eh != ah || er != ar {
                return Err(Error::Format(format!(
                    "episode {episode} step {t}: recorded action was not executable"
                )));
            }
            states.push(s);
            s = next;
        }
        states.push(s);
        Ok((goal, states))
    }
}

pub fn format_corpus(corpus: &Corpus) -> String {
    let e = &corpus.env;
    let mut out = String::new();
    writeln!(out, "{CORPUS_MAGIC} {CORPUS_VERSION}").unwrap();
    writeln!(
        out,
        "env {} {} {} {} {} {} {}",
        e.dims.w, e.dims.h, e.dims.d, e.num_block_types, e.horizon, e.reach, e.seed
    )
    .unwrap();
    writeln!(out, "goal_visible {}", corpus.goal_visible as u8).unwrap();
    writeln!(out, "episodes {}", corpus.episodes.len()).unwrap();
    for ep in &corpus.episodes {
        writeln!(out, "episode {} {} {}", ep.goal_id, ep.seed, ep.steps.len()).unwrap();
        for (h, r) in &ep.steps {
            writeln!(out, "{h} {r}").unwrap();
        }
    }
    out
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, Vec<String>)> {
        match lines.next() {
            Some((n, l)) => Ok((n, l.split_whitespace().map(String::from).collect())),
            None => Err(Error::Format(format!("corpus ends before {what}"))),
        }
    };
    fn num<T: std::str::FromStr>(line: usize, tok: &str) -> Result<T> {
        tok.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad number `{tok}`"),
        })
    }
    let (n, head) = next("header")?;
    if head != [CORPUS_MAGIC, CORPUS_VERSION] {
        return Err(Error::Parse {
            line: n,
            msg: format!("expected `{CORPUS_MAGIC} {CORPUS_VERSION}`"),
        });
    }
    let (n, f) = next("env line")?;
    if f.len() != 8 || f[0] != "env" {
        return Err(Error::Parse {
            line: n,
            msg: "expected `env W H D B HORIZON REACH SEED`".into(),
        });
    }
    let env = EnvConfig {
        dims: Dims::new(num(n, &f[1])?, num(n, &f[2])?, num(n, &f[3])?),
        num_block_types: num(n, &f[4])?,
        horizon: num(n, &f[5])?,
        reach: num(n, &f[6])?,
        seed: num(n, &f[7])?,
        strict: false,
    };
    let (n, f) = next("goal_visible line")?;
    if f.len() != 2 || f[0] != "goal_visible" || !(f[1] == "0" || f[1] == "1") {
        return Err(Error::Parse {
            line: n,
            msg: "expected `goal_visible 0|1`".into(),
        });
    }
    let goal_visible = f[1] == "1";
    let (n, f) = next("episode count")?;
    if f.len() != 2 || f[0] != "episodes" {
        return Err(Error::Parse {
            line: n,
            msg: "expected `episodes N`".into(),
        });
    }
    let count: usize = num(n, &f[1])?;
    let size = env.action_space().size() as u32;
    let mut episodes = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, f) = next("episode header")?;
        if f.len() != 4 || f[0] != "episode" {
            return Err(Error::Parse {
                line: n,
                msg: "expected `episode GOAL_ID SEED LEN`".into(),
            });
        }
        let goal_id = num(n, &f[1])?;
        let seed = num(n, &f[2])?;
        let len: usize = num(n, &f[3])?;
        let mut steps = Vec::with_capacity(len);
        for _ in 0..len {
            let (n, f) = next("step")?;
            if f.len() != 2 {
                return Err(Error::Parse {
                    line: n,
                    msg: "expected `HUMAN_CODE ASSISTANT_CODE`".into(),
                });
            }
            let (h, r): (u32, u32) = (num(n, &f[0])?, num(n, &f[1])?);
            if h >= size || r >= size {
                return Err(Error::Parse {
                    line: n,
                    msg: format!("action code out of range 0..{size}"),
                });
            }
            steps.push((h, r));
        }
        episodes.push(EpisodeRecord { goal_id, seed, steps });
    }
    if let Some((n, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::Parse {
            line: n,
            msg: format!("unexpected trailing content `{}`", l.trim()),
        });
    }
    Ok(Corpus {
        env,
        goal_visible,
        episodes,
    })
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_corpus(corpus)).map_err(|e| Error::file(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_corpus(&text)
}

// ---------------------------------------------------------------------------
// Block permutations
// ---------------------------------------------------------------------------

/// A random permutation of the solid block types; air stays fixed.
pub fn random_block_permutation(num_block_types: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut solids: Vec<u8> = (1..num_block_types as u8).collect();
    solids.shuffle(rng);
    std::iter::once(0).chain(solids).collect()
}

pub fn permute_action(a: Action, perm: &[u8]) -> Action {
    match a {
        Action::Place { cell, block } => Action::Place {
            cell,
            block: BlockType(perm[block.index()]),
        },
        other => other,
    }
}

pub fn permute_state(s: &WorldState, perm: &[u8]) -> WorldState {
    let mut out = s.clone();
    for b in out.grid.iter_mut() {
        *b = BlockType(perm[b.index()]);
    }
    for p in out.players.iter_mut() {
        p.last_action = permute_action(p.last_action, perm);
    }
    out
}

// ---------------------------------------------------------------------------
// Behavior cloning
// ---------------------------------------------------------------------------

/// Replayed demonstrations for one role.
#[derive(Clone, Debug)]
pub struct DemoEpisode {
    pub goal: GoalGrid,
    /// State before each demonstrated action.
    pub states: Vec<WorldState>,
    pub actions: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct BcDataset {
    pub env: Env,
    pub role: Player,
    pub goal_visible: bool,
    pub episodes: Vec<DemoEpisode>,
}

impl BcDataset {
    pub fn from_corpus(corpus: &Corpus, goals: &GoalSet, role: Player) -> Result<Self> {
        let env = Env::new(corpus.env.clone())?;
        let mut episodes = Vec::with_capacity(corpus.episodes.len());
        for (i, rec) in corpus.episodes.iter().enumerate() {
            if rec.steps.is_empty() {
                continue;
            }
            let (goal, mut states) = corpus.replay(&env, goals, i)?;
            states.pop();
            let actions = rec
                .steps
                .iter()
                .map(|&(h, r)| if role == Player::Human { h } else { r })
                .collect();
            episodes.push(DemoEpisode { goal, states, actions });
        }
        Ok(BcDataset {
            env,
            role,
            goal_visible: corpus.goal_visible && role == Player::Human,
            episodes,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.actions.len()).sum()
    }

    /// Training fragment for `episode[start..start+len]` under `perm`, with
    /// the initial carry computed by running `net` over the prefix.
    pub fn fragment(
        &self,
        net: &Network,
        episode: usize,
        start: usize,
        len: usize,
        perm: Option<&[u8]>,
    ) -> Result<Fragment> {
        let ep = &self.episodes[episode];
        let spec = net.obs_spec();
        let space = self.env.action_space();
        let goal = match perm {
            Some(p) => ep.goal.permuted(p),
            None => ep.goal.clone(),
        };
        let state_at = |t: usize| match perm {
            Some(p) => permute_state(&ep.states[t], p),
            None => ep.states[t].clone(),
        };
        let visible = self.goal_visible.then_some(&goal);
        let mut carry = None;
        if net.config.use_recurrent {
            carry = Some(vec![0.0; net.carry_len()]);
            for t in 0..start {
                let obs = encode_observation(&state_at(t), self.role, visible, &spec)?;
                carry = net.forward_raw(&obs, carry.as_deref())?.carry;
            }
        }
        let end = (start + len).min(ep.actions.len());
        let mut steps = Vec::with_capacity(end - start);
        for t in start..end {
            let s = state_at(t);
            let obs = encode_observation(&s, self.role, visible, &spec)?;
            let mut codes = Vec::new();
            self.env.valid_codes(&s, self.role, &mut codes);
            let mut a = ep.actions[t];
            if let Some(p) = perm {
                let act = space.decode(a as usize).expect("recorded code decodes");
                a = space.encode(&permute_action(act, p)) as u32;
            }
            let pos = codes.binary_search(&a).map_err(|_| {
                Error::Format(format!("episode {episode} step {t}: demonstrated action is not valid"))
            })?;
            let mut target = vec![0.0; codes.len()];
            target[pos] = 1.0;
            steps.push(TrainStep {
                obs,
                policy_codes: codes,
                target_policy: target,
                reward_to_go: 0.0,
                goal: None,
                human_codes: Vec::new(),
                human_action: None,
                stored_goal_pred: None,
            });
        }
        Ok(Fragment {
            steps,
            initial_carry: carry,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub augment: bool,
    /// Fragments per SGD step.
    pub batch_size: usize,
    pub fragment_len: usize,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            epochs: 5,
            lr: 1e-3,
            dropout: 0.0,
            augment: true,
            batch_size: 8,
            fragment_len: 16,
            seed: 0,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.fragment_len == 0 {
            return Err(Error::Config("batch_size and fragment_len must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Mean cross-entropy per epoch.
pub type BcHistory = Vec<f64>;

/// Trains a fresh policy-head-only network on the demonstrations.
pub fn bc_train(data: &BcDataset, net_config: NetConfig, config: &BcConfig) -> Result<(Network, BcHistory)> {
    let net = Network::new(net_config, config.seed)?;
    bc_continue(net, data, config)
}

/// Continues cross-entropy training of an existing network.
pub fn bc_continue(mut net: Network, data: &BcDataset, config: &BcConfig) -> Result<(Network, BcHistory)> {
    config.validate()?;
    if data.num_steps() == 0 {
        return Err(Error::Empty("behavior cloning dataset".into()));
    }
    if net.config.dims != data.env.config().dims
        || net.config.num_block_types != data.env.config().num_block_types
    {
        return Err(Error::Config("network and dataset disagree on grid or block types".into()));
    }
    net.config.dropout = config.dropout;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xBC);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &net.params,
    );
    let weights = LossWeights::only(crate::net::LossTerm::Policy, 1.0);
    let mut chunks: Vec<(usize, usize)> = Vec::new();
    for (e, ep) in data.episodes.iter().enumerate() {
        for s in (0..ep.actions.len()).step_by(config.fragment_len) {
            chunks.push((e, s));
        }
    }
    let nb = net.config.num_block_types;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        chunks.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in chunks.chunks(config.batch_size) {
            let mut frags = Vec::with_capacity(batch.len());
            for &(e, s) in batch {
                let perm = config
                    .augment
                    .then(|| random_block_permutation(nb, &mut rng));
                frags.push(data.fragment(&net, e, s, config.fragment_len, perm.as_deref())?);
            }
            let tb = TrainBatch { fragments: frags };
            let n = tb.num_steps();
            let (lb, grads) = loss_and_grads(&net, &tb, &weights, Some(&mut rng))?;
            if !lb.total.is_finite() {
                return Err(Error::Training {
                    iteration: epoch,
                    msg: "non-finite behavior cloning loss".into(),
                });
            }
            adam.step(&mut net.params, &grads)?;
            sum += lb.policy * n as f64;
            count += n;
        }
        history.push(sum / count as f64);
    }
    net.config.dropout = 0.0;
    Ok((net, history))
}

// ---------------------------------------------------------------------------
// Cross-entropy evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossEntropy {
    /// Mean nats per action; infinite when some action had probability 0.
    pub mean: f64,
    pub steps: usize,
    /// `(episode, step)` of the first zero-probability action.
    pub zero_at: Option<(usize, usize)>,
}

/// Mean `−log p(a_t | context)` of the human actions in a held-out corpus.
pub fn cross_entropy_eval(
    model: &dyn HumanModel,
    corpus: &Corpus,
    goals: &GoalSet,
    seed: u64,
) -> Result<CrossEntropy> {
    let env = Env::new(corpus.env.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut steps = 0;
    for e in 0..corpus.episodes.len() {
        let (goal, states) = corpus.replay(&env, goals, e)?;
        let mut memory = Memory::default();
        for (t, &(h, _)) in corpus.episodes[e].steps.iter().enumerate() {
            let d = model.act(&env, &states[t], &goal, &mut memory, &mut rng)?;
            let p = d.prob_of(h);
            if p <= 0.0 {
                return Ok(CrossEntropy {
                    mean: f64::INFINITY,
                    steps: steps + 1,
                    zero_at: Some((e, t)),
                });
            }
            total -= p.ln();
            steps += 1;
        }
    }
    if steps == 0 {
        return Err(Error::Empty("held-out corpus has no steps".into()));
    }
    Ok(CrossEntropy {
        mean: total / steps as f64,
        steps,
        zero_at: None,
    })
}
