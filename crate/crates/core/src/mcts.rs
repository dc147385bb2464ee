//! Belief-augmented MCTS.
//!
//! Edges are the searcher's actions. Every traversal of an edge draws a
//! fresh partner action from the partner model, so children are keyed by
//! the pair (searcher action, partner action). Edge rewards come from the
//! true goal when it is known, otherwise from the per-cell goal belief the
//! evaluator attaches to each node. Selection is PUCT on Q-values
//! normalized by the range of backed-up values seen at the node, optionally
//! split into an action-type stage and an instance stage.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goals::GoalGrid;
use crate::net::{encode_observation, Network, StepMasks};
use crate::world::{cell_cost, Action, ActionSpace, BlockType, Env, Player, WorldState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    KnownTheta,
    Marginal,
    Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirichletRule {
    Fixed(f64),
    TenOverValid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MctsConfig {
    pub num_simulations: u32,
    pub c_puct: f64,
    /// Exponent applied to root visit counts.
    pub tau: f64,
    pub dirichlet_alpha_type: f64,
    pub dirichlet_alpha_param: DirichletRule,
    pub dirichlet_epsilon: f64,
    pub gamma: f64,
    pub reward_mode: RewardMode,
    pub bilevel: bool,
    /// Added to the edge reward whenever the searcher's action is a no-op.
    #[serde(default)]
    pub noop_penalty: f64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        MctsConfig {
            num_simulations: 20,
            c_puct: 1.0,
            tau: 1.5,
            dirichlet_alpha_type: 0.25,
            dirichlet_alpha_param: DirichletRule::TenOverValid,
            dirichlet_epsilon: 0.25,
            gamma: 0.95,
            reward_mode: RewardMode::Split,
            bilevel: true,
            noop_penalty: 0.0,
        }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("mcts: {m}")));
        if self.num_simulations < 1 {
            return bad("num_simulations must be at least 1");
        }
        if !(self.c_puct > 0.0) {
            return bad("c_puct must be positive");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(0.0..=1.0).contains(&self.dirichlet_epsilon) {
            return bad("dirichlet_epsilon must lie in [0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.dirichlet_alpha_type > 0.0) {
            return bad("dirichlet_alpha_type must be positive");
        }
        if let DirichletRule::Fixed(a) = self.dirichlet_alpha_param {
            if !(a > 0.0) {
                return bad("fixed dirichlet alpha must be positive");
            }
        }
        Ok(())
    }
}

/// What the evaluator returns for one node.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Searcher prior over the whole action space, zero off the valid set.
    pub policy: Vec<f64>,
    pub value: f64,
    /// Per-cell goal distribution, `cells × B`.
    pub belief: Option<Vec<f64>>,
    /// Predicted partner distribution over the whole action space.
    pub partner: Option<Vec<f64>>,
    pub carry: Option<Vec<f64>>,
}

pub trait Evaluator {
    fn evaluate(
        &self,
        state: &WorldState,
        searcher_codes: &[u32],
        partner_codes: &[u32],
        carry: Option<&[f64]>,
    ) -> Result<Evaluation>;
}

/// Network-backed evaluator for either role.
pub struct NetEvaluator<'a> {
    pub net: &'a Network,
    pub role: Player,
    /// Visible goal, only for the human role.
    pub goal: Option<&'a GoalGrid>,
    /// Replace the value head's output with zero.
    pub zero_value: bool,
}

impl Evaluator for NetEvaluator<'_> {
    fn evaluate(
        &self,
        state: &WorldState,
        searcher_codes: &[u32],
        partner_codes: &[u32],
        carry: Option<&[f64]>,
    ) -> Result<Evaluation> {
        let obs = encode_observation(state, self.role, self.goal, &self.net.obs_spec())?;
        let masks = StepMasks {
            policy: searcher_codes.to_vec(),
            human: (self.net.has_human_head() && !partner_codes.is_empty())
                .then(|| partner_codes.to_vec()),
        };
        let out = self.net.evaluate(&obs, &masks, carry)?;
        Ok(Evaluation {
            policy: out.policy,
            value: if self.zero_value { 0.0 } else { out.value },
            belief: out.goal_pred,
            partner: out.human_pred,
            carry: out.recurrent_state,
        })
    }
}

/// Source of the non-searching player's actions inside the tree.
pub enum Partner<'a> {
    NoOp,
    /// Sample from the evaluator's partner prediction.
    Predicted,
    /// Any sampler, e.g. a scripted model.
    Model(&'a dyn Fn(&WorldState, &mut ChaCha8Rng) -> Action),
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

pub fn puct_score(
    q_normalized: f64,
    prior: f64,
    parent_visits: u32,
    edge_visits: u32,
    c_puct: f64,
) -> f64 {
    q_normalized + c_puct * prior * (parent_visits as f64).sqrt() / (1.0 + edge_visits as f64)
}

fn normalize(q: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((q - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.5
    }
}

// ---------------------------------------------------------------------------
// Tree
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Node {
    pub state: WorldState,
    pub eval: Evaluation,
    pub terminal: bool,
    /// Searcher's valid codes, sorted, with their priors.
    pub codes: Vec<u32>,
    pub priors: Vec<f64>,
    pub partner_codes: Vec<u32>,
    pub n: Vec<u32>,
    pub w: Vec<f64>,
    pub children: HashMap<(u32, u32), usize>,
    /// Reward on the edge into this node.
    pub reward_in: f64,
    pub backup_sum: f64,
    pub backup_count: u32,
    pub q_min: f64,
    pub q_max: f64,
    types: Vec<(usize, usize, usize)>,
}

impl Node {
    pub fn new(state: WorldState, codes: Vec<u32>, priors: Vec<f64>, space: &ActionSpace) -> Self {
        let k = codes.len();
        let types = type_ranges(&codes, space);
        Node {
            state,
            eval: Evaluation {
                policy: Vec::new(),
                value: 0.0,
                belief: None,
                partner: None,
                carry: None,
            },
            terminal: false,
            codes,
            priors,
            partner_codes: Vec::new(),
            n: vec![0; k],
            w: vec![0.0; k],
            children: HashMap::new(),
            reward_in: 0.0,
            backup_sum: 0.0,
            backup_count: 0,
            q_min: f64::INFINITY,
            q_max: f64::NEG_INFINITY,
            types,
        }
    }

    pub fn visits(&self) -> u32 {
        self.n.iter().sum()
    }

    /// Average of every value backed up through this node (0 if none).
    pub fn average(&self) -> f64 {
        if self.backup_count == 0 {
            0.0
        } else {
            self.backup_sum / self.backup_count as f64
        }
    }

    pub fn raw_q(&self, i: usize) -> f64 {
        if self.n[i] > 0 {
            self.w[i] / self.n[i] as f64
        } else {
            self.average()
        }
    }

    /// Min-max normalized Q used for selection.
    pub fn q_for_selection(&self, i: usize) -> f64 {
        normalize(self.raw_q(i), self.q_min, self.q_max)
    }

    fn record(&mut self, i: usize, g: f64) {
        self.n[i] += 1;
        self.w[i] += g;
        self.backup_sum += g;
        self.backup_count += 1;
        self.q_min = self.q_min.min(g);
        self.q_max = self.q_max.max(g);
    }

    /// Selected edge index (into `codes`).
    pub fn select(&self, cfg: &MctsConfig) -> usize {
        let total = self.visits();
        let best = |range: std::ops::Range<usize>, prior_scale: f64| {
            let mut bi = range.start;
            let mut bs = f64::NEG_INFINITY;
            for i in range {
                let s = puct_score(
                    self.q_for_selection(i),
                    self.priors[i] * prior_scale,
                    total,
                    self.n[i],
                    cfg.c_puct,
                );
                if s > bs {
                    bs = s;
                    bi = i;
                }
            }
            bi
        };
        if !cfg.bilevel {
            return best(0..self.codes.len(), 1.0);
        }
        let mut best_t = 0;
        let mut bs = f64::NEG_INFINITY;
        let mut best_mass = 0.0;
        for (t, &(_, lo, hi)) in self.types.iter().enumerate() {
            let mass: f64 = self.priors[lo..hi].iter().sum();
            let nt: u32 = self.n[lo..hi].iter().sum();
            let raw = if nt > 0 {
                self.w[lo..hi].iter().sum::<f64>() / nt as f64
            } else {
                self.average()
            };
            let s = puct_score(normalize(raw, self.q_min, self.q_max), mass, total, nt, cfg.c_puct);
            if s > bs {
                bs = s;
                best_t = t;
                best_mass = mass;
            }
        }
        let (_, lo, hi) = self.types[best_t];
        let scale = if best_mass > 0.0 { 1.0 / best_mass } else { 1.0 };
        best(lo..hi, scale)
    }
}

/// Contiguous (type index, start, end) runs of sorted codes.
fn type_ranges(codes: &[u32], space: &ActionSpace) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &c) in codes.iter().enumerate() {
        let t = space.action_type(c as usize).index();
        match out.last_mut() {
            Some(last) if last.0 == t => last.2 = i + 1,
            _ => out.push((t, i, i + 1)),
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct SearchTree {
    pub nodes: Vec<Node>,
    pub searcher: Player,
}

/// One step of a root-to-leaf path: parent node, edge index, child node.
pub type PathStep = (usize, usize, usize);

impl SearchTree {
    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    /// Backs `leaf_value` up along `path`, discounting by `gamma` and adding
    /// each child's incoming reward.
    pub fn backup(&mut self, path: &[PathStep], leaf_value: f64, gamma: f64) {
        let mut g = leaf_value;
        for &(parent, edge, child) in path.iter().rev() {
            g = self.nodes[child].reward_in + gamma * g;
            self.nodes[parent].record(edge, g);
        }
    }

    pub fn policy(&self, cfg: &MctsConfig) -> SearchPolicy {
        let root = self.root();
        let powered: Vec<f64> = root.n.iter().map(|&n| (n as f64).powf(cfg.tau)).collect();
        let s: f64 = powered.iter().sum();
        let probs = if s > 0.0 {
            powered.iter().map(|p| p / s).collect()
        } else {
            root.priors.clone()
        };
        SearchPolicy {
            codes: root.codes.clone(),
            probs,
            visits: root.n.clone(),
            q: (0..root.codes.len()).map(|i| root.raw_q(i)).collect(),
            belief: root.eval.belief.clone(),
            root_value: root.eval.value,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchPolicy {
    pub codes: Vec<u32>,
    pub probs: Vec<f64>,
    pub visits: Vec<u32>,
    pub q: Vec<f64>,
    pub belief: Option<Vec<f64>>,
    pub root_value: f64,
}

impl SearchPolicy {
    /// Code with the highest probability, lowest code on ties.
    pub fn argmax(&self) -> u32 {
        let mut bi = 0;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[bi] {
                bi = i;
            }
        }
        self.codes[bi]
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        self.codes[sample_index(&self.probs, rng)]
    }
}

pub fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

/// A cell edit executed by one player: (cell index, before, after).
pub type CellEdit = (usize, BlockType, BlockType);

/// The edits actually executed in a transition from `s` with executed
/// actions `eh` then `er`.
pub fn executed_edits(s: &WorldState, eh: &Action, er: &Action) -> (Option<CellEdit>, Option<CellEdit>) {
    let dims = s.dims;
    let after = |a: &Action| match *a {
        Action::Place { block, .. } => Some(block),
        Action::Break { .. } => Some(BlockType::AIR),
        _ => None,
    };
    let h = eh
        .cell()
        .zip(after(eh))
        .map(|(c, to)| (dims.index(c), s.grid[dims.index(c)], to));
    let r = er.cell().zip(after(er)).map(|(c, to)| {
        let i = dims.index(c);
        let from = match h {
            Some((hi, _, hto)) if hi == i => hto,
            _ => s.grid[i],
        };
        (i, from, to)
    });
    (h, r)
}

/// Expected reward of one edit under a per-cell belief row.
pub fn expected_edit_reward(edit: CellEdit, belief_row: &[f64]) -> f64 {
    let (_, from, to) = edit;
    belief_row
        .iter()
        .enumerate()
        .map(|(b, p)| {
            let g = BlockType(b as u8);
            p * (cell_cost(from, g) as f64 - cell_cost(to, g) as f64)
        })
        .sum()
}

/// Estimated shared reward of a transition. `belief_next` is the belief at
/// the resulting history; `belief_now` at the current one (used only by the
/// split mode, for the assistant's part). Known-goal mode uses `goal`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_reward(
    mode: RewardMode,
    s: &WorldState,
    eh: &Action,
    er: &Action,
    belief_now: Option<&[f64]>,
    belief_next: Option<&[f64]>,
    goal: Option<&GoalGrid>,
    num_block_types: usize,
) -> Result<f64> {
    let (h, r) = executed_edits(s, eh, er);
    let n = s.dims.volume();
    let row = |b: &[f64], i: usize| -> Result<Vec<f64>> {
        if b.len() != n * num_block_types {
            return Err(Error::DimensionMismatch {
                expected: s.dims,
                actual: s.dims,
            });
        }
        Ok(b[i * num_block_types..(i + 1) * num_block_types].to_vec())
    };
    let exact = |e: CellEdit, g: &GoalGrid| -> f64 {
        let t = g.cells[e.0];
        cell_cost(e.1, t) as f64 - cell_cost(e.2, t) as f64
    };
    let missing = || Error::Search(format!("{mode:?} reward needs a belief or goal"));
    let mut total = 0.0;
    match mode {
        RewardMode::KnownTheta => {
            let g = goal.ok_or_else(missing)?;
            if g.dims != s.dims {
                return Err(Error::DimensionMismatch {
                    expected: s.dims,
                    actual: g.dims,
                });
            }
            for e in [h, r].into_iter().flatten() {
                total += exact(e, g);
            }
        }
        RewardMode::Marginal => {
            let b = belief_next.ok_or_else(missing)?;
            for e in [h, r].into_iter().flatten() {
                total += expected_edit_reward(e, &row(b, e.0)?);
            }
        }
        RewardMode::Split => {
            let bn = belief_next.ok_or_else(missing)?;
            let bc = belief_now.ok_or_else(missing)?;
            if let Some(e) = h {
                total += expected_edit_reward(e, &row(bn, e.0)?);
            }
            if let Some(e) = r {
                total += expected_edit_reward(e, &row(bc, e.0)?);
            }
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Search
// ---------------------------------------------------------------------------

/// Inputs shared by every simulation of one search.
pub struct SearchSpec<'a> {
    pub env: &'a Env,
    pub searcher: Player,
    pub evaluator: &'a dyn Evaluator,
    pub partner: Partner<'a>,
    /// Required for known-goal rewards.
    pub goal: Option<&'a GoalGrid>,
    pub config: &'a MctsConfig,
}

impl SearchSpec<'_> {
    fn expand(&self, state: WorldState, carry: Option<&[f64]>) -> Result<Node> {
        let mut codes = Vec::new();
        self.env.valid_codes(&state, self.searcher, &mut codes);
        let mut partner_codes = Vec::new();
        if state.players.len() > 1 {
            self.env.valid_codes(&state, self.searcher.other(), &mut partner_codes);
        }
        let eval = self.evaluator.evaluate(&state, &codes, &partner_codes, carry)?;
        if eval.policy.len() != self.env.action_space().size() {
            return Err(Error::Search("evaluator policy has the wrong size".into()));
        }
        let mut priors: Vec<f64> = codes.iter().map(|&c| eval.policy[c as usize]).collect();
        let s: f64 = priors.iter().sum();
        if !(s > 0.0) || priors.iter().any(|p| !p.is_finite()) {
            return Err(Error::Search("evaluator prior has no mass on valid actions".into()));
        }
        if (s - 1.0).abs() > 1e-9 {
            priors.iter_mut().for_each(|p| *p /= s);
        }
        let terminal = state.timestep >= self.env.config().horizon
            || (self.config.reward_mode == RewardMode::KnownTheta
                && self
                    .goal
                    .map(|g| crate::world::grid_distance(&state.grid, &g.cells) == 0)
                    .unwrap_or(false));
        let mut node = Node::new(state, codes, priors, self.env.action_space());
        node.partner_codes = partner_codes;
        node.eval = eval;
        node.terminal = terminal;
        Ok(node)
    }

    fn partner_action(&self, node: &Node, rng: &mut ChaCha8Rng) -> Result<Action> {
        let space = self.env.action_space();
        Ok(match &self.partner {
            Partner::NoOp => Action::NoOp,
            Partner::Model(f) => f(&node.state, rng),
            Partner::Predicted => {
                let dist = node.eval.partner.as_ref().ok_or_else(|| {
                    Error::Search("partner prediction requested but the evaluator gave none".into())
                })?;
                let probs: Vec<f64> = node.partner_codes.iter().map(|&c| dist[c as usize]).collect();
                let i = sample_index(&probs, rng);
                space
                    .decode(node.partner_codes[i] as usize)
                    .unwrap_or(Action::NoOp)
            }
        })
    }

    fn add_root_noise(&self, node: &mut Node, rng: &mut ChaCha8Rng) {
        let eps = self.config.dirichlet_epsilon;
        if eps == 0.0 {
            return;
        }
        let k = node.codes.len();
        let alpha_param = match self.config.dirichlet_alpha_param {
            DirichletRule::Fixed(a) => a,
            DirichletRule::TenOverValid => 10.0 / k as f64,
        };
        if !self.config.bilevel {
            let eta = dirichlet(alpha_param, k, rng);
            for (p, e) in node.priors.iter_mut().zip(eta) {
                *p = (1.0 - eps) * *p + eps * e;
            }
            return;
        }
        let types = node.types.clone();
        let type_eta = dirichlet(self.config.dirichlet_alpha_type, types.len(), rng);
        for (&(_, lo, hi), te) in types.iter().zip(type_eta) {
            let mass: f64 = node.priors[lo..hi].iter().sum();
            let new_mass = (1.0 - eps) * mass + eps * te;
            let eta = dirichlet(alpha_param, hi - lo, rng);
            for (i, e) in (lo..hi).zip(eta) {
                let within = if mass > 0.0 {
                    node.priors[i] / mass
                } else {
                    1.0 / (hi - lo) as f64
                };
                node.priors[i] = new_mass * ((1.0 - eps) * within + eps * e);
            }
        }
    }

    /// Runs the configured number of simulations from `root`.
    pub fn run(
        &self,
        root: &WorldState,
        root_carry: Option<&[f64]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<SearchTree> {
        self.config.validate()?;
        let mut root_node = self.expand(root.clone(), root_carry)?;
        if root_node.terminal {
            return Err(Error::Search("search started from a terminal state".into()));
        }
        self.add_root_noise(&mut root_node, rng);
        let mut tree = SearchTree {
            nodes: vec![root_node],
            searcher: self.searcher,
        };
        let space = self.env.action_space();
        let nb = space.num_block_types;
        let mut path: Vec<PathStep> = Vec::new();
        for _ in 0..self.config.num_simulations {
            path.clear();
            let mut cur = 0;
            let leaf_value;
            loop {
                let node = &tree.nodes[cur];
                if node.terminal {
                    leaf_value = 0.0;
                    break;
                }
                let edge = node.select(self.config);
                let code = node.codes[edge];
                let own = space.decode(code as usize).expect("valid code decodes");
                let other = self.partner_action(node, rng)?;
                let other_code = space.encode(&other) as u32;
                if let Some(&child) = node.children.get(&(code, other_code)) {
                    path.push((cur, edge, child));
                    cur = child;
                    continue;
                }
                let (a_h, a_r) = match self.searcher {
                    Player::Human => (own, other),
                    Player::Assistant => (other, own),
                };
                let (next, eh, er) = self.env.transition(&node.state, a_h, a_r);
                let carry = node.eval.carry.clone();
                let mut child = self.expand(next, carry.as_deref())?;
                let parent = &tree.nodes[cur];
                let mut r = estimate_reward(
                    self.config.reward_mode,
                    &parent.state,
                    &eh,
                    &er,
                    parent.eval.belief.as_deref(),
                    child.eval.belief.as_deref(),
                    self.goal,
                    nb,
                )?;
                if own.is_noop() {
                    r += self.config.noop_penalty;
                }
                child.reward_in = r;
                leaf_value = if child.terminal { 0.0 } else { child.eval.value };
                let idx = tree.nodes.len();
                tree.nodes.push(child);
                tree.nodes[cur].children.insert((code, other_code), idx);
                path.push((cur, edge, idx));
                break;
            }
            tree.backup(&path, leaf_value, self.config.gamma);
        }
        Ok(tree)
    }
}

fn dirichlet(alpha: f64, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let g = Gamma::new(alpha, 1.0).expect("positive alpha");
    let mut v: Vec<f64> = (0..k).map(|_| g.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    } else {
        v = vec![1.0 / k as f64; k];
    }
    v
}

/// Convenience wrapper returning the root policy.
pub fn run_search(
    spec: &SearchSpec,
    root: &WorldState,
    root_carry: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<(SearchPolicy, SearchTree)> {
    let tree = spec.run(root, root_carry, rng)?;
    Ok((tree.policy(spec.config), tree))
}

/// Strictly positive regularized policy over the root's valid actions:
/// `π(a) = λ·P(a) / (α − q(a))` with `λ = c·√N / (|A| + N)` and `α` found by
/// bisection so that the probabilities sum to one.
pub fn full_support_policy(root: &Node, c_puct: f64) -> Vec<f64> {
    let k = root.codes.len();
    let total = root.visits() as f64;
    let lambda = c_puct * total.sqrt() / (k as f64 + total);
    if lambda <= 0.0 || k == 1 {
        return root.priors.clone();
    }
    let q: Vec<f64> = (0..k).map(|i| root.q_for_selection(i)).collect();
    let p = &root.priors;
    let sum = |alpha: f64| -> f64 {
        q.iter()
            .zip(p)
            .map(|(q, p)| lambda * p / (alpha - q))
            .sum()
    };
    let mut lo = q
        .iter()
        .zip(p)
        .map(|(q, p)| q + lambda * p)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut hi = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + lambda;
    let mut alpha = hi;
    for _ in 0..500 {
        alpha = 0.5 * (lo + hi);
        let s = sum(alpha);
        if (s - 1.0).abs() < 1e-12 {
            break;
        }
        if s > 1.0 {
            lo = alpha;
        } else {
            hi = alpha;
        }
    }
    let mut out: Vec<f64> = q
        .iter()
        .zip(p)
        .map(|(q, p)| lambda * p / (alpha - q))
        .collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

/// Network-free evaluator: uniform priors, zero value, a fixed belief and
/// a uniform partner prediction.
pub struct PriorEvaluator {
    pub space: ActionSpace,
    pub belief: Option<Vec<f64>>,
}

impl Evaluator for PriorEvaluator {
    fn evaluate(
        &self,
        _state: &WorldState,
        searcher_codes: &[u32],
        partner_codes: &[u32],
        _carry: Option<&[f64]>,
    ) -> Result<Evaluation> {
        let uniform = |codes: &[u32]| {
            let mut v = vec![0.0; self.space.size()];
            for &c in codes {
                v[c as usize] = 1.0 / codes.len() as f64;
            }
            v
        };
        Ok(Evaluation {
            policy: uniform(searcher_codes),
            value: 0.0,
            belief: self.belief.clone(),
            partner: (!partner_codes.is_empty()).then(|| uniform(partner_codes)),
            carry: None,
        })
    }
}
