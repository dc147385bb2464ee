#![allow(dead_code)]

use mbag::net::{Fragment, NetConfig, Network, ObsTensor, TrainBatch, TrainStep};
use mbag::world::Dims;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tiny network with every optional component switched on.
pub fn tiny_config(recurrent: bool) -> NetConfig {
    let mut c = NetConfig::new(Dims::new(3, 2, 3), 2);
    c.channels = 4;
    c.head_hidden = 3;
    c.num_residual_blocks = 1;
    c.use_recurrent = recurrent;
    c.prev_action_input = true;
    c
}

fn random_codes(rng: &mut ChaCha8Rng, net: &Network) -> Vec<u32> {
    let space = net.action_space();
    let mut codes: Vec<u32> = (0..space.size())
        .filter(|&c| space.decode(c).is_some() && rng.random::<f64>() < 0.5)
        .map(|c| c as u32)
        .collect();
    if codes.is_empty() {
        codes.push(0);
    }
    codes
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Random parameters and a random batch of `frags` fragments, each of
/// `len` steps, with every loss term populated.
pub fn random_problem(seed: u64, cfg: NetConfig, frags: usize, len: usize) -> (Network, TrainBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(cfg, seed).unwrap();
    // move away from the initial scales so every head carries signal
    for i in 0..net.params.len() {
        for v in net.params.get_mut(i) {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let n = net.config.dims.volume();
    let nb = net.config.num_block_types;
    let ch = net.obs_spec().channels();
    let mut batch = TrainBatch::default();
    for _ in 0..frags {
        let mut steps = Vec::new();
        for _ in 0..len {
            let obs = ObsTensor {
                cells: n,
                channels: ch,
                data: (0..n * ch).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let policy_codes = random_codes(&mut rng, &net);
            let target_policy = random_dist(&mut rng, policy_codes.len());
            let human_codes = random_codes(&mut rng, &net);
            let human_action = *human_codes.choose(&mut rng).unwrap();
            let stored: Vec<f64> = (0..n).flat_map(|_| random_dist(&mut rng, nb)).collect();
            steps.push(TrainStep {
                obs,
                policy_codes,
                target_policy,
                reward_to_go: rng.random_range(-2.0..2.0),
                goal: Some((0..n).map(|_| rng.random_range(0..nb as u8)).collect()),
                human_codes,
                human_action: Some(human_action),
                stored_goal_pred: Some(stored),
            });
        }
        let initial_carry = net
            .config
            .use_recurrent
            .then(|| (0..net.carry_len()).map(|_| rng.random_range(-0.5..0.5)).collect());
        batch.fragments.push(Fragment {
            steps,
            initial_carry,
        });
    }
    (net, batch)
}

/// Minimum distance from any leaky-ReLU input to its kink over the batch.
pub fn kink_margin(net: &Network, batch: &TrainBatch) -> f64 {
    batch
        .fragments
        .iter()
        .map(|f| {
            let obs: Vec<&ObsTensor> = f.steps.iter().map(|s| &s.obs).collect();
            net.kink_margin(&obs, f.initial_carry.as_deref()).unwrap()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Finite-difference gradient check over `draws` random problems. Draws
/// whose stencil could straddle a leaky-ReLU kink are skipped, since the
/// loss is not differentiable there. Returns the worst relative error.
pub fn gradient_suite(draws: usize, weights: &mbag::net::LossWeights) -> (f64, String) {
    let mut accepted = 0;
    let mut worst = (0.0, String::new());
    let mut seed = 0;
    while accepted < draws {
        let (net, batch) = random_problem(seed, tiny_config(seed % 2 == 0), 2, 2);
        seed += 1;
        if kink_margin(&net, &batch) < 1e-2 {
            continue;
        }
        accepted += 1;
        let r = mbag::net::gradcheck::check(&net, &batch, weights, 1e-4, 1e-6).unwrap();
        if r.max_rel_error > worst.0 {
            worst = (
                r.max_rel_error,
                format!("seed {} {}: {} vs {}", seed - 1, r.worst_param, r.analytic, r.numeric),
            );
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Enumerable-goal toy games on the 4×1×1 row
// ---------------------------------------------------------------------------

use mbag::goals::GoalGrid;
use mbag::mcts::{Evaluation, Evaluator};
use mbag::world::{Action, ActionSpace, BlockType, Env, Player, WorldState};

/// A prior over goals on the two editable cells of the row, with a
/// Boltzmann human that knows the goal.
pub struct ToyGame {
    pub env: Env,
    pub start: WorldState,
    pub goals: Vec<GoalGrid>,
    pub prior: Vec<f64>,
    pub beta: f64,
}

impl ToyGame {
    pub fn random(seed: u64, num_block_types: usize, reach: u8) -> ToyGame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (env, mut start) = mbag::world::line_world(num_block_types, 1, reach);
        for x in [1u8, 2] {
            if rng.random::<f64>() < 0.4 {
                let b = rng.random_range(1..num_block_types as u8);
                start.set_block(mbag::world::Vec3::new(x, 0, 0), BlockType(b));
            }
        }
        let mut goals = Vec::new();
        let mut prior = Vec::new();
        for a in 0..num_block_types as u8 {
            for b in 0..num_block_types as u8 {
                goals.push(GoalGrid::from_cells_unchecked(
                    start.dims,
                    vec![BlockType(0), BlockType(a), BlockType(b), BlockType(0)],
                ));
                prior.push(rng.random::<f64>().powi(2) + 0.01);
            }
        }
        let s: f64 = prior.iter().sum();
        prior.iter_mut().for_each(|p| *p /= s);
        ToyGame {
            env,
            start,
            goals,
            prior,
            beta: 2.0,
        }
    }

    /// First instance from a seed stream whose best assistant action beats
    /// every action of lower value by at least `margin`.
    pub fn separated(seed: u64, num_block_types: usize, reach: u8, margin: f64) -> ToyGame {
        (0..)
            .map(|k| ToyGame::random(seed * 1000 + k, num_block_types, reach))
            .find(|g| {
                let v = g.expectimax();
                let best = v.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
                v.iter().all(|x| x.1 >= best - 1e-9 || x.1 <= best - margin)
            })
            .unwrap()
    }

    pub fn space(&self) -> &ActionSpace {
        self.env.action_space()
    }

    pub fn human_codes(&self, s: &WorldState) -> Vec<u32> {
        let mut c = Vec::new();
        self.env.valid_codes(s, Player::Human, &mut c);
        c
    }

    /// Human action distribution given the goal, aligned with `human_codes`.
    pub fn human_policy(&self, s: &WorldState, goal: &GoalGrid) -> Vec<f64> {
        let codes = self.human_codes(s);
        let scores: Vec<f64> = codes
            .iter()
            .map(|&c| {
                let a = self.space().decode(c as usize).unwrap();
                self.env.apply(s, a, Action::NoOp, goal).unwrap().reward_human
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|x| (self.beta * (x - m)).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    /// Posterior over goals after observing the human's executed action
    /// (`None` = before any observation).
    pub fn posterior(&self, observed: Option<u32>) -> Vec<f64> {
        let codes = self.human_codes(&self.start);
        let mut post: Vec<f64> = self
            .goals
            .iter()
            .zip(&self.prior)
            .map(|(g, p)| match observed {
                None => *p,
                Some(a) => {
                    let pol = self.human_policy(&self.start, g);
                    p * codes.iter().position(|&c| c == a).map(|i| pol[i]).unwrap_or(0.0)
                }
            })
            .collect();
        let z: f64 = post.iter().sum();
        post.iter_mut().for_each(|p| *p /= z);
        post
    }

    /// Per-cell marginals of a goal distribution.
    pub fn marginals(&self, post: &[f64]) -> Vec<f64> {
        let nb = self.space().num_block_types;
        let mut m = vec![0.0; 4 * nb];
        for (g, p) in self.goals.iter().zip(post) {
            for (c, b) in g.cells.iter().enumerate() {
                m[c * nb + b.index()] += p;
            }
        }
        m
    }

    /// Marginal human action distribution at the start, dense.
    pub fn human_marginal(&self) -> Vec<f64> {
        let codes = self.human_codes(&self.start);
        let mut dense = vec![0.0; self.space().size()];
        for (g, p) in self.goals.iter().zip(&self.prior) {
            for (c, q) in codes.iter().zip(self.human_policy(&self.start, g)) {
                dense[*c as usize] += p * q;
            }
        }
        dense
    }

    /// Exact expected one-step shared reward of each assistant action.
    pub fn expectimax(&self) -> Vec<(u32, f64)> {
        let mut rc = Vec::new();
        self.env.valid_codes(&self.start, Player::Assistant, &mut rc);
        let hc = self.human_codes(&self.start);
        rc.iter()
            .map(|&r| {
                let ar = self.space().decode(r as usize).unwrap();
                let mut v = 0.0;
                for (g, p) in self.goals.iter().zip(&self.prior) {
                    for (h, q) in hc.iter().zip(self.human_policy(&self.start, g)) {
                        let ah = self.space().decode(*h as usize).unwrap();
                        let st = self.env.apply(&self.start, ah, ar, g).unwrap();
                        v += p * q * (st.reward_human + st.reward_assistant);
                    }
                }
                (r, v)
            })
            .collect()
    }
}

/// Evaluator with exact Bayesian beliefs for the one-step toy game.
pub struct ToyOracle<'a>(pub &'a ToyGame);

impl Evaluator for ToyOracle<'_> {
    fn evaluate(
        &self,
        state: &WorldState,
        searcher_codes: &[u32],
        _partner_codes: &[u32],
        _carry: Option<&[f64]>,
    ) -> mbag::Result<Evaluation> {
        let g = self.0;
        let space = g.space();
        let observed = (state.timestep > 0)
            .then(|| space.encode(&state.players[0].last_action) as u32);
        let mut policy = vec![0.0; space.size()];
        for &c in searcher_codes {
            policy[c as usize] = 1.0 / searcher_codes.len() as f64;
        }
        Ok(Evaluation {
            policy,
            value: 0.0,
            belief: Some(g.marginals(&g.posterior(observed))),
            partner: Some(g.human_marginal()),
            carry: None,
        })
    }
}
