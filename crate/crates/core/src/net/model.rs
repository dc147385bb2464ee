//! The convolutional trunk and its four heads, with a hand-written
//! backward pass.
//!
//! Trunk: a 1×1×1 embedding, residual blocks of two `k×k×k` convolutions
//! each followed by a per-channel scale and bias, an optional pooled bias
//! inside each block, and an optional gated recurrent carry per cell.
//! Heads: action and human-action logits per cell (`B + 8` channels),
//! goal logits per cell (`B` channels, softmax per cell), and a value read
//! from the cell-averaged trunk features.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dist::{head_channels, softmax_rows, GroupedSoftmax};
use super::linalg::{matmul, matmul_a_bt_acc, matmul_at_b_acc, NeighbourTable};
use super::obs::{ObsSpec, ObsTensor};
use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::world::{ActionSpace, Dims};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub dims: Dims,
    pub num_block_types: usize,
    pub channels: usize,
    pub num_residual_blocks: usize,
    pub kernel: usize,
    pub head_hidden: usize,
    pub use_recurrent: bool,
    /// Adds the observer's previous action to the input (human models).
    pub prev_action_input: bool,
    pub global_pool: bool,
    pub goal_head: bool,
    pub human_head: bool,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl NetConfig {
    pub fn new(dims: Dims, num_block_types: usize) -> Self {
        NetConfig {
            dims,
            num_block_types,
            channels: 8,
            num_residual_blocks: 2,
            kernel: 3,
            head_hidden: 16,
            use_recurrent: false,
            prev_action_input: false,
            global_pool: true,
            goal_head: true,
            human_head: true,
            dropout: 0.0,
            leaky_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("network: {m}")));
        if self.channels < 4 {
            return bad("channels must be at least 4");
        }
        if self.num_residual_blocks < 1 {
            return bad("at least one residual block is required");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if self.head_hidden < 1 {
            return bad("head width must be positive");
        }
        if self.num_block_types < 2 {
            return bad("at least two block types are required");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad("leaky slope must lie in [0, 1)");
        }
        if self.dims.volume() == 0 {
            return bad("empty grid");
        }
        Ok(())
    }

    pub fn obs_spec(&self) -> ObsSpec {
        ObsSpec {
            num_block_types: self.num_block_types,
            prev_action: self.prev_action_input,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        ActionSpace::new(self.dims, self.num_block_types)
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResIdx {
    w1: usize,
    s1: usize,
    b1: usize,
    pool: Option<usize>,
    w2: usize,
    s2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct RecIdx {
    wz: usize,
    bz: usize,
    wn: usize,
    bn: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    blocks: Vec<ResIdx>,
    rec: Option<RecIdx>,
    policy: Dense,
    human: Option<Dense>,
    goal: Option<Dense>,
    value: Dense,
}

/// Raw head outputs for one timestep.
#[derive(Clone, Debug)]
pub struct RawOutput {
    pub policy_logits: Vec<f64>,
    pub human_logits: Option<Vec<f64>>,
    pub goal_logits: Option<Vec<f64>>,
    pub value: f64,
    pub carry: Option<Vec<f64>>,
}

/// Gradients of a loss with respect to one timestep's raw outputs.
#[derive(Clone, Debug, Default)]
pub struct HeadGrads {
    pub policy_logits: Option<Vec<f64>>,
    pub human_logits: Option<Vec<f64>>,
    pub goal_logits: Option<Vec<f64>>,
    pub value: f64,
}

/// Masked, normalized outputs.
#[derive(Clone, Debug)]
pub struct NetOutput {
    /// Over the whole action space; zero off the valid set.
    pub policy: Vec<f64>,
    pub value: f64,
    /// `cells × B`, each row a distribution.
    pub goal_pred: Option<Vec<f64>>,
    pub human_pred: Option<Vec<f64>>,
    pub recurrent_state: Option<Vec<f64>>,
}

/// Valid action codes for the assistant policy and, optionally, for the
/// human-action head.
#[derive(Clone, Debug, Default)]
pub struct StepMasks {
    pub policy: Vec<u32>,
    pub human: Option<Vec<u32>>,
}

struct BlockCache {
    u: Vec<f64>,
    p1: Vec<f64>,
    q1: Vec<f64>,
    mask: Option<Vec<f64>>,
    pooled: Vec<f64>,
    x2: Vec<f64>,
    p2: Vec<f64>,
    r: Vec<f64>,
}

struct RecCache {
    x: Vec<f64>,
    c: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
}

struct StepCache {
    obs: Vec<f64>,
    h0: Vec<f64>,
    blocks: Vec<BlockCache>,
    rec: Option<RecCache>,
    trunk: Vec<f64>,
    policy_hidden: Vec<f64>,
    human_hidden: Vec<f64>,
    goal_hidden: Vec<f64>,
    value_mean: Vec<f64>,
    value_hidden: Vec<f64>,
}

/// Saved activations for a forward pass over a sequence.
pub struct SeqCache {
    steps: Vec<StepCache>,
}

impl SeqCache {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetConfig,
    pub params: ParamStore,
    layout: Layout,
    nbr: NeighbourTable,
    space: ActionSpace,
    in_ch: usize,
}

fn leaky(x: f64, a: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        a * x
    }
}

fn leaky_grad(x: f64, a: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        a
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_bias(m: &mut [f64], b: &[f64]) {
    for row in m.chunks_exact_mut(b.len()) {
        for (v, b) in row.iter_mut().zip(b) {
            *v += b;
        }
    }
}

fn col_sum_acc(m: &[f64], k: usize, out: &mut [f64]) {
    for row in m.chunks_exact(k) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn col_mean(m: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    col_sum_acc(m, k, &mut out);
    let n = (m.len() / k) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

impl Network {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params, &mut rng);
        Ok(Self::assemble(config, params, layout))
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_params(config: NetConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut fresh = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layout = build_layout(&config, &mut fresh, &mut rng);
        if !fresh.same_layout(&params) {
            return Err(Error::Checkpoint(
                "parameter names or shapes do not match the network config".into(),
            ));
        }
        Ok(Self::assemble(config, params, layout))
    }

    fn assemble(config: NetConfig, params: ParamStore, layout: Layout) -> Self {
        let nbr = NeighbourTable::new(config.dims, config.kernel);
        let space = config.action_space();
        let in_ch = config.obs_spec().channels();
        Network {
            config,
            params,
            layout,
            nbr,
            space,
            in_ch,
        }
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn obs_spec(&self) -> ObsSpec {
        self.config.obs_spec()
    }

    pub fn carry_len(&self) -> usize {
        self.config.dims.volume() * self.config.channels
    }

    pub fn has_goal_head(&self) -> bool {
        self.layout.goal.is_some()
    }

    pub fn has_human_head(&self) -> bool {
        self.layout.human.is_some()
    }

    /// Re-draws the action head's parameters (used when fine-tuning a model
    /// whose action head was trained for a different role).
    /// Parameter ids of the policy head's two dense layers.
    pub fn policy_head_param_ids(&self) -> Vec<usize> {
        let d = self.layout.policy;
        vec![d.w1, d.b1, d.w2, d.b2]
    }

    pub fn reinit_policy_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.layout.policy;
        let c = self.config.channels;
        let h = self.config.head_hidden;
        fill_normal(self.params.get_mut(d.w1), (2.0 / c as f64).sqrt(), &mut rng);
        self.params.get_mut(d.b1).fill(0.0);
        fill_normal(self.params.get_mut(d.w2), 0.1 * (1.0 / h as f64).sqrt(), &mut rng);
        self.params.get_mut(d.b2).fill(0.0);
    }

    fn check_obs(&self, obs: &ObsTensor) -> Result<()> {
        if obs.cells != self.config.dims.volume() || obs.channels != self.in_ch {
            return Err(Error::Shape(format!(
                "observation is {}×{}, network expects {}×{}",
                obs.cells,
                obs.channels,
                self.config.dims.volume(),
                self.in_ch
            )));
        }
        Ok(())
    }

    fn check_carry(&self, carry: Option<&[f64]>) -> Result<()> {
        if let Some(c) = carry {
            if c.len() != self.carry_len() {
                return Err(Error::Shape(format!(
                    "recurrent carry has {} values, expected {}",
                    c.len(),
                    self.carry_len()
                )));
            }
        }
        Ok(())
    }

    /// Raw outputs for one observation.
    pub fn forward_raw(&self, obs: &ObsTensor, carry: Option<&[f64]>) -> Result<RawOutput> {
        self.check_obs(obs)?;
        self.check_carry(carry)?;
        Ok(self.step(&obs.data, carry, None).0)
    }

    /// Masked outputs for one observation.
    pub fn evaluate(
        &self,
        obs: &ObsTensor,
        masks: &StepMasks,
        carry: Option<&[f64]>,
    ) -> Result<NetOutput> {
        let raw = self.forward_raw(obs, carry)?;
        self.normalize(raw, masks)
    }

    /// Masked outputs for a sequence, threading the recurrent carry.
    pub fn forward(
        &self,
        obs: &[ObsTensor],
        masks: &[StepMasks],
        carry: Option<&[f64]>,
    ) -> Result<Vec<NetOutput>> {
        if obs.is_empty() {
            return Err(Error::Shape("empty observation sequence".into()));
        }
        if obs.len() != masks.len() {
            return Err(Error::Shape(format!(
                "{} observations but {} masks",
                obs.len(),
                masks.len()
            )));
        }
        let mut carry = carry.map(<[f64]>::to_vec);
        let mut out = Vec::with_capacity(obs.len());
        for (o, m) in obs.iter().zip(masks) {
            let r = self.evaluate(o, m, carry.as_deref())?;
            carry = r.recurrent_state.clone();
            out.push(r);
        }
        Ok(out)
    }

    pub fn normalize(&self, raw: RawOutput, masks: &StepMasks) -> Result<NetOutput> {
        let size = self.space.size();
        check_codes(&masks.policy, size)?;
        let policy = GroupedSoftmax::new(&self.space, &raw.policy_logits, &masks.policy).dense(size);
        let human_pred = match (&raw.human_logits, &masks.human) {
            (Some(l), Some(codes)) => {
                check_codes(codes, size)?;
                Some(GroupedSoftmax::new(&self.space, l, codes).dense(size))
            }
            _ => None,
        };
        let goal_pred = raw
            .goal_logits
            .as_ref()
            .map(|g| softmax_rows(g, self.config.num_block_types));
        Ok(NetOutput {
            policy,
            value: raw.value,
            goal_pred,
            human_pred,
            recurrent_state: raw.carry,
        })
    }

    /// Forward over a sequence keeping activations for [`backward`](Self::backward).
    /// Dropout is active only when `rng` is given.
    pub fn forward_train(
        &self,
        obs: &[&ObsTensor],
        carry: Option<&[f64]>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<RawOutput>, SeqCache)> {
        if obs.is_empty() {
            return Err(Error::Shape("empty observation sequence".into()));
        }
        self.check_carry(carry)?;
        let mut carry = carry.map(<[f64]>::to_vec);
        let mut outs = Vec::with_capacity(obs.len());
        let mut steps = Vec::with_capacity(obs.len());
        for o in obs {
            self.check_obs(o)?;
            let (out, cache) = self.step(&o.data, carry.as_deref(), rng.as_deref_mut());
            carry = out.carry.clone();
            outs.push(out);
            steps.push(cache);
        }
        Ok((outs, SeqCache { steps }))
    }

    /// Smallest magnitude of any leaky-ReLU input over a sequence: the
    /// distance to the nearest point where the network is not
    /// differentiable.
    pub fn kink_margin(&self, obs: &[&ObsTensor], carry: Option<&[f64]>) -> Result<f64> {
        let (_, cache) = self.forward_train(obs, carry, None)?;
        let mut m = f64::INFINITY;
        let mut scan = |v: &[f64]| {
            for x in v {
                m = m.min(x.abs());
            }
        };
        for s in &cache.steps {
            scan(&s.h0);
            for b in &s.blocks {
                scan(&b.q1);
                scan(&b.r);
            }
            scan(&s.policy_hidden);
            scan(&s.human_hidden);
            scan(&s.goal_hidden);
            scan(&s.value_hidden);
        }
        Ok(m)
    }

    fn step(
        &self,
        obs: &[f64],
        carry: Option<&[f64]>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (RawOutput, StepCache) {
        let cfg = &self.config;
        let n = cfg.dims.volume();
        let c = cfg.channels;
        let a = cfg.leaky_slope;
        let p = &self.params;
        let l = &self.layout;
        let mut h0 = vec![0.0; n * c];
        matmul(obs, p.get(l.embed_w), &mut h0, n, self.in_ch, c, 0.0);
        add_bias(&mut h0, p.get(l.embed_b));
        let mut x: Vec<f64> = h0.iter().map(|&v| leaky(v, a)).collect();
        let mut blocks = Vec::with_capacity(l.blocks.len());
        let tc = self.nbr.taps * c;
        let mut cols = Vec::new();
        for b in &l.blocks {
            let u = x;
            self.nbr.gather(&u, c, &mut cols);
            let mut p1 = vec![0.0; n * c];
            matmul(&cols, p.get(b.w1), &mut p1, n, tc, c, 0.0);
            let q1 = affine(&p1, p.get(b.s1), p.get(b.b1));
            let mut d: Vec<f64> = q1.iter().map(|&v| leaky(v, a)).collect();
            let mask = match rng.as_deref_mut() {
                Some(r) if cfg.dropout > 0.0 => {
                    let keep = 1.0 / (1.0 - cfg.dropout);
                    let m: Vec<f64> = (0..n * c)
                        .map(|_| if r.random::<f64>() < cfg.dropout { 0.0 } else { keep })
                        .collect();
                    d.iter_mut().zip(&m).for_each(|(v, m)| *v *= m);
                    Some(m)
                }
                _ => None,
            };
            let pooled = if let Some(gp) = b.pool {
                let g = col_mean(&d, c);
                let mut bias = vec![0.0; c];
                matmul(&g, p.get(gp), &mut bias, 1, c, c, 0.0);
                add_bias(&mut d, &bias);
                g
            } else {
                Vec::new()
            };
            let x2 = d;
            self.nbr.gather(&x2, c, &mut cols);
            let mut p2 = vec![0.0; n * c];
            matmul(&cols, p.get(b.w2), &mut p2, n, tc, c, 0.0);
            let mut r = affine(&p2, p.get(b.s2), p.get(b.b2));
            r.iter_mut().zip(&u).for_each(|(r, u)| *r += u);
            x = r.iter().map(|&v| leaky(v, a)).collect();
            blocks.push(BlockCache {
                u,
                p1,
                q1,
                mask,
                pooled,
                x2,
                p2,
                r,
            });
        }
        let (rec, new_carry) = match l.rec {
            Some(ri) => {
                let prev = carry.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n * c]);
                let cat = concat_rows(&x, &prev, c);
                let mut z = vec![0.0; n * c];
                matmul(&cat, p.get(ri.wz), &mut z, n, 2 * c, c, 0.0);
                add_bias(&mut z, p.get(ri.bz));
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
                let mut nn = vec![0.0; n * c];
                matmul(&cat, p.get(ri.wn), &mut nn, n, 2 * c, c, 0.0);
                add_bias(&mut nn, p.get(ri.bn));
                nn.iter_mut().for_each(|v| *v = v.tanh());
                let next: Vec<f64> = (0..n * c)
                    .map(|i| (1.0 - z[i]) * prev[i] + z[i] * nn[i])
                    .collect();
                let out: Vec<f64> = x.iter().zip(&next).map(|(x, c)| x + c).collect();
                let cache = RecCache {
                    x: std::mem::replace(&mut x, out),
                    c: prev,
                    z,
                    n: nn,
                };
                (Some(cache), Some(next))
            }
            None => (None, None),
        };
        let trunk = x;
        let k = head_channels(cfg.num_block_types);
        let (policy_logits, policy_hidden) = self.cell_head(&trunk, l.policy, k);
        let (human_logits, human_hidden) = match l.human {
            Some(d) => {
                let (o, h) = self.cell_head(&trunk, d, k);
                (Some(o), h)
            }
            None => (None, Vec::new()),
        };
        let (goal_logits, goal_hidden) = match l.goal {
            Some(d) => {
                let (o, h) = self.cell_head(&trunk, d, cfg.num_block_types);
                (Some(o), h)
            }
            None => (None, Vec::new()),
        };
        let value_mean = col_mean(&trunk, c);
        let hh = cfg.head_hidden;
        let mut value_hidden = vec![0.0; hh];
        matmul(&value_mean, p.get(l.value.w1), &mut value_hidden, 1, c, hh, 0.0);
        add_bias(&mut value_hidden, p.get(l.value.b1));
        let act: Vec<f64> = value_hidden.iter().map(|&v| leaky(v, a)).collect();
        let mut v = [0.0];
        matmul(&act, p.get(l.value.w2), &mut v, 1, hh, 1, 0.0);
        let value = v[0] + p.get(l.value.b2)[0];
        let out = RawOutput {
            policy_logits,
            human_logits,
            goal_logits,
            value,
            carry: new_carry,
        };
        let cache = StepCache {
            obs: obs.to_vec(),
            h0,
            blocks,
            rec,
            trunk,
            policy_hidden,
            human_hidden,
            goal_hidden,
            value_mean,
            value_hidden,
        };
        (out, cache)
    }

    fn cell_head(&self, f: &[f64], d: Dense, k: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.config.dims.volume();
        let c = self.config.channels;
        let hh = self.config.head_hidden;
        let a = self.config.leaky_slope;
        let p = &self.params;
        let mut pre = vec![0.0; n * hh];
        matmul(f, p.get(d.w1), &mut pre, n, c, hh, 0.0);
        add_bias(&mut pre, p.get(d.b1));
        let act: Vec<f64> = pre.iter().map(|&v| leaky(v, a)).collect();
        let mut out = vec![0.0; n * k];
        matmul(&act, p.get(d.w2), &mut out, n, hh, k, 0.0);
        add_bias(&mut out, p.get(d.b2));
        (out, pre)
    }

    fn cell_head_backward(
        &self,
        f: &[f64],
        pre: &[f64],
        d: Dense,
        k: usize,
        dout: &[f64],
        grads: &mut ParamStore,
        df: &mut [f64],
    ) {
        let n = self.config.dims.volume();
        let c = self.config.channels;
        let hh = self.config.head_hidden;
        let a = self.config.leaky_slope;
        let p = &self.params;
        let act: Vec<f64> = pre.iter().map(|&v| leaky(v, a)).collect();
        matmul_at_b_acc(&act, dout, grads.get_mut(d.w2), n, hh, k);
        col_sum_acc(dout, k, grads.get_mut(d.b2));
        let mut dpre = vec![0.0; n * hh];
        matmul_a_bt_acc(dout, p.get(d.w2), &mut dpre, n, k, hh);
        dpre.iter_mut()
            .zip(pre)
            .for_each(|(g, &x)| *g *= leaky_grad(x, a));
        matmul_at_b_acc(f, &dpre, grads.get_mut(d.w1), n, c, hh);
        col_sum_acc(&dpre, hh, grads.get_mut(d.b1));
        matmul_a_bt_acc(&dpre, p.get(d.w1), df, n, hh, c);
    }

    /// Accumulates parameter gradients into `grads` given per-step output
    /// gradients. `grads` must have the layout of `self.params`.
    pub fn backward(&self, cache: &SeqCache, head_grads: &[HeadGrads], grads: &mut ParamStore) {
        assert_eq!(cache.steps.len(), head_grads.len());
        debug_assert!(grads.same_layout(&self.params));
        let cfg = &self.config;
        let n = cfg.dims.volume();
        let c = cfg.channels;
        let a = cfg.leaky_slope;
        let k = head_channels(cfg.num_block_types);
        let l = &self.layout;
        let p = &self.params;
        let tc = self.nbr.taps * c;
        let mut dcarry: Option<Vec<f64>> = None;
        let mut cols = Vec::new();
        let mut dcols = vec![0.0; n * tc];
        for (s, hg) in cache.steps.iter().zip(head_grads).rev() {
            let mut df = vec![0.0; n * c];
            if let Some(g) = &hg.policy_logits {
                self.cell_head_backward(&s.trunk, &s.policy_hidden, l.policy, k, g, grads, &mut df);
            }
            if let (Some(g), Some(d)) = (&hg.human_logits, l.human) {
                self.cell_head_backward(&s.trunk, &s.human_hidden, d, k, g, grads, &mut df);
            }
            if let (Some(g), Some(d)) = (&hg.goal_logits, l.goal) {
                self.cell_head_backward(
                    &s.trunk,
                    &s.goal_hidden,
                    d,
                    cfg.num_block_types,
                    g,
                    grads,
                    &mut df,
                );
            }
            if hg.value != 0.0 {
                let hh = cfg.head_hidden;
                let dv = hg.value;
                let act: Vec<f64> = s.value_hidden.iter().map(|&v| leaky(v, a)).collect();
                for (g, x) in grads.get_mut(l.value.w2).iter_mut().zip(&act) {
                    *g += x * dv;
                }
                grads.get_mut(l.value.b2)[0] += dv;
                let dpre: Vec<f64> = (0..hh)
                    .map(|j| p.get(l.value.w2)[j] * dv * leaky_grad(s.value_hidden[j], a))
                    .collect();
                matmul_at_b_acc(&s.value_mean, &dpre, grads.get_mut(l.value.w1), 1, c, hh);
                col_sum_acc(&dpre, hh, grads.get_mut(l.value.b1));
                let mut dm = vec![0.0; c];
                matmul_a_bt_acc(&dpre, p.get(l.value.w1), &mut dm, 1, hh, c);
                let inv = 1.0 / n as f64;
                for row in df.chunks_exact_mut(c) {
                    for (d, m) in row.iter_mut().zip(&dm) {
                        *d += m * inv;
                    }
                }
            }
            // recurrent block
            let mut dx = if let (Some(rc), Some(ri)) = (&s.rec, l.rec) {
                let mut dnext = df.clone();
                if let Some(dc) = &dcarry {
                    dnext.iter_mut().zip(dc).for_each(|(a, b)| *a += b);
                }
                let mut dzp = vec![0.0; n * c];
                let mut dnp = vec![0.0; n * c];
                let mut dprev = vec![0.0; n * c];
                for i in 0..n * c {
                    let (z, nn, cv) = (rc.z[i], rc.n[i], rc.c[i]);
                    let g = dnext[i];
                    dzp[i] = g * (nn - cv) * z * (1.0 - z);
                    dnp[i] = g * z * (1.0 - nn * nn);
                    dprev[i] = g * (1.0 - z);
                }
                let cat = concat_rows(&rc.x, &rc.c, c);
                matmul_at_b_acc(&cat, &dzp, grads.get_mut(ri.wz), n, 2 * c, c);
                col_sum_acc(&dzp, c, grads.get_mut(ri.bz));
                matmul_at_b_acc(&cat, &dnp, grads.get_mut(ri.wn), n, 2 * c, c);
                col_sum_acc(&dnp, c, grads.get_mut(ri.bn));
                let mut dcat = vec![0.0; n * 2 * c];
                matmul_a_bt_acc(&dzp, p.get(ri.wz), &mut dcat, n, c, 2 * c);
                matmul_a_bt_acc(&dnp, p.get(ri.wn), &mut dcat, n, c, 2 * c);
                let mut dx = df;
                for i in 0..n {
                    for j in 0..c {
                        dx[i * c + j] += dcat[i * 2 * c + j];
                        dprev[i * c + j] += dcat[i * 2 * c + c + j];
                    }
                }
                dcarry = Some(dprev);
                dx
            } else {
                df
            };
            // residual blocks
            for (b, bc) in l.blocks.iter().zip(&s.blocks).rev() {
                let mut dr = dx;
                dr.iter_mut()
                    .zip(&bc.r)
                    .for_each(|(g, &x)| *g *= leaky_grad(x, a));
                let mut du = dr.clone();
                affine_backward(&dr, &bc.p2, p.get(b.s2), grads, b.s2, b.b2, c);
                let dp2 = scale_cols(&dr, p.get(b.s2));
                self.nbr.gather(&bc.x2, c, &mut cols);
                matmul_at_b_acc(&cols, &dp2, grads.get_mut(b.w2), n, tc, c);
                dcols.iter_mut().for_each(|v| *v = 0.0);
                matmul_a_bt_acc(&dp2, p.get(b.w2), &mut dcols, n, c, tc);
                let mut dd = vec![0.0; n * c];
                self.nbr.scatter_add(&dcols, c, &mut dd);
                if let Some(gp) = b.pool {
                    let mut dbias = vec![0.0; c];
                    col_sum_acc(&dd, c, &mut dbias);
                    matmul_at_b_acc(&bc.pooled, &dbias, grads.get_mut(gp), 1, c, c);
                    let mut dg = vec![0.0; c];
                    matmul_a_bt_acc(&dbias, p.get(gp), &mut dg, 1, c, c);
                    let inv = 1.0 / n as f64;
                    for row in dd.chunks_exact_mut(c) {
                        for (d, g) in row.iter_mut().zip(&dg) {
                            *d += g * inv;
                        }
                    }
                }
                if let Some(m) = &bc.mask {
                    dd.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
                }
                dd.iter_mut()
                    .zip(&bc.q1)
                    .for_each(|(g, &x)| *g *= leaky_grad(x, a));
                affine_backward(&dd, &bc.p1, p.get(b.s1), grads, b.s1, b.b1, c);
                let dp1 = scale_cols(&dd, p.get(b.s1));
                self.nbr.gather(&bc.u, c, &mut cols);
                matmul_at_b_acc(&cols, &dp1, grads.get_mut(b.w1), n, tc, c);
                dcols.iter_mut().for_each(|v| *v = 0.0);
                matmul_a_bt_acc(&dp1, p.get(b.w1), &mut dcols, n, c, tc);
                self.nbr.scatter_add(&dcols, c, &mut du);
                dx = du;
            }
            // embedding
            dx.iter_mut()
                .zip(&s.h0)
                .for_each(|(g, &x)| *g *= leaky_grad(x, a));
            matmul_at_b_acc(&s.obs, &dx, grads.get_mut(l.embed_w), n, self.in_ch, c);
            col_sum_acc(&dx, c, grads.get_mut(l.embed_b));
        }
    }
}

fn check_codes(codes: &[u32], size: usize) -> Result<()> {
    if codes.is_empty() {
        return Err(Error::Shape("empty action mask".into()));
    }
    if codes.windows(2).any(|w| w[0] >= w[1]) || *codes.last().unwrap() as usize >= size {
        return Err(Error::Shape(
            "action mask must be strictly increasing codes inside the action space".into(),
        ));
    }
    Ok(())
}

fn affine(p: &[f64], s: &[f64], b: &[f64]) -> Vec<f64> {
    let c = s.len();
    let mut q = vec![0.0; p.len()];
    for (qr, pr) in q.chunks_exact_mut(c).zip(p.chunks_exact(c)) {
        for i in 0..c {
            qr[i] = pr[i] * s[i] + b[i];
        }
    }
    q
}

fn affine_backward(
    dq: &[f64],
    p: &[f64],
    _s: &[f64],
    grads: &mut ParamStore,
    si: usize,
    bi: usize,
    c: usize,
) {
    {
        let gs = grads.get_mut(si);
        for (dr, pr) in dq.chunks_exact(c).zip(p.chunks_exact(c)) {
            for i in 0..c {
                gs[i] += dr[i] * pr[i];
            }
        }
    }
    col_sum_acc(dq, c, grads.get_mut(bi));
}

fn scale_cols(m: &[f64], s: &[f64]) -> Vec<f64> {
    let c = s.len();
    let mut out = m.to_vec();
    for row in out.chunks_exact_mut(c) {
        for (v, s) in row.iter_mut().zip(s) {
            *v *= s;
        }
    }
    out
}

fn concat_rows(a: &[f64], b: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * 2);
    for (ra, rb) in a.chunks_exact(c).zip(b.chunks_exact(c)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    out
}

fn fill_normal(v: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    let d = Normal::new(0.0, std).expect("positive std");
    v.iter_mut().for_each(|x| *x = d.sample(rng));
}

fn build_layout(cfg: &NetConfig, ps: &mut ParamStore, rng: &mut ChaCha8Rng) -> Layout {
    let c = cfg.channels;
    let in_ch = cfg.obs_spec().channels();
    let taps = cfg.kernel.pow(3);
    let hh = cfg.head_hidden;
    let mut normal = |ps: &mut ParamStore, name: String, shape: &[usize], std: f64| {
        let mut t = Tensor::zeros(shape);
        fill_normal(&mut t.data, std, rng);
        ps.push(name, t)
    };
    let embed_w = normal(ps, "embed.w".into(), &[in_ch, c], (2.0 / in_ch as f64).sqrt());
    let embed_b = ps.push("embed.b", Tensor::zeros(&[c]));
    let mut blocks = Vec::new();
    for i in 0..cfg.num_residual_blocks {
        let conv_std = (2.0 / (taps * c) as f64).sqrt();
        let w1 = normal(ps, format!("res{i}.conv1.w"), &[taps * c, c], conv_std);
        let s1 = ps.push(format!("res{i}.affine1.scale"), Tensor::from_vec(&[c], vec![1.0; c]).unwrap());
        let b1 = ps.push(format!("res{i}.affine1.bias"), Tensor::zeros(&[c]));
        let pool = cfg
            .global_pool
            .then(|| normal(ps, format!("res{i}.pool.w"), &[c, c], (1.0 / c as f64).sqrt()));
        let w2 = normal(ps, format!("res{i}.conv2.w"), &[taps * c, c], conv_std);
        let s2 = ps.push(format!("res{i}.affine2.scale"), Tensor::from_vec(&[c], vec![1.0; c]).unwrap());
        let b2 = ps.push(format!("res{i}.affine2.bias"), Tensor::zeros(&[c]));
        blocks.push(ResIdx {
            w1,
            s1,
            b1,
            pool,
            w2,
            s2,
            b2,
        });
    }
    let rec = cfg.use_recurrent.then(|| {
        let std = (1.0 / (2 * c) as f64).sqrt();
        let wz = normal(ps, "rec.gate.w".into(), &[2 * c, c], std);
        let bz = ps.push("rec.gate.b", Tensor::from_vec(&[c], vec![-1.0; c]).unwrap());
        let wn = normal(ps, "rec.cand.w".into(), &[2 * c, c], std);
        let bn = ps.push("rec.cand.b", Tensor::zeros(&[c]));
        RecIdx { wz, bz, wn, bn }
    });
    let mut dense = |ps: &mut ParamStore, name: &str, out: usize| {
        let w1 = normal(ps, format!("{name}.w1"), &[c, hh], (2.0 / c as f64).sqrt());
        let b1 = ps.push(format!("{name}.b1"), Tensor::zeros(&[hh]));
        let w2 = normal(ps, format!("{name}.w2"), &[hh, out], 0.1 * (1.0 / hh as f64).sqrt());
        let b2 = ps.push(format!("{name}.b2"), Tensor::zeros(&[out]));
        Dense { w1, b1, w2, b2 }
    };
    let k = head_channels(cfg.num_block_types);
    let policy = dense(ps, "policy", k);
    let human = cfg.human_head.then(|| dense(ps, "human", k));
    let goal = cfg.goal_head.then(|| dense(ps, "goal", cfg.num_block_types));
    let value = dense(ps, "value", 1);
    Layout {
        embed_w,
        embed_b,
        blocks,
        rec,
        policy,
        human,
        goal,
        value,
    }
}
