//! The five-term training loss and its gradients.
//!
//! Per timestep: KL from the search policy to the network policy, squared
//! value error against the reward-to-go, goal negative log-likelihood and
//! the KL from the current goal prediction to the one stored at sampling
//! time (both summed over cells), and the human-action negative
//! log-likelihood. The reported loss is the weighted mean over timesteps.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dist::{log_softmax_rows, GroupedSoftmax, LOG_FLOOR};
use super::model::{HeadGrads, Network, RawOutput};
use super::obs::ObsTensor;
use super::tensor::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub policy: f64,
    pub value: f64,
    pub reward: f64,
    pub prev_reward: f64,
    pub action: f64,
    /// When set, `prev_reward` rises linearly to this value over training.
    #[serde(default)]
    pub prev_reward_final: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            policy: 1.0,
            value: 0.01,
            reward: 3.0,
            prev_reward: 0.0,
            action: 1.0,
            prev_reward_final: Some(30.0),
        }
    }
}

impl LossWeights {
    pub fn only(term: LossTerm, w: f64) -> Self {
        let mut out = LossWeights {
            policy: 0.0,
            value: 0.0,
            reward: 0.0,
            prev_reward: 0.0,
            action: 0.0,
            prev_reward_final: None,
        };
        match term {
            LossTerm::Policy => out.policy = w,
            LossTerm::Value => out.value = w,
            LossTerm::Reward => out.reward = w,
            LossTerm::PrevReward => out.prev_reward = w,
            LossTerm::Action => out.action = w,
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.policy,
            self.value,
            self.reward,
            self.prev_reward,
            self.action,
            self.prev_reward_final.unwrap_or(0.0),
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Weights at `progress` in `[0, 1]` through training.
    pub fn at(&self, progress: f64) -> LossWeights {
        let mut w = *self;
        if let Some(end) = self.prev_reward_final {
            let t = progress.clamp(0.0, 1.0);
            w.prev_reward = self.prev_reward + (end - self.prev_reward) * t;
        }
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Policy,
    Value,
    Reward,
    PrevReward,
    Action,
}

/// One timestep of training data.
#[derive(Clone, Debug)]
pub struct TrainStep {
    pub obs: ObsTensor,
    /// Valid codes for the trained player, sorted.
    pub policy_codes: Vec<u32>,
    /// Search policy aligned with `policy_codes`; may be empty when unused.
    pub target_policy: Vec<f64>,
    pub reward_to_go: f64,
    /// True goal block per cell.
    pub goal: Option<Vec<u8>>,
    /// Valid human codes, sorted; may be empty when unused.
    pub human_codes: Vec<u32>,
    pub human_action: Option<u32>,
    /// Goal prediction made when the step was generated (`cells × B`).
    pub stored_goal_pred: Option<Vec<f64>>,
}

/// A contiguous run of timesteps from one episode.
#[derive(Clone, Debug, Default)]
pub struct Fragment {
    pub steps: Vec<TrainStep>,
    pub initial_carry: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainBatch {
    pub fragments: Vec<Fragment>,
}

impl TrainBatch {
    pub fn num_steps(&self) -> usize {
        self.fragments.iter().map(|f| f.steps.len()).sum()
    }
}

/// Unweighted per-term means and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub reward: f64,
    pub prev_reward: f64,
    pub action: f64,
}

struct StepTerms {
    policy: f64,
    value: f64,
    reward: f64,
    prev_reward: f64,
    action: f64,
}

pub fn loss_and_grads(
    net: &Network,
    batch: &TrainBatch,
    weights: &LossWeights,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossBreakdown, ParamStore)> {
    let mut grads = net.params.zeros_like();
    let lb = run(net, batch, weights, rng, Some(&mut grads))?;
    Ok((lb, grads))
}

/// Loss only, without dropout.
pub fn loss(net: &Network, batch: &TrainBatch, weights: &LossWeights) -> Result<LossBreakdown> {
    run(net, batch, weights, None, None)
}

fn run(
    net: &Network,
    batch: &TrainBatch,
    weights: &LossWeights,
    mut rng: Option<&mut ChaCha8Rng>,
    mut grads: Option<&mut ParamStore>,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let total_steps = batch.num_steps();
    if total_steps == 0 {
        return Err(Error::Empty("training batch has no steps".into()));
    }
    let scale = 1.0 / total_steps as f64;
    let mut lb = LossBreakdown::default();
    for frag in &batch.fragments {
        if frag.steps.is_empty() {
            continue;
        }
        let obs: Vec<&ObsTensor> = frag.steps.iter().map(|s| &s.obs).collect();
        let (outs, cache) = net.forward_train(&obs, frag.initial_carry.as_deref(), rng.as_deref_mut())?;
        let mut hgs = Vec::with_capacity(outs.len());
        for (step, out) in frag.steps.iter().zip(&outs) {
            let (t, hg) = step_terms(net, step, out, weights, scale)?;
            lb.policy += t.policy * scale;
            lb.value += t.value * scale;
            lb.reward += t.reward * scale;
            lb.prev_reward += t.prev_reward * scale;
            lb.action += t.action * scale;
            hgs.push(hg);
        }
        if let Some(g) = grads.as_deref_mut() {
            net.backward(&cache, &hgs, g);
        }
    }
    lb.total = weights.policy * lb.policy
        + weights.value * lb.value
        + weights.reward * lb.reward
        + weights.prev_reward * lb.prev_reward
        + weights.action * lb.action;
    Ok(lb)
}

fn step_terms(
    net: &Network,
    step: &TrainStep,
    out: &RawOutput,
    w: &LossWeights,
    scale: f64,
) -> Result<(StepTerms, HeadGrads)> {
    let space = net.action_space();
    let n = net.config.dims.volume();
    let nb = net.config.num_block_types;
    let mut hg = HeadGrads::default();
    let mut t = StepTerms {
        policy: 0.0,
        value: 0.0,
        reward: 0.0,
        prev_reward: 0.0,
        action: 0.0,
    };

    if !step.target_policy.is_empty() {
        if step.target_policy.len() != step.policy_codes.len() {
            return Err(Error::Shape(format!(
                "target policy has {} entries for {} valid actions",
                step.target_policy.len(),
                step.policy_codes.len()
            )));
        }
        let d = GroupedSoftmax::new(space, &out.policy_logits, &step.policy_codes);
        t.policy = step
            .target_policy
            .iter()
            .zip(&d.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| p * (p.max(LOG_FLOOR).ln() - l))
            .sum();
        if w.policy > 0.0 {
            let g: Vec<f64> = step.target_policy.iter().map(|p| -p * w.policy * scale).collect();
            let mut dl = vec![0.0; out.policy_logits.len()];
            d.backward(space, &out.policy_logits, &g, &mut dl);
            hg.policy_logits = Some(dl);
        }
    } else if w.policy > 0.0 {
        return Err(Error::Contract("policy weight set but no search policy stored".into()));
    }

    let diff = out.value - step.reward_to_go;
    t.value = diff * diff;
    hg.value = 2.0 * diff * w.value * scale;

    let need_goal = w.reward > 0.0 || w.prev_reward > 0.0;
    match &out.goal_logits {
        Some(gl) => {
            let logp = log_softmax_rows(gl, nb);
            let mut dg = vec![0.0; gl.len()];
            if let Some(goal) = &step.goal {
                if goal.len() != n {
                    return Err(Error::Shape("goal does not match the grid".into()));
                }
                for (c, &b) in goal.iter().enumerate() {
                    let b = b as usize;
                    if b >= nb {
                        return Err(Error::Shape(format!("goal block {b} out of range")));
                    }
                    t.reward -= logp[c * nb + b];
                    if w.reward > 0.0 {
                        let k = w.reward * scale;
                        for j in 0..nb {
                            let onehot = if j == b { 1.0 } else { 0.0 };
                            dg[c * nb + j] += k * (logp[c * nb + j].exp() - onehot);
                        }
                    }
                }
            } else if w.reward > 0.0 {
                return Err(Error::Contract("reward weight set but goal missing".into()));
            }
            if let Some(q) = &step.stored_goal_pred {
                if q.len() != n * nb {
                    return Err(Error::Shape("stored goal prediction has the wrong size".into()));
                }
                for c in 0..n {
                    let row = c * nb..(c + 1) * nb;
                    let lr: Vec<f64> = logp[row.clone()]
                        .iter()
                        .zip(&q[row.clone()])
                        .map(|(lp, q)| lp - q.max(LOG_FLOOR).ln())
                        .collect();
                    let kl: f64 = logp[row.clone()].iter().zip(&lr).map(|(lp, l)| lp.exp() * l).sum();
                    t.prev_reward += kl;
                    if w.prev_reward > 0.0 {
                        let k = w.prev_reward * scale;
                        for (j, l) in lr.iter().enumerate() {
                            let p = logp[c * nb + j].exp();
                            dg[c * nb + j] += k * p * (l - kl);
                        }
                    }
                }
            } else if w.prev_reward > 0.0 {
                return Err(Error::Contract(
                    "previous-prediction weight set but no stored prediction".into(),
                ));
            }
            if need_goal {
                hg.goal_logits = Some(dg);
            }
        }
        None if need_goal => {
            return Err(Error::Contract("goal terms weighted but the network has no goal head".into()))
        }
        None => {}
    }

    match (&out.human_logits, step.human_action) {
        (Some(hl), Some(a)) => {
            let d = GroupedSoftmax::new(space, hl, &step.human_codes);
            let i = d.position(a).ok_or_else(|| {
                Error::Contract(format!("human action {a} is not in the valid set"))
            })?;
            t.action = -d.log_probs[i];
            if w.action > 0.0 {
                let mut g = vec![0.0; d.codes.len()];
                g[i] = -w.action * scale;
                let mut dl = vec![0.0; hl.len()];
                d.backward(space, hl, &g, &mut dl);
                hg.human_logits = Some(dl);
            }
        }
        _ if w.action > 0.0 => {
            return Err(Error::Contract(
                "action weight set but no human head or human action".into(),
            ))
        }
        _ => {}
    }
    Ok((t, hg))
}
