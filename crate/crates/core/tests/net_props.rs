mod common;

use common::{random_problem, tiny_config};
use mbag::net::{
    encode_observation, loss, loss_and_grads, Adam, AdamConfig, Fragment, LossTerm, LossWeights,
    NetConfig, Network, ObsTensor, StepMasks, TrainBatch, TrainStep,
};
use mbag::world::{Dims, Player, Vec3, WorldState};

fn all_weights() -> LossWeights {
    LossWeights {
        policy: 1.0,
        value: 0.5,
        reward: 0.7,
        prev_reward: 0.9,
        action: 1.3,
        prev_reward_final: None,
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let (err, at) = common::gradient_suite(20, &all_weights());
    assert!(err < 1e-4, "{at} (err {err})");
}

#[test]
fn loss_decomposes_by_term() {
    let (net, batch) = random_problem(3, tiny_config(true), 2, 3);
    let full = loss(&net, &batch, &all_weights()).unwrap();
    let terms = [
        (LossTerm::Policy, full.policy),
        (LossTerm::Value, full.value),
        (LossTerm::Reward, full.reward),
        (LossTerm::PrevReward, full.prev_reward),
        (LossTerm::Action, full.action),
    ];
    let mut sum = 0.0;
    let w = all_weights();
    for (term, standalone) in terms {
        let lw = LossWeights::only(term, 1.0);
        let single = loss(&net, &batch, &lw).unwrap();
        assert!((single.total - standalone).abs() < 1e-12);
        sum += match term {
            LossTerm::Policy => w.policy,
            LossTerm::Value => w.value,
            LossTerm::Reward => w.reward,
            LossTerm::PrevReward => w.prev_reward,
            LossTerm::Action => w.action,
        } * standalone;
    }
    assert!((sum - full.total).abs() < 1e-10);
}

#[test]
fn recurrent_carry_stepwise_equals_whole() {
    let (net, batch) = random_problem(11, tiny_config(true), 1, 5);
    let frag = &batch.fragments[0];
    let obs: Vec<ObsTensor> = frag.steps.iter().map(|s| s.obs.clone()).collect();
    let masks: Vec<StepMasks> = frag
        .steps
        .iter()
        .map(|s| StepMasks {
            policy: s.policy_codes.clone(),
            human: Some(s.human_codes.clone()),
        })
        .collect();
    let whole = net.forward(&obs, &masks, frag.initial_carry.as_deref()).unwrap();
    let mut carry = frag.initial_carry.clone();
    for (i, (o, m)) in obs.iter().zip(&masks).enumerate() {
        let one = net.evaluate(o, m, carry.as_deref()).unwrap();
        for (a, b) in one.policy.iter().zip(&whole[i].policy) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((one.value - whole[i].value).abs() < 1e-6);
        carry = one.recurrent_state;
    }
}

#[test]
fn matching_search_policy_and_value_give_zero_loss() {
    let (net, mut batch) = random_problem(5, tiny_config(false), 1, 3);
    for step in &mut batch.fragments[0].steps {
        let masks = StepMasks {
            policy: step.policy_codes.clone(),
            human: None,
        };
        let out = net.evaluate(&step.obs, &masks, None).unwrap();
        step.target_policy = step.policy_codes.iter().map(|&c| out.policy[c as usize]).collect();
        step.reward_to_go = out.value;
        step.stored_goal_pred = out.goal_pred.clone();
    }
    let w = LossWeights {
        policy: 1.0,
        value: 1.0,
        reward: 0.0,
        prev_reward: 0.0,
        action: 0.0,
        prev_reward_final: None,
    };
    let l = loss(&net, &batch, &w).unwrap();
    assert!(l.total.abs() < 1e-12, "{}", l.total);
    // stored prediction equal to the current one: the KL term vanishes
    let l = loss(&net, &batch, &LossWeights::only(LossTerm::PrevReward, 1.0)).unwrap();
    assert!(l.total.abs() < 1e-12);
}

#[test]
fn uniform_two_type_goal_prediction_costs_ln2() {
    // a 1×1×1 grid is not a legal environment but is a legal network input
    let mut cfg = NetConfig::new(Dims::new(1, 1, 1), 2);
    cfg.channels = 4;
    cfg.kernel = 1;
    cfg.num_residual_blocks = 1;
    let mut net = Network::new(cfg, 0).unwrap();
    // zero goal-head output weights give logits (0, 0), i.e. (0.5, 0.5)
    let w2 = net.params.index_of("goal.w2").unwrap();
    net.params.get_mut(w2).fill(0.0);
    let spec = net.obs_spec();
    let obs = ObsTensor {
        cells: 1,
        channels: spec.channels(),
        data: vec![0.3; spec.channels()],
    };
    let step = TrainStep {
        obs,
        policy_codes: vec![0],
        target_policy: vec![],
        reward_to_go: 0.0,
        goal: Some(vec![1]),
        human_codes: vec![],
        human_action: None,
        stored_goal_pred: None,
    };
    let batch = TrainBatch {
        fragments: vec![Fragment {
            steps: vec![step],
            initial_carry: None,
        }],
    };
    let l = loss(&net, &batch, &LossWeights::only(LossTerm::Reward, 1.0)).unwrap();
    assert!((l.total - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn pointwise_network_is_cell_permutation_equivariant() {
    let mut cfg = NetConfig::new(Dims::new(4, 2, 3), 3);
    cfg.kernel = 1;
    cfg.channels = 5;
    let net = Network::new(cfg.clone(), 8).unwrap();
    let mut s = WorldState::empty(cfg.dims, &[Vec3::new(0, 0, 0), Vec3::new(3, 1, 2)]);
    s.set_block(Vec3::new(1, 0, 1), mbag::world::BlockType(2));
    s.set_block(Vec3::new(2, 1, 0), mbag::world::BlockType(1));
    let obs = encode_observation(&s, Player::Assistant, None, &net.obs_spec()).unwrap();
    let (i, j) = (cfg.dims.index(Vec3::new(1, 0, 1)), cfg.dims.index(Vec3::new(3, 0, 0)));
    let mut swapped = obs.clone();
    let ch = obs.channels;
    for k in 0..ch {
        swapped.data.swap(i * ch + k, j * ch + k);
    }
    let a = net.forward_raw(&obs, None).unwrap();
    let b = net.forward_raw(&swapped, None).unwrap();
    let ga = a.goal_logits.unwrap();
    let gb = b.goal_logits.unwrap();
    for k in 0..3 {
        assert!((ga[i * 3 + k] - gb[j * 3 + k]).abs() < 1e-12);
        assert!((ga[j * 3 + k] - gb[i * 3 + k]).abs() < 1e-12);
    }
    assert!((a.value - b.value).abs() < 1e-12);
}

#[test]
fn adam_overfits_a_small_batch() {
    let mut cfg = tiny_config(false);
    cfg.channels = 8;
    cfg.head_hidden = 16;
    let (mut net, batch) = random_problem(21, cfg, 10, 1);
    // the stored-prediction term conflicts with the goal likelihood on
    // random data, so it is left out of the overfit objective
    let w = LossWeights {
        prev_reward: 0.0,
        ..all_weights()
    };
    let start = loss(&net, &batch, &w).unwrap().total;
    let mut opt = Adam::new(
        AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        },
        &net.params,
    );
    for _ in 0..200 {
        let (_, g) = loss_and_grads(&net, &batch, &w, None).unwrap();
        opt.step(&mut net.params, &g).unwrap();
    }
    let end = loss(&net, &batch, &w).unwrap();
    assert!(end.total <= 0.1 * start, "{start} -> {end:?}");
}
