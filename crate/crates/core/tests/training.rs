mod common;

use std::sync::Arc;

use mbag::goals::{generate_set, GoalSet};
use mbag::humans::{
    format_corpus, parse_corpus, policy_distribution, BcConfig, BcDataset, BoltzmannConfig, BoltzmannHuman,
};
use mbag::mcts::MctsConfig;
use mbag::net::{LossWeights, NetConfig, Network};
use mbag::training::*;
use mbag::world::{Dims, EnvConfig, Player};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_env() -> EnvConfig {
    EnvConfig {
        dims: Dims::new(6, 4, 6),
        num_block_types: 3,
        horizon: 24,
        ..EnvConfig::default()
    }
}

fn small_goals() -> GoalSet {
    generate_set(3, 6, Dims::new(6, 4, 6), 3).unwrap()
}

fn small_trainer() -> TrainerConfig {
    let mut c = TrainerConfig::desk(small_env());
    c.net.channels = 4;
    c.net.head_hidden = 4;
    c.iterations = 2;
    c.envs_parallel = 2;
    c.fragment_length = 6;
    c.buffer_capacity = 64;
    c.steps_per_iteration = 12;
    c.sgd_batch_size = 6;
    c.mcts = MctsConfig {
        num_simulations: 4,
        ..MctsConfig::default()
    };
    c
}

fn human() -> BoltzmannHuman {
    BoltzmannHuman::new(BoltzmannConfig::default())
}

#[test]
fn assistancezero_is_deterministic_under_a_seed() {
    let goals = small_goals();
    let cfg = small_trainer();
    let a = assistancezero_train(&goals, &human(), &cfg, None).unwrap();
    let b = assistancezero_train(&goals, &human(), &cfg, None).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(a.meta.iteration, 2);
    assert!(a.meta.history.iter().all(|h| h.loss.total.is_finite()));
    let mut other = cfg.clone();
    other.seed = 1;
    let c = assistancezero_train(&goals, &human(), &other, None).unwrap();
    assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
}

#[test]
fn zero_iterations_returns_the_initial_network() {
    let goals = small_goals();
    let mut cfg = small_trainer();
    cfg.iterations = 0;
    let ck = assistancezero_train(&goals, &human(), &cfg, None).unwrap();
    assert_eq!(ck.meta.iteration, 0);
    assert!(ck.meta.history.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fresh = Network::new(cfg.net.clone(), rand::Rng::random(&mut rng)).unwrap();
    assert_eq!(ck.net.params, fresh.params);
}

#[test]
fn checkpoint_round_trips_through_disk() {
    let goals = small_goals();
    let mut cfg = small_trainer();
    cfg.iterations = 1;
    let ck = assistancezero_train(&goals, &human(), &cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("az.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
}

#[test]
fn goal_probe_tracks_heldout_nll() {
    let goals = small_goals();
    let env = small_env();
    let (corpus, _) = generate_rollouts(&env, &goals, &human(), &mut NoAssistant, 2, true, 5).unwrap();
    let probe = GoalProbe::from_corpus(&corpus, &goals).unwrap();
    let cfg = small_trainer();
    let ck = assistancezero_train(&goals, &human(), &cfg, Some(&probe)).unwrap();
    for h in &ck.meta.history {
        let nll = h.heldout_goal_nll.unwrap();
        assert!(nll.is_finite() && nll > 0.0);
    }
}

#[test]
fn alphazero_single_and_ppo_run_deterministically() {
    let goals = small_goals();
    let cfg = small_trainer();
    let a = alphazero_single_train(&goals, &cfg).unwrap();
    let b = alphazero_single_train(&goals, &cfg).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert!(!a.net.has_goal_head() && !a.net.has_human_head());

    let ppo = PpoConfig::default();
    let p = ppo_train(&goals, &human(), &cfg, &ppo).unwrap();
    let q = ppo_train(&goals, &human(), &cfg, &ppo).unwrap();
    assert_eq!(p.to_bytes().unwrap(), q.to_bytes().unwrap());
    assert_eq!(p.meta.kind, "ppo");
}

#[test]
fn invalid_trainer_configs_are_rejected() {
    let goals = small_goals();
    let mut cfg = small_trainer();
    cfg.lr = 0.0;
    assert!(matches!(
        assistancezero_train(&goals, &human(), &cfg, None),
        Err(mbag::Error::Config(_))
    ));
    let mut cfg = small_trainer();
    cfg.net.num_block_types = 4;
    assert!(alphazero_single_train(&goals, &cfg).is_err());
}

#[test]
fn two_step_mdp_advantages_by_hand() {
    // r = (1, 2), V = (0.5, 1.5), terminal after step 2, gamma 0.9, lambda 0.8
    let a = gae(&[1.0, 2.0], &[0.5, 1.5], &[false, true], 9.0, 0.9, 0.8);
    let d1 = 2.0 - 1.5;
    let d0 = 1.0 + 0.9 * 1.5 - 0.5;
    assert!((a[1] - d1).abs() < 1e-12);
    assert!((a[0] - (d0 + 0.9 * 0.8 * d1)).abs() < 1e-12);
    // a done flag mid-fragment stops propagation
    let b = gae(&[1.0, 2.0], &[0.5, 1.5], &[true, false], 9.0, 0.9, 0.8);
    assert!((b[0] - 0.5).abs() < 1e-12);
}

#[test]
fn temperature_point_three_sharpens_a_unit_logit_gap() {
    let mut cfg = NetConfig::new(Dims::new(2, 2, 2), 2);
    cfg.goal_head = false;
    cfg.human_head = false;
    let net = Network::new(cfg, 0).unwrap();
    let space = net.action_space();
    let k = mbag::net::dist::head_channels(2);
    let mut logits = vec![0.0; 8 * k];
    logits[7] = 1.0;
    let codes = [space.break_code(0) as u32, space.break_code(1) as u32];
    let p = policy_distribution(&logits, &net, &codes, 0.3);
    assert!((p[0] - 0.966).abs() < 5e-4 && (p[1] - 0.034).abs() < 5e-4, "{p:?}");
    let q = policy_distribution(&logits, &net, &codes, 1.0);
    assert!((q[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
}

#[test]
fn reinitialising_the_action_head_leaves_other_parameters_bit_equal() {
    let goals = small_goals();
    let env = small_env();
    let (human_corpus, _) = generate_rollouts(&env, &goals, &human(), &mut NoAssistant, 2, true, 1).unwrap();
    let mut net_cfg = NetConfig::new(env.dims, env.num_block_types);
    net_cfg.channels = 4;
    net_cfg.head_hidden = 4;
    net_cfg.num_residual_blocks = 1;
    net_cfg.goal_head = false;
    net_cfg.human_head = false;
    let bc = BcConfig {
        epochs: 1,
        ..BcConfig::default()
    };
    let pre = pretrain(&human_corpus, &goals, net_cfg, &bc).unwrap();
    let mut re = pre.net.clone();
    re.reinit_policy_head(7);
    let head = re.policy_head_param_ids();
    let mut changed = 0;
    for i in 0..re.params.len() {
        if head.contains(&i) {
            changed += (re.params.get(i) != pre.net.params.get(i)) as usize;
        } else {
            assert_eq!(re.params.get(i), pre.net.params.get(i), "param {i}");
        }
    }
    assert!(changed > 0);

    let (demos, _) = generate_rollouts(
        &env,
        &goals,
        &human(),
        &mut ScriptedAssistant::new(BoltzmannConfig::default()),
        2,
        false,
        2,
    )
    .unwrap();
    let sft_cfg = SftConfig {
        bc: BcConfig {
            epochs: 0,
            ..BcConfig::default()
        },
        init_action_head: false,
        temperature: 0.3,
    };
    let same = sft(&pre, &demos, &goals, &sft_cfg).unwrap();
    assert_eq!(same.net.params, pre.net.params);
    let fresh = sft(
        &pre,
        &demos,
        &goals,
        &SftConfig {
            init_action_head: true,
            ..sft_cfg
        },
    )
    .unwrap();
    assert_ne!(fresh.net.params, pre.net.params);
}

#[test]
fn corpus_round_trips_byte_identically() {
    let goals = small_goals();
    let env = small_env();
    let mut assistant = ScriptedAssistant::new(BoltzmannConfig::default());
    let (corpus, trajs) = generate_rollouts(&env, &goals, &human(), &mut assistant, 3, false, 9).unwrap();
    assert_eq!(trajs.len(), 3);
    let text = format_corpus(&corpus);
    let back = parse_corpus(&text).unwrap();
    assert_eq!(format_corpus(&back), text);
    assert_eq!(back, corpus);
}

#[test]
fn stripped_corpus_yields_zero_goal_channels() {
    let goals = small_goals();
    let env = small_env();
    let (corpus, _) = generate_rollouts(&env, &goals, &human(), &mut NoAssistant, 2, true, 4).unwrap();
    assert!(!corpus.goal_visible);
    let data = BcDataset::from_corpus(&corpus, &goals, Player::Human).unwrap();
    let mut cfg = NetConfig::new(env.dims, env.num_block_types);
    cfg.goal_head = false;
    cfg.human_head = false;
    let net = Network::new(cfg, 0).unwrap();
    let spec = net.obs_spec();
    let frag = data.fragment(&net, 0, 0, 5, None).unwrap();
    assert!(frag.steps.iter().all(|s| s.obs.goal_channels_zero(&spec)));

    let (visible, _) = generate_rollouts(&env, &goals, &human(), &mut NoAssistant, 1, false, 4).unwrap();
    let data = BcDataset::from_corpus(&visible, &goals, Player::Human).unwrap();
    let frag = data.fragment(&net, 0, 0, 5, None).unwrap();
    assert!(frag.steps.iter().all(|s| !s.obs.goal_channels_zero(&spec)));
}

#[test]
fn net_assistant_never_needs_the_goal() {
    let goals = small_goals();
    let env = mbag::world::Env::new(small_env()).unwrap();
    let cfg = small_trainer();
    let net = Arc::new(Network::new(cfg.net.clone(), 0).unwrap());
    for mode in [
        AssistantMode::PolicyHead { temperature: 1.0 },
        AssistantMode::Mcts { config: cfg.mcts.clone() },
    ] {
        let mut a = NetAssistant::new("az", net.clone(), mode);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (steps, tr) = run_episode(&env, &goals.goals[0], 0, &human(), &mut a, &mut rng).unwrap();
        assert_eq!(steps.len(), tr.steps.len());
        let s0 = env.new_episode(&goals.goals[0], 0).unwrap();
        a.reset();
        let d = a.decide(&env, &s0, &mut rng).unwrap();
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(d.belief.is_some());
    }
}

#[derive(Debug)]
struct Sized(usize);

impl StepCount for Sized {
    fn num_steps(&self) -> usize {
        self.0
    }
}

proptest! {
    #[test]
    fn replay_never_splits_fragments(
        cap in 8usize..64,
        lens in prop::collection::vec(1usize..8, 1..40),
        want in 1usize..50,
        seed in any::<u64>(),
    ) {
        let mut b = ReplayBuffer::new(cap);
        let mut pushed = Vec::new();
        for (i, &l) in lens.iter().enumerate() {
            b.push(Sized(l)).unwrap();
            pushed.push((i, l));
            prop_assert!(b.stored_steps() <= cap);
        }
        // contents are the newest fragments, whole and in order
        let kept: Vec<usize> = b.iter().map(|f| f.0).collect();
        let tail: Vec<usize> = lens[lens.len() - kept.len()..].to_vec();
        prop_assert_eq!(&kept, &tail);
        prop_assert_eq!(b.stored_steps(), kept.iter().sum::<usize>());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = b.sample(want, &mut rng);
        let total: usize = s.iter().map(|f| f.0).sum();
        prop_assert!(total >= want);
        prop_assert!(total - s.last().unwrap().0 < want);
    }
}

#[test]
fn loss_weights_anneal_the_stored_prediction_term() {
    let w = LossWeights {
        prev_reward: 0.0,
        prev_reward_final: Some(1.0),
        ..LossWeights::default()
    };
    assert_eq!(w.at(0.0).prev_reward, 0.0);
    assert!((w.at(0.5).prev_reward - 0.5).abs() < 1e-12);
    assert_eq!(w.at(1.0).prev_reward, 1.0);
}

#[test]
fn ppo_gradients_match_finite_differences() {
    let env = mbag::world::Env::new(small_env()).unwrap();
    let goals = small_goals();
    let mut cfg = small_trainer().net;
    cfg.goal_head = false;
    cfg.human_head = false;
    cfg.use_recurrent = true;
    let net = Network::new(cfg, 3).unwrap();
    let goal = Arc::new(goals.goals[0].clone());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s = env.new_episode(&goal, 1).unwrap();
    let mut steps = Vec::new();
    let space = env.action_space();
    for t in 0..4 {
        let mut codes = Vec::new();
        env.valid_codes(&s, Player::Assistant, &mut codes);
        // prefer a placement so the block loss is active
        let a = *codes.iter().rev().nth(t).unwrap();
        let human = mbag::humans::boltzmann_act(&env, &s, &goal, &BoltzmannConfig::default(), Player::Human, &mut rng);
        let step = env
            .apply(&s, human.action, space.decode(a as usize).unwrap(), &goal)
            .unwrap();
        steps.push(PpoStep {
            state: s.clone(),
            goal: goal.clone(),
            action: a,
            log_prob: -1.5 + 0.3 * t as f64,
            value: 0.0,
            reward: 0.0,
            done: false,
            advantage: [1.0, -0.7, 0.4, -1.2][t],
            ret: [0.5, -0.2, 1.0, 0.1][t],
        });
        s = step.next_state;
    }
    let frag = PpoFragment {
        steps,
        initial_carry: Some(vec![0.1; net.carry_len()]),
    };
    // a wide clip keeps every ratio on the unclipped branch
    let ppo = PpoConfig {
        clip: 100.0,
        ..PpoConfig::default()
    };
    let (_, grads) = ppo_loss_and_grads(&env, &net, &[&frag], &ppo, 0.05, 0.7, None).unwrap();
    let loss_at = |n: &Network| ppo_loss_and_grads(&env, n, &[&frag], &ppo, 0.05, 0.7, None).unwrap().0.total;
    let mut worst: f64 = 0.0;
    let mut pick = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let i = rand::Rng::random_range(&mut pick, 0..net.params.len());
        let j = rand::Rng::random_range(&mut pick, 0..net.params.get(i).len());
        let h = 1e-5;
        let mut p = net.clone();
        p.params.get_mut(i)[j] += h;
        let mut m = net.clone();
        m.params.get_mut(i)[j] -= h;
        let num = (loss_at(&p) - loss_at(&m)) / (2.0 * h);
        let ana = grads.get(i)[j];
        worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(1e-4));
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}
