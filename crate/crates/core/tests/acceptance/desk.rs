//! Desk-scale training criteria: AssistanceZero against human-alone, the
//! PPO and SFT baselines, the piKL ordering and test-time search parity.
//!
//! Protocol: 80 procedural houses on a 6×6×6 grid with 4 block types, split
//! 64 train / 16 test, a Boltzmann human with β = 3, 200 test episodes per
//! evaluation. Trained artifacts are built once and shared.

use std::sync::{Arc, OnceLock};

use mbag::eval::{eval_mcts, evaluate_pair, AssistantSpec, PairReport};
use mbag::goals::{generate_set, split, GoalSet};
use mbag::humans::{
    bc_train, pikl_act, policy_distribution, BcConfig, BcDataset, BoltzmannConfig, BoltzmannHuman, HumanModel,
    Memory, NetHuman, PiklConfig, PiklHuman,
};
use mbag::net::{encode_observation, NetConfig, Network};
use mbag::training::{
    assistancezero_train, generate_rollouts, mixed_boltzmann_rollouts, ppo_train, pretrain, sft, AssistantMode,
    GoalProbe, NoAssistant, PpoConfig, ScriptedAssistant, SftConfig, TrainerConfig,
};
use mbag::world::{Dims, Env, EnvConfig, Player, WorldState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

const EPISODES: usize = 200;
const ITERATIONS: usize = 300;
const HORIZON: u32 = 100;
const EVAL_SEED: u64 = 1;
/// One-sided 95% normal quantile.
const Z95: f64 = 1.6448536269514722;

struct Desk {
    env: EnvConfig,
    train: GoalSet,
    test: GoalSet,
    human: BoltzmannHuman,
    alone: PairReport,
    az_first_nll: f64,
    az_last_nll: f64,
    az_mcts: PairReport,
    az_head: PairReport,
}

fn trainer(env: &EnvConfig) -> TrainerConfig {
    let mut cfg = TrainerConfig::desk(env.clone());
    cfg.iterations = ITERATIONS;
    cfg.net.channels = 16;
    cfg.net.head_hidden = 32;
    cfg
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let env = EnvConfig {
            horizon: HORIZON,
            ..EnvConfig::default()
        };
        let set = generate_set(0, 80, Dims::new(6, 6, 6), 4).expect("goal set");
        let (train, test) = split(&set, 0.2, 0).expect("split");
        let human = BoltzmannHuman::new(BoltzmannConfig::default());
        let alone = evaluate_pair(&env, &AssistantSpec::None, &human, &test, EPISODES, EVAL_SEED).expect("alone");
        let (probe_corpus, _) =
            generate_rollouts(&env, &test, &human, &mut NoAssistant, 16, true, 5).expect("probe rollouts");
        let probe = GoalProbe::from_corpus(&probe_corpus, &test).expect("probe");
        let ck = assistancezero_train(&train, &human, &trainer(&env), Some(&probe)).expect("assistancezero");
        let nll = |i: usize| ck.meta.history[i].heldout_goal_nll.expect("probe nll");
        let az_first_nll = nll(0);
        let az_last_nll = nll(ck.meta.history.len() - 1);
        let net = Arc::new(ck.net);
        let az_mcts = evaluate_pair(
            &env,
            &AssistantSpec::Net {
                name: "assistancezero:mcts(20)".into(),
                net: net.clone(),
                mode: AssistantMode::Mcts { config: eval_mcts(20) },
            },
            &human,
            &test,
            EPISODES,
            EVAL_SEED,
        )
        .expect("mcts eval");
        let az_head = evaluate_pair(
            &env,
            &AssistantSpec::Net {
                name: "assistancezero:head".into(),
                net,
                mode: AssistantMode::PolicyHead { temperature: 1.0 },
            },
            &human,
            &test,
            EPISODES,
            EVAL_SEED,
        )
        .expect("head eval");
        Desk {
            env,
            train,
            test,
            human,
            alone,
            az_first_nll,
            az_last_nll,
            az_mcts,
            az_head,
        }
    })
}

fn fmt(r: &PairReport) -> String {
    let asst = r
        .assistant_goal_pct
        .map(|s| format!(", assistant {:.1}±{:.1}", s.mean, s.ci90.unwrap_or(0.0)))
        .unwrap_or_default();
    format!(
        "goal {:.1}±{:.1}, human actions {:.1}{asst}",
        r.overall_goal_pct.mean,
        r.overall_goal_pct.ci90.unwrap_or(0.0),
        r.human_actions.mean
    )
}

pub fn assistance_zero() -> Verdict {
    let d = desk();
    let goal_gain = d.az_mcts.overall_goal_pct.mean - d.alone.overall_goal_pct.mean;
    let action_ratio = d.az_mcts.human_actions.mean / d.alone.human_actions.mean;
    let asst = d.az_mcts.assistant_goal_pct.expect("assistant share").mean;
    let nll_drop = 1.0 - d.az_last_nll / d.az_first_nll;
    let checks = [
        ("a", goal_gain >= 2.0),
        ("b", action_ratio <= 0.9),
        ("c", asst >= 10.0),
        ("d", nll_drop >= 0.3),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Verdict::new(
        failed.is_empty(),
        format!(
            "alone [{}]; mcts(20) [{}]; (a) gain {goal_gain:+.1} (b) ratio {action_ratio:.3} (c) assistant {asst:.1}% \
             (d) nll {:.1} -> {:.1} ({:.0}% drop); failed {:?}",
            fmt(&d.alone),
            fmt(&d.az_mcts),
            d.az_first_nll,
            d.az_last_nll,
            100.0 * nll_drop,
            failed
        ),
    )
}

pub fn baselines() -> Verdict {
    let d = desk();
    let cfg = trainer(&d.env);
    let ppo = ppo_train(&d.train, &d.human, &cfg, &PpoConfig::default()).expect("ppo");
    let ppo_report = evaluate_pair(
        &d.env,
        &AssistantSpec::Net {
            name: "ppo".into(),
            net: Arc::new(ppo.net),
            mode: AssistantMode::PolicyHead { temperature: 1.0 },
        },
        &d.human,
        &d.test,
        EPISODES,
        EVAL_SEED,
    )
    .expect("ppo eval");

    // pretrain on goal-free human play, then fine-tune on assistant demos
    let (human_corpus, _) =
        generate_rollouts(&d.env, &d.train, &d.human, &mut NoAssistant, 200, true, 11).expect("human corpus");
    let mut net_cfg = cfg.net.clone();
    net_cfg.goal_head = false;
    net_cfg.human_head = false;
    let pre = pretrain(&human_corpus, &d.train, net_cfg, &BcConfig::default()).expect("pretrain");
    let mut scripted = ScriptedAssistant::new(BoltzmannConfig::default());
    let (demos, _) =
        generate_rollouts(&d.env, &d.train, &d.human, &mut scripted, 200, true, 12).expect("demo corpus");
    // best of a small grid (epochs 5/20, lr 1e-4/1e-3, temperature 0.3/1)
    // ranked by assistant goal %
    let mut sft_cfg = SftConfig::default();
    sft_cfg.bc.epochs = 20;
    sft_cfg.bc.lr = 1e-3;
    sft_cfg.temperature = 1.0;
    let tuned = sft(&pre, &demos, &d.train, &sft_cfg).expect("sft");
    let sft_report = evaluate_pair(
        &d.env,
        &AssistantSpec::Net {
            name: "sft".into(),
            net: Arc::new(tuned.net),
            mode: AssistantMode::PolicyHead {
                temperature: sft_cfg.temperature,
            },
        },
        &d.human,
        &d.test,
        EPISODES,
        EVAL_SEED,
    )
    .expect("sft eval");

    let az = d.az_mcts.assistant_goal_pct.expect("assistant share");
    let beats = |r: &PairReport| az.lower() > r.assistant_goal_pct.expect("assistant share").upper();
    let pass = beats(&ppo_report) && beats(&sft_report);
    Verdict::new(
        pass,
        format!(
            "assistant goal %: assistancezero {:.1}±{:.1}; ppo [{}]; sft [{}]",
            az.mean,
            az.ci90.unwrap_or(0.0),
            fmt(&ppo_report),
            fmt(&sft_report)
        ),
    )
}

/// Cross-entropy of the piKL policy measured on its prior,
/// `−Σ π_BC ln π_piKL`, at each held-out decision state: the prior stands in
/// for the data the model is scored on.
fn pikl_prior_cross_entropy(prior: &Network, env: &Env, states: &[(usize, WorldState)], goals: &GoalSet, c: f64) -> Vec<f64> {
    let cfg = PiklConfig::preset(c).expect("preset");
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    states
        .iter()
        .map(|(goal_id, s)| {
            let goal = &goals.goals[*goal_id];
            let obs = encode_observation(s, Player::Human, Some(goal), &prior.obs_spec()).expect("obs");
            let raw = prior.forward_raw(&obs, None).expect("forward");
            let mut codes = Vec::new();
            env.valid_codes(s, Player::Human, &mut codes);
            let p_bc = policy_distribution(&raw.policy_logits, prior, &codes, 1.0);
            let d = pikl_act(prior, env, s, goal, &cfg, &mut Memory::default(), &mut rng).expect("pikl");
            codes
                .iter()
                .zip(&p_bc)
                .map(|(code, q)| -q * d.prob_of(*code).ln())
                .sum()
        })
        .collect()
}

/// One-sided paired z statistic for `mean(a − b) > 0`.
fn paired_z(a: &[f64], b: &[f64]) -> f64 {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
    }
    mean / (var / n).sqrt()
}

pub fn pikl() -> Verdict {
    let d = desk();
    // BC prior on a goal-visible corpus of careful and sloppy builders
    let (corpus, _) =
        mixed_boltzmann_rollouts(&d.env, &d.train, (1.0, 5.0), &mut NoAssistant, 200, false, 31).expect("corpus");
    let data = BcDataset::from_corpus(&corpus, &d.train, Player::Human).expect("dataset");
    let net_cfg = NetConfig {
        goal_head: false,
        human_head: false,
        ..trainer(&d.env).net
    };
    let (prior, _) = bc_train(&data, net_cfg, &BcConfig::default()).expect("bc");

    // held-out decision states from the test goals
    let env = Env::new(d.env.clone()).expect("env");
    let (held, _) =
        mixed_boltzmann_rollouts(&d.env, &d.test, (1.0, 5.0), &mut NoAssistant, 16, false, 32).expect("held-out");
    let mut states = Vec::new();
    for e in 0..held.episodes.len() {
        let (_, s) = held.replay(&env, &d.test, e).expect("replay");
        let goal_id = held.episodes[e].goal_id;
        states.extend(s[..s.len() - 1].iter().step_by(2).map(|s| (goal_id, s.clone())));
    }
    states.truncate(600);
    let ce: Vec<Vec<f64>> = PiklConfig::PRESETS
        .iter()
        .map(|&c| pikl_prior_cross_entropy(&prior, &env, &states, &d.test, c))
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let z_10_30 = paired_z(&ce[0], &ce[1]);
    let z_30_50 = paired_z(&ce[1], &ce[2]);
    let ce_ok = states.len() >= 500 && z_10_30 > Z95 && z_30_50 > Z95;

    let bc_alone = NetHuman::new("bc", prior.clone());
    let pikl_alone = PiklHuman::new(prior, PiklConfig::default());
    let run = |h: &dyn HumanModel| {
        evaluate_pair(&d.env, &AssistantSpec::None, h, &d.test, EPISODES, EVAL_SEED).expect("alone eval")
    };
    let bc_r = run(&bc_alone);
    let pikl_r = run(&pikl_alone);
    let goals = |r: &PairReport| r.episodes.iter().map(|e| e.overall_goal_pct).collect::<Vec<_>>();
    let z_goal = paired_z(&goals(&pikl_r), &goals(&bc_r));
    let goal_ok = z_goal > Z95;
    Verdict::new(
        ce_ok && goal_ok,
        format!(
            "{} states, CE to prior c=10/30/50: {:.3}/{:.3}/{:.3} (z {z_10_30:.1}, {z_30_50:.1}); \
             alone goal %: pikl {:.1} vs bc {:.1} (z {z_goal:.1})",
            states.len(),
            mean(&ce[0]),
            mean(&ce[1]),
            mean(&ce[2]),
            pikl_r.overall_goal_pct.mean,
            bc_r.overall_goal_pct.mean
        ),
    )
}

pub fn parity() -> Verdict {
    let d = desk();
    let gap = d.az_head.overall_goal_pct.mean - d.az_mcts.overall_goal_pct.mean;
    Verdict::new(
        gap.abs() <= 3.0,
        format!("head [{}]; mcts(20) [{}]; gap {gap:+.1}", fmt(&d.az_head), fmt(&d.az_mcts)),
    )
}
