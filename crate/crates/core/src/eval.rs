//! Evaluation: per-pair episode metrics with 90% confidence intervals,
//! assistant×human cross-evaluation against the human-alone baseline, and
//! the JSON report and aligned text table.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goals::{GoalSet, SplitTag};
use crate::humans::HumanModel;
use crate::mcts::MctsConfig;
use crate::net::Network;
use crate::training::{run_episode, AssistantAgent, AssistantMode, NetAssistant, NoAssistant};
use crate::world::{goal_metrics, Env, EnvConfig};

/// Two-sided 90% normal quantile.
pub const Z90: f64 = 1.6448536269514722;

/// Mean with a 90% CI half-width; `ci90` is `None` for a single episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub ci90: Option<f64>,
}

impl Stat {
    /// Normal-approximation interval from the unbiased sample variance.
    pub fn from_values(values: &[f64]) -> Result<Stat> {
        let n = values.len();
        if n == 0 {
            return Err(Error::Empty("no episodes to summarize".into()));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci90 = (n > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            Z90 * (var / n as f64).sqrt()
        });
        Ok(Stat { mean, ci90 })
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.ci90.unwrap_or(0.0)
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci90.unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub goal_id: usize,
    pub seed: u64,
    pub steps: usize,
    pub overall_goal_pct: f64,
    pub human_actions: u32,
    pub assistant_goal_pct: Option<f64>,
}

/// One assistant/human cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub assistant: String,
    pub human: String,
    pub n: usize,
    pub overall_goal_pct: Stat,
    pub human_actions: Stat,
    /// Absent for the human-alone row.
    pub assistant_goal_pct: Option<Stat>,
    #[serde(skip)]
    pub episodes: Vec<EpisodeResult>,
}

impl PairReport {
    pub fn from_episodes(assistant: &str, human: &str, alone: bool, episodes: Vec<EpisodeResult>) -> Result<Self> {
        let col = |f: &dyn Fn(&EpisodeResult) -> f64| -> Result<Stat> {
            Stat::from_values(&episodes.iter().map(f).collect::<Vec<_>>())
        };
        Ok(PairReport {
            assistant: assistant.into(),
            human: human.into(),
            n: episodes.len(),
            overall_goal_pct: col(&|e| e.overall_goal_pct)?,
            human_actions: col(&|e| e.human_actions as f64)?,
            assistant_goal_pct: if alone {
                None
            } else {
                Some(col(&|e| e.assistant_goal_pct.unwrap_or(0.0))?)
            },
            episodes,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// An assistant under evaluation.
#[derive(Clone, Debug)]
pub enum AssistantSpec {
    None,
    Net {
        name: String,
        net: Arc<Network>,
        mode: AssistantMode,
    },
}

impl AssistantSpec {
    pub fn name(&self) -> String {
        match self {
            AssistantSpec::None => "none".into(),
            AssistantSpec::Net { name, .. } => name.clone(),
        }
    }

    fn check(&self, env: &EnvConfig) -> Result<()> {
        if let AssistantSpec::Net { net, mode, .. } = self {
            if net.config.dims != env.dims || net.config.num_block_types != env.num_block_types {
                return Err(Error::Checkpoint(format!(
                    "checkpoint expects {} with {} block types, environment is {} with {}",
                    net.config.dims, net.config.num_block_types, env.dims, env.num_block_types
                )));
            }
            match mode {
                AssistantMode::Mcts { config } => config.validate()?,
                AssistantMode::PolicyHead { temperature } => {
                    if !(*temperature > 0.0 && temperature.is_finite()) {
                        return Err(Error::Config("policy temperature must be positive".into()));
                    }
                }
            }
        }
        Ok(())
    }

    fn agent(&self) -> Box<dyn AssistantAgent> {
        match self {
            AssistantSpec::None => Box::new(NoAssistant),
            AssistantSpec::Net { name, net, mode } => Box::new(NetAssistant::new(name.clone(), net.clone(), mode.clone())),
        }
    }
}

/// Test-time search settings: `num_simulations` simulations and no root
/// noise.
pub fn eval_mcts(num_simulations: u32) -> MctsConfig {
    MctsConfig {
        num_simulations,
        dirichlet_epsilon: 0.0,
        ..MctsConfig::default()
    }
}

/// Episode `i` of an evaluation at `seed`: cycles through the goals and
/// draws from its own random stream, so results do not depend on which
/// thread runs it.
fn episode_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

fn run_one(
    env: &Env,
    assistant: &mut dyn AssistantAgent,
    alone: bool,
    human: &dyn HumanModel,
    goals: &GoalSet,
    seed: u64,
    i: usize,
) -> Result<EpisodeResult> {
    let goal_id = i % goals.len();
    let mut rng = episode_rng(seed, i);
    let ep_seed = rand::Rng::random(&mut rng);
    let (steps, tr) = run_episode(env, &goals.goals[goal_id], ep_seed, human, assistant, &mut rng)?;
    let m = goal_metrics(&tr)?;
    Ok(EpisodeResult {
        goal_id,
        seed: ep_seed,
        steps: steps.len(),
        overall_goal_pct: m.overall_goal_pct,
        human_actions: m.human_actions,
        assistant_goal_pct: (!alone).then_some(m.assistant_goal_pct),
    })
}

/// Runs `n_episodes` episodes of one assistant with one human model.
/// Episodes are spread over the available cores.
pub fn evaluate_pair(
    env_config: &EnvConfig,
    assistant: &AssistantSpec,
    human: &dyn HumanModel,
    goals: &GoalSet,
    n_episodes: usize,
    seed: u64,
) -> Result<PairReport> {
    if n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    if goals.is_empty() {
        return Err(Error::Empty("goal set is empty".into()));
    }
    if goals.dims() != env_config.dims {
        return Err(Error::DimensionMismatch {
            expected: env_config.dims,
            actual: goals.dims(),
        });
    }
    assistant.check(env_config)?;
    let env = Env::new(env_config.clone())?;
    let alone = matches!(assistant, AssistantSpec::None);
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(n_episodes);
    let mut results: Vec<Option<Result<EpisodeResult>>> = (0..n_episodes).map(|_| None).collect();
    if threads <= 1 {
        let mut agent = assistant.agent();
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_one(&env, agent.as_mut(), alone, human, goals, seed, i));
        }
    } else {
        let per = n_episodes.div_ceil(threads);
        std::thread::scope(|scope| {
            for (t, chunk) in results.chunks_mut(per).enumerate() {
                let env = &env;
                scope.spawn(move || {
                    let mut agent = assistant.agent();
                    for (k, slot) in chunk.iter_mut().enumerate() {
                        let i = t * per + k;
                        *slot = Some(run_one(env, agent.as_mut(), alone, human, goals, seed, i));
                    }
                });
            }
        });
    }
    let episodes = results
        .into_iter()
        .map(|r| r.expect("every episode ran"))
        .collect::<Result<Vec<_>>>()?;
    PairReport::from_episodes(&assistant.name(), human.name(), alone, episodes)
}

/// Warning text when headline numbers are computed off the test split.
pub fn split_warning(goals: &GoalSet) -> Option<String> {
    (goals.tag != SplitTag::Test).then(|| {
        format!(
            "evaluating on goals tagged {:?}; headline numbers should use the test split",
            goals.tag
        )
    })
}

/// Single-pair report with the split warning attached.
pub fn evaluate(
    env_config: &EnvConfig,
    assistant: &AssistantSpec,
    human: &dyn HumanModel,
    goals: &GoalSet,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let pair = evaluate_pair(env_config, assistant, human, goals, n_episodes, seed)?;
    Ok(EvalReport {
        pairs: vec![pair],
        warnings: split_warning(goals).into_iter().collect(),
    })
}

/// Differences from the human-alone baseline of the same human model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub assistant: String,
    pub human: String,
    pub overall_goal_pct: f64,
    pub human_actions: f64,
    /// The baseline builds nothing for the assistant, so this is the
    /// assistant's own share.
    pub assistant_goal_pct: f64,
}

impl Delta {
    pub fn between(cell: &PairReport, baseline: &PairReport) -> Delta {
        let a = |r: &PairReport| r.assistant_goal_pct.map_or(0.0, |s| s.mean);
        Delta {
            assistant: cell.assistant.clone(),
            human: cell.human.clone(),
            overall_goal_pct: cell.overall_goal_pct.mean - baseline.overall_goal_pct.mean,
            human_actions: cell.human_actions.mean - baseline.human_actions.mean,
            assistant_goal_pct: a(cell) - a(baseline),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalReport {
    /// One human-alone row per human model.
    pub baseline: Vec<PairReport>,
    /// Row-major over assistants, then humans.
    pub pairs: Vec<PairReport>,
    pub deltas: Vec<Delta>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl CrossEvalReport {
    pub fn cell(&self, assistant: usize, human: usize) -> &PairReport {
        &self.pairs[assistant * self.baseline.len() + human]
    }
}

/// Evaluates every assistant with every human model, plus each human alone.
pub fn cross_eval(
    env_config: &EnvConfig,
    assistants: &[AssistantSpec],
    humans: &[&dyn HumanModel],
    goals: &GoalSet,
    n_per_cell: usize,
    seed: u64,
) -> Result<CrossEvalReport> {
    if assistants.is_empty() || humans.is_empty() {
        return Err(Error::Config("cross evaluation needs at least one assistant and one human".into()));
    }
    let mut baseline = Vec::with_capacity(humans.len());
    for h in humans {
        baseline.push(evaluate_pair(env_config, &AssistantSpec::None, *h, goals, n_per_cell, seed)?);
    }
    let mut pairs = Vec::with_capacity(assistants.len() * humans.len());
    let mut deltas = Vec::with_capacity(pairs.capacity());
    for a in assistants {
        for (hi, h) in humans.iter().enumerate() {
            let cell = if matches!(a, AssistantSpec::None) {
                baseline[hi].clone()
            } else {
                evaluate_pair(env_config, a, *h, goals, n_per_cell, seed)?
            };
            deltas.push(Delta::between(&cell, &baseline[hi]));
            pairs.push(cell);
        }
    }
    Ok(CrossEvalReport {
        baseline,
        pairs,
        deltas,
        warnings: split_warning(goals).into_iter().collect(),
    })
}

fn cell_text(s: Option<&Stat>, digits: usize) -> String {
    match s {
        None => "---".into(),
        Some(Stat { mean, ci90: None }) => format!("{mean:.digits$} ± n/a"),
        Some(Stat { mean, ci90: Some(c) }) => format!("{mean:.digits$} ± {c:.digits$}"),
    }
}

/// Aligned text table: assistant, human, overall goal %, human actions,
/// assistant goal %, episodes.
pub fn format_table(pairs: &[PairReport]) -> String {
    let header = ["Assistant", "Human", "Overall goal %", "Human actions", "Assistant goal %", "n"];
    let rows: Vec<[String; 6]> = pairs
        .iter()
        .map(|p| {
            [
                p.assistant.clone(),
                p.human.clone(),
                cell_text(Some(&p.overall_goal_pct), 1),
                cell_text(Some(&p.human_actions), 1),
                cell_text(p.assistant_goal_pct.as_ref(), 1),
                p.n.to_string(),
            ]
        })
        .collect();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in &rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(i, (c, w))| {
                let pad = w - c.chars().count();
                if i < 2 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    line(rule.iter().map(|s| s.as_str()).collect(), &mut out);
    for r in &rows {
        line(r.iter().map(|s| s.as_str()).collect(), &mut out);
    }
    out
}

/// Text table of the deltas of a cross evaluation.
pub fn format_deltas(deltas: &[Delta]) -> String {
    let mut out = String::from("Assistant  Human  Δ goal %  Δ human actions  assistant goal %\n");
    for d in deltas {
        let _ = writeln!(
            out,
            "{}  {}  {:+.1}  {:+.1}  {:.1}",
            d.assistant, d.human, d.overall_goal_pct, d.human_actions, d.assistant_goal_pct
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDump {
    pub assistant: String,
    pub human: String,
    pub episodes: Vec<EpisodeResult>,
}

/// Per-episode values behind each pair, for independent recomputation.
pub fn episode_dump(pairs: &[PairReport]) -> Vec<EpisodeDump> {
    pairs
        .iter()
        .map(|p| EpisodeDump {
            assistant: p.assistant.clone(),
            human: p.human.clone(),
            episodes: p.episodes.clone(),
        })
        .collect()
}
