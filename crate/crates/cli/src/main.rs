//! `mbag` command-line entry point: goal generation, training, rollouts,
//! evaluation and the play server.
//!
//! Exit status is 0 on success, 2 on a configuration error (bad flags,
//! invalid or mismatched config, checkpoint or file format errors) and 1 on
//! a runtime failure.
//!
//! Action codes in corpus files, for `B` block types and `N` cells indexed
//! `(y*d + z)*w + x`: `0` no-op, `1..=6` moves `+x -x +y -y +z -z`,
//! `7 + cell` break, `7 + N + cell*B + block` place.

mod spec;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mbag::eval::{cross_eval, episode_dump, evaluate, format_deltas, format_table};
use mbag::goals::{generate_set, load_goals, save_goals, split, GoalSet, SplitTag};
use mbag::humans::{load_corpus, save_corpus, BcConfig, HumanModel};
use mbag::net::NetConfig;
use mbag::training::{
    alphazero_single_train, assistancezero_train, generate_rollouts, ppo_train, pretrain, sft, Checkpoint, GoalProbe,
    NetAssistant, PpoConfig, SftConfig, TrainerConfig,
};
use mbag::world::{Dims, EnvConfig};
use mbag_playd::protocol::DisplayMode;
use mbag_playd::server::AssistantFactory;
use mbag_playd::{AssistantRuntime, Server, ServerConfig, SessionConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::spec::{AssistantArg, HumanArg};

/// Failure classified by exit status.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<mbag::Error> for Failure {
    fn from(e: mbag::Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<mbag_playd::Error> for Failure {
    fn from(e: mbag_playd::Error) -> Self {
        match e {
            mbag_playd::Error::Core(e) => e.into(),
            mbag_playd::Error::Config(m) => Failure::Config(m),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(name = "mbag", version, about = "Grid-building assistance game: training, evaluation and play")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a house goal set, optionally split into train and test files.
    GenGoals(GenGoals),
    /// Train an assistant with AssistanceZero.
    TrainAz(TrainSearch),
    /// Train a goal-aware single-agent AlphaZero human model.
    TrainAlphazero(TrainSearch),
    /// Train a goal-blind PPO assistant.
    TrainPpo(TrainPpo),
    /// Pretrain next-action prediction on a goal-stripped corpus.
    Pretrain(Pretrain),
    /// Fine-tune a pretrained checkpoint on assistant demonstrations.
    Sft(Sft),
    /// Record episodes as a trajectory corpus.
    Rollout(Rollout),
    /// Evaluate one assistant with one human model.
    Eval(Eval),
    /// Evaluate every assistant with every human model.
    CrossEval(CrossEval),
    /// Serve interactive sessions over WebSocket.
    Play(Play),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Unsplit,
}

impl From<SplitArg> for SplitTag {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitTag::Train,
            SplitArg::Test => SplitTag::Test,
            SplitArg::Unsplit => SplitTag::Unsplit,
        }
    }
}

#[derive(Args)]
struct GoalArgs {
    /// Goal file.
    #[arg(long)]
    goals: PathBuf,
    /// Split the goal file belongs to; evaluation warns unless it is `test`.
    #[arg(long, value_enum, default_value = "unsplit")]
    split: SplitArg,
}

impl GoalArgs {
    fn load(&self) -> Result<GoalSet> {
        Ok(load_goals(&self.goals)?.with_tag(self.split.into()))
    }
}

#[derive(Args)]
struct GenGoals {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n: usize,
    /// Grid size as `W,H,D`.
    #[arg(long, default_value = "6,6,6", value_parser = parse_dims)]
    dims: Dims,
    /// Block types including air.
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    /// Write `<out>.train` and `<out>.test` with this test fraction instead
    /// of a single file.
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSearch {
    /// Trainer config (JSON, `TrainerConfig` field names).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    goals: GoalArgs,
    /// Human model paired with the assistant (default: the config's
    /// Boltzmann human).
    #[arg(long)]
    human: Option<String>,
    /// Corpus whose episodes are used to track held-out goal NLL.
    #[arg(long)]
    probe_corpus: Option<PathBuf>,
    /// Goals for the probe corpus (default: `--goals`).
    #[arg(long)]
    probe_goals: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainPpo {
    /// Trainer config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// PPO settings (JSON, `PpoConfig` field names); defaults otherwise.
    #[arg(long)]
    ppo: Option<PathBuf>,
    #[command(flatten)]
    goals: GoalArgs,
    #[arg(long)]
    human: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Config file for `pretrain`.
#[derive(Serialize, Deserialize)]
struct PretrainConfig {
    net: NetConfig,
    bc: BcConfig,
}

#[derive(Args)]
struct Pretrain {
    /// JSON with `net` (`NetConfig`) and `bc` (`BcConfig`).
    #[arg(long)]
    config: PathBuf,
    /// Goal-stripped human corpus.
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    goals: GoalArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Sft {
    /// `SftConfig` JSON.
    #[arg(long)]
    config: PathBuf,
    /// Pretrained checkpoint.
    #[arg(long)]
    init: PathBuf,
    /// Assistant demonstration corpus.
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    goals: GoalArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnvArgs {
    /// Environment config (JSON, `EnvConfig` field names). Without it the
    /// defaults are used with grid size and block types from the goals.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl EnvArgs {
    fn resolve(&self, goals: &GoalSet) -> Result<EnvConfig> {
        let env = match &self.config {
            Some(p) => read_config::<EnvConfig>(p)?,
            None => EnvConfig {
                dims: goals.dims(),
                num_block_types: goals.num_block_types,
                ..EnvConfig::default()
            },
        };
        env.validate()?;
        Ok(env)
    }
}

#[derive(Args)]
struct Rollout {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    goals: GoalArgs,
    /// Human model.
    #[arg(long, default_value = "boltzmann")]
    human: String,
    /// `none`, `scripted[:BETA]` or a checkpoint spec.
    #[arg(long, default_value = "none")]
    assistant: String,
    #[arg(long)]
    episodes: usize,
    /// Record the corpus as goal-free.
    #[arg(long)]
    strip_goal: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    goals: GoalArgs,
    /// `none`, `PATH` (MCTS with 20 simulations), `PATH:mcts:SIMS` or
    /// `PATH:head[:TEMP]`.
    #[arg(long, default_value = "none")]
    assistant: String,
    /// `boltzmann[:BETA]`, `uniform`, `net:PATH[:TEMP]` or
    /// `pikl:PATH[:C_PUCT]`.
    #[arg(long, default_value = "boltzmann")]
    human: String,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON; the text table goes next to it with a `.txt` extension.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-episode results here.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct CrossEval {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    goals: GoalArgs,
    /// Assistant spec; repeat for several.
    #[arg(long = "assistant", required = true)]
    assistants: Vec<String>,
    /// Human spec; repeat for several.
    #[arg(long = "human", required = true)]
    humans: Vec<String>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DisplayArg {
    Full,
    PlaceableOnly,
    Hidden,
}

#[derive(Args)]
struct Play {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    goals: GoalArgs,
    /// `none`, `PATH`, `PATH:mcts:SIMS` or `PATH:head[:TEMP]`.
    #[arg(long, default_value = "none")]
    assistant: String,
    #[arg(long, default_value = "127.0.0.1:8765")]
    addr: String,
    #[arg(long, default_value_t = 250)]
    tick_ms: u64,
    /// Push a belief snapshot every this many ticks (0: on request only).
    #[arg(long, default_value_t = 0)]
    belief_every: u64,
    #[arg(long, value_enum, default_value = "full")]
    display_mode: DisplayArg,
    /// Directory for per-session metrics JSON.
    #[arg(long)]
    metrics_dir: Option<PathBuf>,
    /// Exit after this many sessions.
    #[arg(long)]
    max_sessions: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [w, h, d] => Ok(Dims::new(w, h, d)),
        _ => Err("expected W,H,D".into()),
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn trainer_config(path: &Path, seed: Option<u64>) -> Result<TrainerConfig> {
    let mut cfg: TrainerConfig = read_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn training_human(spec: Option<&str>, cfg: &TrainerConfig) -> Result<Box<dyn HumanModel>> {
    match spec {
        Some(s) => HumanArg::parse(s)?.build(),
        None => Ok(Box::new(mbag::humans::BoltzmannHuman::new(cfg.human))),
    }
}

fn report_checkpoint(ckpt: &Checkpoint, out: &Path) -> Result<()> {
    ckpt.save(out)?;
    let last = ckpt.meta.history.last();
    println!(
        "{}: {} iterations, final loss {}, wrote {}",
        ckpt.meta.kind,
        ckpt.meta.iteration,
        last.map_or("n/a".into(), |l| format!("{:.4}", l.loss.total)),
        out.display()
    );
    Ok(())
}

fn gen_goals(a: GenGoals) -> Result<()> {
    if a.n == 0 {
        return Err(Failure::Config("--n must be at least 1".into()));
    }
    let set = generate_set(a.seed, a.n, a.dims, a.blocks)?;
    match a.test_fraction {
        None => {
            save_goals(&set, &a.out)?;
            println!("wrote {} goals to {}", set.len(), a.out.display());
        }
        Some(f) => {
            let (train, test) = split(&set, f, a.seed)?;
            let (tp, sp) = (with_suffix(&a.out, ".train"), with_suffix(&a.out, ".test"));
            save_goals(&train, &tp)?;
            save_goals(&test, &sp)?;
            println!(
                "wrote {} train goals to {} and {} test goals to {}",
                train.len(),
                tp.display(),
                test.len(),
                sp.display()
            );
        }
    }
    Ok(())
}

fn train_search(a: TrainSearch, assistance: bool) -> Result<()> {
    let cfg = trainer_config(&a.config, a.seed)?;
    let goals = a.goals.load()?;
    let ckpt = if assistance {
        let human = training_human(a.human.as_deref(), &cfg)?;
        let probe = match &a.probe_corpus {
            Some(c) => {
                let corpus = load_corpus(c)?;
                let pg = match &a.probe_goals {
                    Some(p) => load_goals(p)?,
                    None => goals.clone(),
                };
                Some(GoalProbe::from_corpus(&corpus, &pg)?)
            }
            None => None,
        };
        assistancezero_train(&goals, human.as_ref(), &cfg, probe.as_ref())?
    } else {
        if a.human.is_some() || a.probe_corpus.is_some() {
            return Err(Failure::Config(
                "train-alphazero takes no --human or --probe-corpus".into(),
            ));
        }
        alphazero_single_train(&goals, &cfg)?
    };
    report_checkpoint(&ckpt, &a.out)
}

fn train_ppo(a: TrainPpo) -> Result<()> {
    let cfg = trainer_config(&a.config, a.seed)?;
    let ppo = match &a.ppo {
        Some(p) => read_config::<PpoConfig>(p)?,
        None => PpoConfig::default(),
    };
    let goals = a.goals.load()?;
    let human = training_human(a.human.as_deref(), &cfg)?;
    let ckpt = ppo_train(&goals, human.as_ref(), &cfg, &ppo)?;
    report_checkpoint(&ckpt, &a.out)
}

fn run_pretrain(a: Pretrain) -> Result<()> {
    let mut cfg: PretrainConfig = read_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.bc.seed = s;
    }
    let corpus = load_corpus(&a.corpus)?;
    let goals = a.goals.load()?;
    let ckpt = pretrain(&corpus, &goals, cfg.net, &cfg.bc)?;
    report_checkpoint(&ckpt, &a.out)
}

fn run_sft(a: Sft) -> Result<()> {
    let mut cfg: SftConfig = read_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.bc.seed = s;
    }
    let init = Checkpoint::load(&a.init)?;
    let corpus = load_corpus(&a.corpus)?;
    let goals = a.goals.load()?;
    let ckpt = sft(&init, &corpus, &goals, &cfg)?;
    report_checkpoint(&ckpt, &a.out)
}

fn rollout(a: Rollout) -> Result<()> {
    let goals = a.goals.load()?;
    let env = a.env.resolve(&goals)?;
    let human = HumanArg::parse(&a.human)?.build()?;
    let mut assistant = AssistantArg::parse(&a.assistant)?.agent()?;
    let (corpus, _) = generate_rollouts(&env, &goals, human.as_ref(), assistant.as_mut(), a.episodes, a.strip_goal, a.seed)?;
    save_corpus(&corpus, &a.out)?;
    println!(
        "wrote {} episodes ({} steps) to {}",
        corpus.episodes.len(),
        corpus.num_steps(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    if a.episodes == 0 {
        return Err(Failure::Config("--episodes must be at least 1".into()));
    }
    let goals = a.goals.load()?;
    let env = a.env.resolve(&goals)?;
    let assistant = AssistantArg::parse(&a.assistant)?.spec()?;
    let human = HumanArg::parse(&a.human)?.build()?;
    let report = evaluate(&env, &assistant, human.as_ref(), &goals, a.episodes, a.seed)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let table = format_table(&report.pairs);
    write_json(&a.out, &report)?;
    write_text(&a.out.with_extension("txt"), &table)?;
    if let Some(d) = &a.dump {
        write_json(d, &episode_dump(&report.pairs))?;
    }
    print!("{table}");
    Ok(())
}

fn run_cross_eval(a: CrossEval) -> Result<()> {
    if a.episodes == 0 {
        return Err(Failure::Config("--episodes must be at least 1".into()));
    }
    let goals = a.goals.load()?;
    let env = a.env.resolve(&goals)?;
    let assistants = a
        .assistants
        .iter()
        .map(|s| AssistantArg::parse(s)?.spec())
        .collect::<Result<Vec<_>>>()?;
    let humans = a
        .humans
        .iter()
        .map(|s| HumanArg::parse(s)?.build())
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn HumanModel> = humans.iter().map(|h| h.as_ref()).collect();
    let report = cross_eval(&env, &assistants, &refs, &goals, a.episodes, a.seed)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let mut rows = report.baseline.clone();
    rows.extend(report.pairs.iter().filter(|p| p.assistant_goal_pct.is_some()).cloned());
    let text = format!(
        "{}\nDifference from the human alone\n{}",
        format_table(&rows),
        format_deltas(&report.deltas)
    );
    write_json(&a.out, &report)?;
    write_text(&a.out.with_extension("txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn play(a: Play) -> Result<()> {
    let goals = a.goals.load()?;
    let env = a.env.resolve(&goals)?;
    let factory: AssistantFactory = match AssistantArg::parse(&a.assistant)?.spec()? {
        mbag::eval::AssistantSpec::None => Arc::new(|| AssistantRuntime::None),
        mbag::eval::AssistantSpec::Net { name, net, mode } => {
            Arc::new(move || AssistantRuntime::Net(NetAssistant::new(name.clone(), net.clone(), mode.clone())))
        }
    };
    let config = ServerConfig {
        env,
        session: SessionConfig {
            tick_ms: a.tick_ms,
            belief_every: a.belief_every,
            display_mode: match a.display_mode {
                DisplayArg::Full => DisplayMode::Full,
                DisplayArg::PlaceableOnly => DisplayMode::PlaceableOnly,
                DisplayArg::Hidden => DisplayMode::Hidden,
            },
            seed: a.seed,
            ..SessionConfig::default()
        },
        goals,
        metrics_dir: a.metrics_dir,
        max_sessions: a.max_sessions,
    };
    let server = Server::bind(&a.addr, config, factory)?;
    eprintln!("listening on ws://{}", server.local_addr()?);
    server.run()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenGoals(a) => gen_goals(a),
        Command::TrainAz(a) => train_search(a, true),
        Command::TrainAlphazero(a) => train_search(a, false),
        Command::TrainPpo(a) => train_ppo(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Sft(a) => run_sft(a),
        Command::Rollout(a) => rollout(a),
        Command::Eval(a) => eval(a),
        Command::CrossEval(a) => run_cross_eval(a),
        Command::Play(a) => play(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // usage errors exit 2, --help and --version exit 0
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mbag: {e}");
            match e {
                Failure::Config(_) => ExitCode::from(2),
                Failure::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
