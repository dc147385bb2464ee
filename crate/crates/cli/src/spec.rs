//! Human and assistant specs given on the command line.
//!
//! Humans: `boltzmann[:BETA]`, `uniform`, `net:PATH[:TEMP]`,
//! `pikl:PATH[:C_PUCT]`. Assistants: `none`, `scripted[:BETA]` (rollouts
//! only), `PATH`, `PATH:mcts[:SIMS]`, `PATH:head[:TEMP]`.

use std::path::PathBuf;
use std::sync::Arc;

use mbag::eval::{eval_mcts, AssistantSpec};
use mbag::humans::{BoltzmannConfig, BoltzmannHuman, HumanModel, NetHuman, PiklConfig, PiklHuman, UniformHuman};
use mbag::training::{AssistantAgent, AssistantMode, Checkpoint, NetAssistant, NoAssistant, ScriptedAssistant};

use crate::{Failure, Result};

const EVAL_SIMULATIONS: u32 = 20;

fn number<T: std::str::FromStr>(spec: &str, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Failure::Config(format!("`{spec}`: `{field}` is not a valid number")))
}

fn load_net(path: &PathBuf) -> Result<mbag::net::Network> {
    Ok(Checkpoint::load(path)?.net)
}

#[derive(Clone, Debug, PartialEq)]
pub enum HumanArg {
    Boltzmann(f64),
    Uniform,
    Net { path: PathBuf, temperature: f64 },
    Pikl { path: PathBuf, c_puct: f64 },
}

impl HumanArg {
    pub fn parse(spec: &str) -> Result<HumanArg> {
        let parts: Vec<&str> = spec.split(':').collect();
        let bad = || Failure::Config(format!("unknown human model `{spec}`"));
        Ok(match parts[..] {
            ["boltzmann"] => HumanArg::Boltzmann(BoltzmannConfig::default().beta),
            ["boltzmann", b] => HumanArg::Boltzmann(number(spec, b)?),
            ["uniform"] => HumanArg::Uniform,
            ["net", p] => HumanArg::Net {
                path: p.into(),
                temperature: 1.0,
            },
            ["net", p, t] => HumanArg::Net {
                path: p.into(),
                temperature: number(spec, t)?,
            },
            ["pikl", p] => HumanArg::Pikl {
                path: p.into(),
                c_puct: PiklConfig::default().c_puct,
            },
            ["pikl", p, c] => HumanArg::Pikl {
                path: p.into(),
                c_puct: number(spec, c)?,
            },
            _ => return Err(bad()),
        })
    }

    pub fn build(&self) -> Result<Box<dyn HumanModel>> {
        Ok(match self {
            HumanArg::Boltzmann(beta) => {
                let cfg = BoltzmannConfig {
                    beta: *beta,
                    ..BoltzmannConfig::default()
                };
                cfg.validate()?;
                Box::new(BoltzmannHuman::new(cfg))
            }
            HumanArg::Uniform => Box::new(UniformHuman),
            HumanArg::Net { path, temperature } => {
                if !(*temperature > 0.0 && temperature.is_finite()) {
                    return Err(Failure::Config("human temperature must be positive".into()));
                }
                let mut h = NetHuman::new(format!("net({})", path.display()), load_net(path)?);
                h.temperature = *temperature;
                Box::new(h)
            }
            HumanArg::Pikl { path, c_puct } => {
                let cfg = PiklConfig::preset(*c_puct)?;
                Box::new(PiklHuman::new(load_net(path)?, cfg))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AssistantArg {
    None,
    Scripted(f64),
    Mcts { path: PathBuf, simulations: u32 },
    Head { path: PathBuf, temperature: f64 },
}

impl AssistantArg {
    pub fn parse(spec: &str) -> Result<AssistantArg> {
        let parts: Vec<&str> = spec.split(':').collect();
        Ok(match parts[..] {
            ["none"] => AssistantArg::None,
            ["scripted"] => AssistantArg::Scripted(BoltzmannConfig::default().beta),
            ["scripted", b] => AssistantArg::Scripted(number(spec, b)?),
            [p] | [p, "mcts"] => AssistantArg::Mcts {
                path: p.into(),
                simulations: EVAL_SIMULATIONS,
            },
            [p, "mcts", n] => AssistantArg::Mcts {
                path: p.into(),
                simulations: number(spec, n)?,
            },
            [p, "head"] => AssistantArg::Head {
                path: p.into(),
                temperature: 1.0,
            },
            [p, "head", t] => AssistantArg::Head {
                path: p.into(),
                temperature: number(spec, t)?,
            },
            _ => return Err(Failure::Config(format!("unknown assistant `{spec}`"))),
        })
    }

    /// Evaluation form; scripted assistants read the goal and are refused.
    pub fn spec(&self) -> Result<AssistantSpec> {
        Ok(match self {
            AssistantArg::None => AssistantSpec::None,
            AssistantArg::Scripted(_) => {
                return Err(Failure::Config(
                    "scripted assistants see the goal and can only record rollouts".into(),
                ))
            }
            AssistantArg::Mcts { path, simulations } => AssistantSpec::Net {
                name: format!("{}:mcts({simulations})", path.display()),
                net: Arc::new(load_net(path)?),
                mode: AssistantMode::Mcts {
                    config: eval_mcts(*simulations),
                },
            },
            AssistantArg::Head { path, temperature } => AssistantSpec::Net {
                name: format!("{}:head", path.display()),
                net: Arc::new(load_net(path)?),
                mode: AssistantMode::PolicyHead {
                    temperature: *temperature,
                },
            },
        })
    }

    /// Rollout form.
    pub fn agent(&self) -> Result<Box<dyn AssistantAgent>> {
        Ok(match self {
            AssistantArg::Scripted(beta) => {
                let cfg = BoltzmannConfig {
                    beta: *beta,
                    ..BoltzmannConfig::default()
                };
                cfg.validate()?;
                Box::new(ScriptedAssistant::new(cfg))
            }
            other => match other.spec()? {
                AssistantSpec::None => Box::new(NoAssistant),
                AssistantSpec::Net { name, net, mode } => Box::new(NetAssistant::new(name, net, mode)),
            },
        })
    }
}
