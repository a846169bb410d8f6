//! Command-line surface for the energy MDP analysis pipeline.
//!
//! Exit codes: 0 on success, 1 for analysis-level negative results (an unsafe
//! configuration, a value of −∞), 2 for input errors (bad flags, syntax or
//! validation failures in the model).

use clap::{Parser, Subcommand};
use emdp_core::energy::{min_pump, min_safe, Level, LevelMap};
use emdp_core::graphs::{is_strongly_connected, mecs};
use emdp_core::model::{parse_emdp, Configuration, Emdp};
use emdp_core::numeric::{format_rat, parse_rat, rat_json, Rat};
use emdp_core::strategy::StrategyFile;
use emdp_core::synth::{
    self, approx_value, classify, epsilon_strategy, limit_value, Classification, SynthError,
    ValueKind,
};
use emdp_core::{fixtures, sim};
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "emdp",
    about = "Analysis and strategy synthesis for energy Markov decision processes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Emit machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Model summary: sizes, maximal update, connectivity, end components,
    /// classification.
    Info { model: PathBuf },
    /// Per-state minimal safe energy levels.
    Safety { model: PathBuf },
    /// Per-state minimal pumping energy levels.
    Pump { model: PathBuf },
    /// Classify the model: strongly connected pumpable or not.
    Classify { model: PathBuf },
    /// Approximate the value of a configuration within epsilon.
    Value {
        model: PathBuf,
        /// Configuration, written `state(counter)`.
        #[arg(long)]
        config: String,
        /// Absolute approximation error, a positive rational like `1/10`.
        #[arg(long)]
        epsilon: String,
    },
    /// Limit value of a state (counter grown beyond all bounds).
    LimitValue {
        model: PathBuf,
        /// State identifier.
        #[arg(long)]
        state: String,
    },
    /// Synthesize an epsilon-optimal strategy for a configuration.
    Synth {
        model: PathBuf,
        #[arg(long)]
        config: String,
        #[arg(long)]
        epsilon: String,
        /// Write the strategy JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a synthesized strategy and report mean-payoff statistics.
    Simulate {
        model: PathBuf,
        /// Strategy file produced by `synth`.
        #[arg(long)]
        strategy: PathBuf,
        #[arg(long)]
        config: String,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dump traces as JSON lines to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the bundled example models into a directory.
    Examples {
        #[arg(default_value = "models")]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn load_model(path: &PathBuf) -> Result<Emdp, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    parse_emdp(&text).map_err(|e| e.to_string())
}

fn parse_config(e: &Emdp, text: &str) -> Result<Configuration, String> {
    Configuration::parse(text, e)
}

fn parse_epsilon(text: &str) -> Result<Rat, String> {
    let eps = parse_rat(text)?;
    if eps <= Rat::from_integer(0.into()) {
        return Err("epsilon must be positive".into());
    }
    Ok(eps)
}

fn classification_name(c: Classification) -> &'static str {
    match c {
        Classification::SpEmdp => "strongly-connected-pumpable",
        Classification::StronglyConnectedNotPumpable => "strongly-connected-not-pumpable",
        Classification::NotStronglyConnected => "not-strongly-connected",
    }
}

fn level_json(e: &Emdp, map: &LevelMap) -> serde_json::Value {
    serde_json::Value::Array(
        map.iter()
            .map(|(s, level)| {
                serde_json::json!({
                    "state": e.name(s),
                    "level": match level {
                        Level::Finite(v) => v.to_string(),
                        Level::Infinite => "inf".to_string(),
                    },
                })
            })
            .collect(),
    )
}

fn print_level_table(e: &Emdp, map: &LevelMap) {
    let width = e
        .state_ids()
        .map(|s| e.name(s).len())
        .max()
        .unwrap_or(5)
        .max(5);
    println!("{:width$}  level", "state");
    for (s, level) in map.iter() {
        println!("{:width$}  {level}", e.name(s));
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Info { model } => {
            let e = load_model(&model)?;
            let components = mecs(&e);
            let classification = classify(&e);
            if cli.json {
                let value = serde_json::json!({
                    "command": "info",
                    "states": e.state_count(),
                    "transitions": e.trans_count(),
                    "max_update": e.max_update().to_string(),
                    "strongly_connected": is_strongly_connected(&e),
                    "mecs": components
                        .iter()
                        .map(|m| m.states.iter().map(|&s| e.name(s)).collect::<Vec<_>>())
                        .collect::<Vec<_>>(),
                    "classification": classification_name(classification),
                });
                println!("{value}");
            } else {
                println!("states:             {}", e.state_count());
                println!("transitions:        {}", e.trans_count());
                println!("max update:         {}", e.max_update());
                println!("strongly connected: {}", is_strongly_connected(&e));
                println!("maximal end components:");
                for m in &components {
                    let names: Vec<&str> = m.states.iter().map(|&s| e.name(s)).collect();
                    println!("  {{{}}}", names.join(", "));
                }
                println!("classification:     {}", classification_name(classification));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Safety { model } => {
            let e = load_model(&model)?;
            let map = min_safe(&e);
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({ "command": "safety", "levels": level_json(&e, &map) })
                );
            } else {
                print_level_table(&e, &map);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Pump { model } => {
            let e = load_model(&model)?;
            let map = min_pump(&e);
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({ "command": "pump", "levels": level_json(&e, &map) })
                );
            } else {
                print_level_table(&e, &map);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Classify { model } => {
            let e = load_model(&model)?;
            let c = classify(&e);
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({ "command": "classify", "classification": classification_name(c) })
                );
            } else {
                println!("{}", classification_name(c));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Value {
            model,
            config,
            epsilon,
        } => {
            let e = load_model(&model)?;
            let cfg = parse_config(&e, &config)?;
            let eps = parse_epsilon(&epsilon)?;
            let report = approx_value(&e, &cfg, &eps).map_err(synth_error)?;
            let negative = report.value.is_none();
            let kind = match report.kind {
                ValueKind::Exact => "exact",
                ValueKind::Approximate(_) => "approximate",
                ValueKind::Limit => "limit",
            };
            if cli.json {
                let value = serde_json::json!({
                    "command": "value",
                    "state": e.name(cfg.state),
                    "counter": cfg.counter.to_string(),
                    "value": report.value.as_ref().map(rat_json),
                    "kind": kind,
                    "epsilon": match &report.kind {
                        ValueKind::Approximate(eps) => Some(rat_json(eps)),
                        _ => None,
                    },
                });
                println!("{value}");
            } else {
                match &report.value {
                    Some(v) => println!("value of {} = {} ({kind})", cfg.display(&e), format_rat(v)),
                    None => println!("value of {} = -inf (unsafe configuration)", cfg.display(&e)),
                }
            }
            Ok(if negative {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::LimitValue { model, state } => {
            let e = load_model(&model)?;
            let s = e
                .state_id(&state)
                .ok_or_else(|| format!("unknown state `{state}`"))?;
            let value = limit_value(&e, s);
            let negative = value.is_none();
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({
                        "command": "limit-value",
                        "state": e.name(s),
                        "value": value.as_ref().map(rat_json),
                    })
                );
            } else {
                match &value {
                    Some(v) => println!("limit value of {} = {}", e.name(s), format_rat(v)),
                    None => println!("limit value of {} = -inf", e.name(s)),
                }
            }
            Ok(if negative {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Synth {
            model,
            config,
            epsilon,
            out,
        } => {
            let e = load_model(&model)?;
            let cfg = parse_config(&e, &config)?;
            let eps = parse_epsilon(&epsilon)?;
            let machine = match epsilon_strategy(&e, &cfg, &eps) {
                Ok(machine) => machine,
                Err(SynthError::UnsafeStart) => {
                    eprintln!("configuration {} is unsafe; no strategy exists", cfg.display(&e));
                    return Ok(ExitCode::from(1));
                }
                Err(err) => return Err(err.to_string()),
            };
            let file = StrategyFile::new(&e, machine);
            let json = serde_json::to_string_pretty(&file).map_err(|e| e.to_string())?;
            match out {
                Some(path) => {
                    fs::write(&path, format!("{json}\n"))
                        .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
                    if cli.json {
                        println!(
                            "{}",
                            serde_json::json!({ "command": "synth", "written": path.display().to_string() })
                        );
                    } else {
                        println!("strategy written to {}", path.display());
                    }
                }
                None => println!("{json}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate {
            model,
            strategy,
            config,
            episodes,
            steps,
            seed,
            out,
        } => {
            let e = load_model(&model)?;
            let cfg = parse_config(&e, &config)?;
            let text = fs::read_to_string(&strategy)
                .map_err(|err| format!("cannot read {}: {err}", strategy.display()))?;
            let file: StrategyFile =
                serde_json::from_str(&text).map_err(|err| format!("invalid strategy file: {err}"))?;
            file.validate(&e)?;
            if episodes == 0 || steps == 0 {
                return Err("episodes and steps must be positive".into());
            }
            let report = match out {
                Some(path) => {
                    let mut sink = std::io::BufWriter::new(
                        fs::File::create(&path)
                            .map_err(|err| format!("cannot create {}: {err}", path.display()))?,
                    );
                    let report =
                        sim::dump_traces(&e, &file.machine, &cfg, episodes, steps, seed, &mut sink)
                            .map_err(|err| err.to_string())?;
                    sink.flush().map_err(|err| err.to_string())?;
                    report
                }
                None => sim::estimate_mp(&e, &file.machine, &cfg, episodes, steps, seed)
                    .map_err(|err| err.to_string())?,
            };
            if cli.json {
                let value = serde_json::json!({
                    "command": "simulate",
                    "episodes": report.episodes,
                    "steps": report.steps,
                    "mean": report.mean,
                    "stderr": report.stderr,
                    "safety_violations": report.safety_violations,
                    "max_level_seen": report.max_level_seen.to_string(),
                    "episode_means": report.episode_means.iter().map(rat_json).collect::<Vec<_>>(),
                });
                println!("{value}");
            } else {
                println!("episodes:          {}", report.episodes);
                println!("steps per episode: {}", report.steps);
                println!("mean payoff:       {:.6} ± {:.6}", report.mean, report.stderr);
                println!("safety violations: {}", report.safety_violations);
                println!("max level seen:    {}", report.max_level_seen);
            }
            Ok(if report.safety_violations > 0 {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Examples { dir } => {
            fs::create_dir_all(&dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
            let files = [
                ("fig1.emdp", fixtures::FIG1),
                ("fig2l.emdp", fixtures::FIG2L),
                ("fig2r.emdp", fixtures::FIG2R),
                ("fig3.emdp", fixtures::FIG3),
                ("pump2.emdp", fixtures::PUMP2),
                ("pump2_reward.emdp", fixtures::PUMP2_REWARD),
            ];
            for (name, text) in files {
                let path = dir.join(name);
                fs::write(&path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
                if !cli.json {
                    println!("wrote {}", path.display());
                }
            }
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({ "command": "examples", "dir": dir.display().to_string() })
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn synth_error(err: SynthError) -> String {
    match err {
        synth::SynthError::UnsafeStart => "configuration is unsafe".into(),
        other => other.to_string(),
    }
}
