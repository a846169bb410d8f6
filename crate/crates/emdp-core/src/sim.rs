//! Deterministic seeded simulation and small-instance brute-force oracles.
//!
//! The generator is SplitMix64, a counter-based 64-bit mixer: the stream is a
//! pure function of the seed, and per-episode streams derive their seed as
//! `seed ^ episode_index`, so any implementation of the same generator family
//! reproduces the traces bit for bit. Stochastic branches and randomized
//! strategy choices are sampled by comparing one 64-bit draw against
//! cumulative probability thresholds scaled to 2^64 and rounded down, with the
//! final branch absorbing the remainder.

use crate::model::{Configuration, Emdp, StateKind, TransId};
use crate::numeric::{Int, Rat};
use crate::strategy::{Dist, StrategyMachine};
use num_bigint::BigUint;
use num_traits::{Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use std::collections::HashMap;
use std::io::Write;
use thiserror::Error;

/// One SplitMix64 step.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sampling table: cumulative thresholds in `[0, 2^64)`; entry `i` wins when
/// the draw is below `thresholds[i]`, the last entry catches everything.
#[derive(Clone)]
struct Sampler {
    thresholds: Vec<u64>,
    choices: Vec<TransId>,
}

impl Sampler {
    fn build(entries: impl Iterator<Item = (TransId, Rat)>) -> Sampler {
        let mut thresholds = Vec::new();
        let mut choices = Vec::new();
        let mut cum = Rat::zero();
        let scale = BigUint::from(1u8) << 64;
        for (trans, p) in entries {
            cum += p;
            let scaled: BigUint = (cum.numer().magnitude() * &scale) / cum.denom().magnitude();
            thresholds.push(scaled.to_u64().unwrap_or(u64::MAX));
            choices.push(trans);
        }
        // Exact mass one maps to 2^64, which saturates; the final bucket must
        // swallow the full range.
        if let Some(last) = thresholds.last_mut() {
            *last = u64::MAX;
        }
        Sampler {
            thresholds,
            choices,
        }
    }

    fn sample(&self, draw: u64) -> TransId {
        for (i, &limit) in self.thresholds.iter().enumerate() {
            if draw < limit || i + 1 == self.thresholds.len() {
                return self.choices[i];
            }
        }
        unreachable!("sampler is never empty")
    }
}

/// One executed step of a trace.
#[derive(Debug, Clone)]
pub struct Step {
    pub trans: TransId,
    /// Energy level after the step.
    pub level: Int,
    pub reward: Rat,
}

/// A finite simulated run.
#[derive(Debug, Clone)]
pub struct Trace {
    pub initial: Configuration,
    pub steps: Vec<Step>,
    /// Mean reward over the executed steps.
    pub running_mean: Rat,
    /// First step index (1-based) at which the level went negative.
    pub safety_violated_at: Option<usize>,
}

/// Aggregate of independent episodes.
#[derive(Debug, Clone)]
pub struct SimReport {
    pub episodes: usize,
    pub steps: usize,
    /// Final running mean per episode, exact.
    pub episode_means: Vec<Rat>,
    /// Decimal aggregate of the episode means.
    pub mean: f64,
    /// Standard error of the episode means.
    pub stderr: f64,
    pub safety_violations: usize,
    pub max_level_seen: Int,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("strategy error during simulation: {0}")]
    Strategy(#[from] crate::strategy::StrategyError),
    #[error("instance too large for the brute-force oracle: {0}")]
    TooLarge(String),
}

struct EpisodeOutcome {
    mean: Rat,
    total_steps: usize,
    violation_at: Option<usize>,
    max_level: Int,
}

/// Core stepper shared by tracing, aggregation, and dumping.
fn run_episode(
    e: &Emdp,
    machine: &StrategyMachine,
    cfg: &Configuration,
    steps: usize,
    seed: u64,
    mut on_step: impl FnMut(usize, &Step, &Rat),
) -> Result<EpisodeOutcome, SimError> {
    let mut rng = seed;
    let mut model_samplers: Vec<Option<Sampler>> = e
        .state_ids()
        .map(|s| {
            if e.kind(s) == StateKind::Stochastic {
                Some(Sampler::build(e.out(s).iter().map(|&t| {
                    (t, e.transition(t).prob.clone().expect("stochastic"))
                })))
            } else {
                None
            }
        })
        .collect();
    // Distributions produced by the machine are cached by table identity.
    let mut machine_samplers: HashMap<usize, Sampler> = HashMap::new();
    let mut state = cfg.state;
    let mut level = cfg.counter.clone();
    let mut memory = machine.init(cfg);
    let mut total_reward = Rat::zero();
    let mut violation_at = None;
    let mut max_level = level.clone();
    if level.is_negative() {
        violation_at = Some(0);
    }
    let mut mean = Rat::zero();
    for i in 1..=steps {
        let trans = match e.kind(state) {
            StateKind::Stochastic => {
                let draw = splitmix64(&mut rng);
                model_samplers[state.0]
                    .as_mut()
                    .expect("stochastic sampler")
                    .sample(draw)
            }
            StateKind::Controllable => {
                let dist = machine.next(state, &memory)?;
                if dist.is_dirac() {
                    dist.0[0].trans
                } else {
                    let draw = splitmix64(&mut rng);
                    let key = dist as *const Dist as usize;
                    machine_samplers
                        .entry(key)
                        .or_insert_with(|| {
                            Sampler::build(dist.0.iter().map(|d| (d.trans, d.prob.clone())))
                        })
                        .sample(draw)
                }
            }
        };
        let tr = e.transition(trans);
        debug_assert_eq!(tr.src, state);
        level += &tr.update;
        state = tr.dst;
        total_reward += &tr.reward;
        if level.is_negative() && violation_at.is_none() {
            violation_at = Some(i);
        }
        if level > max_level {
            max_level = level.clone();
        }
        memory = machine.update(&memory, state, &level);
        mean = &total_reward / Rat::from_integer(Int::from(i as u64));
        let step = Step {
            trans,
            level: level.clone(),
            reward: tr.reward.clone(),
        };
        on_step(i, &step, &mean);
    }
    Ok(EpisodeOutcome {
        mean,
        total_steps: steps,
        violation_at,
        max_level,
    })
}

/// Simulates one reproducible trace: same seed, same trace.
pub fn run_trace(
    e: &Emdp,
    machine: &StrategyMachine,
    cfg: &Configuration,
    steps: usize,
    seed: u64,
) -> Result<Trace, SimError> {
    assert!(steps >= 1, "at least one step");
    let mut recorded = Vec::with_capacity(steps);
    let outcome = run_episode(e, machine, cfg, steps, seed, |_, step, _| {
        recorded.push(step.clone());
    })?;
    Ok(Trace {
        initial: cfg.clone(),
        steps: recorded,
        running_mean: outcome.mean,
        safety_violated_at: outcome.violation_at,
    })
}

/// Runs independent episodes (seed ^ episode index) in parallel and merges
/// order-independent aggregates.
pub fn estimate_mp(
    e: &Emdp,
    machine: &StrategyMachine,
    cfg: &Configuration,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<SimReport, SimError> {
    assert!(episodes >= 1, "at least one episode");
    let outcomes: Result<Vec<EpisodeOutcome>, SimError> = (0..episodes)
        .into_par_iter()
        .map(|ep| run_episode(e, machine, cfg, steps, seed ^ ep as u64, |_, _, _| {}))
        .collect();
    let outcomes = outcomes?;
    Ok(aggregate(outcomes))
}

fn aggregate(outcomes: Vec<EpisodeOutcome>) -> SimReport {
    let episodes = outcomes.len();
    let steps = outcomes.first().map(|o| o.total_steps).unwrap_or(0);
    let episode_means: Vec<Rat> = outcomes.iter().map(|o| o.mean.clone()).collect();
    let safety_violations = outcomes.iter().filter(|o| o.violation_at.is_some()).count();
    let max_level_seen = outcomes
        .iter()
        .map(|o| o.max_level.clone())
        .max()
        .unwrap_or_else(Int::zero);
    let decimals: Vec<f64> = episode_means
        .iter()
        .map(|m| m.numer().to_f64().unwrap_or(f64::NAN) / m.denom().to_f64().unwrap_or(f64::NAN))
        .collect();
    let mean = decimals.iter().sum::<f64>() / episodes as f64;
    let var = if episodes > 1 {
        decimals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (episodes as f64 - 1.0)
    } else {
        0.0
    };
    let stderr = (var / episodes as f64).sqrt();
    SimReport {
        episodes,
        steps,
        episode_means,
        mean,
        stderr,
        safety_violations,
        max_level_seen,
    }
}

/// Streams episodes as JSON lines, one step per line:
/// `{"episode":..,"i":..,"state":..,"trans":..,"level":..,"reward":{..},"running_mean":{..}}`.
/// Returns the same report as [`estimate_mp`] for the dumped episodes
/// (episodes are emitted in index order for byte-stable output).
pub fn dump_traces(
    e: &Emdp,
    machine: &StrategyMachine,
    cfg: &Configuration,
    episodes: usize,
    steps: usize,
    seed: u64,
    out: &mut dyn Write,
) -> Result<SimReport, SimError> {
    let mut outcomes = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut failed: Option<SimError> = None;
        let outcome = run_episode(e, machine, cfg, steps, seed ^ ep as u64, |i, step, mean| {
            if failed.is_some() {
                return;
            }
            let line = serde_json::json!({
                "episode": ep,
                "i": i,
                "state": e.name(e.transition(step.trans).dst),
                "trans": step.trans.0,
                "level": step.level.to_string(),
                "reward": crate::numeric::rat_json(&step.reward),
                "running_mean": crate::numeric::rat_json(mean),
            });
            if writeln!(out, "{line}").is_err() {
                failed = Some(SimError::TooLarge("write failed".into()));
            }
        })?;
        if let Some(err) = failed {
            return Err(err);
        }
        outcomes.push(outcome);
    }
    Ok(aggregate(outcomes))
}

/// Exact best mean payoff over all memoryless deterministic strategies of the
/// `[0, cap]` unfolding, by exhaustive enumeration and exact chain analysis.
pub fn oracle_value(
    e: &Emdp,
    cfg: &Configuration,
    cap: &Int,
) -> Result<Rat, SimError> {
    let width = usize::try_from(&(cap + Int::from(1u8)))
        .map_err(|_| SimError::TooLarge("cap out of range".into()))?;
    let product_states = e.state_count() * width + 1;
    if product_states > 10_000 {
        return Err(SimError::TooLarge(format!(
            "{product_states} product states exceed the 10^4 guard"
        )));
    }
    let sink_reward = e.min_reward() - Rat::from_integer(Int::from(1u8));
    let (mdp, map) = crate::finmdp::unfold(e, &Int::zero(), cap, &sink_reward)
        .map_err(|err| SimError::TooLarge(err.to_string()))?;
    let Some(start) = map.state_of(cfg.state, &cfg.counter) else {
        return Err(SimError::TooLarge(format!(
            "configuration counter {} outside [0, {cap}]",
            cfg.counter
        )));
    };
    let policies = crate::finmdp::enumerate_policies(&mdp)
        .ok_or_else(|| SimError::TooLarge("strategy count exceeds the 10^6 guard".into()))?;
    let mut best: Option<Rat> = None;
    for policy in policies {
        let value = crate::finmdp::policy_value(&mdp, &policy, start);
        if best.as_ref().is_none_or(|b| &value > b) {
            best = Some(value);
        }
    }
    Ok(best.expect("at least one policy"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::StateId;
    use crate::numeric::{int, rat_int};
    use crate::strategy::MemorylessTable;

    fn first_choice_machine(e: &Emdp) -> StrategyMachine {
        StrategyMachine::Memoryless(MemorylessTable::deterministic(
            e.state_ids()
                .map(|s| {
                    if e.is_controllable(s) {
                        Some(e.out(s)[0])
                    } else {
                        None
                    }
                })
                .collect(),
        ))
    }

    #[test]
    fn deterministic_loop_levels() {
        let e = crate::model::parse_emdp("state a controllable\ntrans a -> a update=1 reward=3\n")
            .unwrap();
        let m = first_choice_machine(&e);
        let cfg = Configuration::new(StateId(0), 0);
        let trace = run_trace(&e, &m, &cfg, 5, 7).unwrap();
        let levels: Vec<Int> = trace.steps.iter().map(|s| s.level.clone()).collect();
        assert_eq!(levels, vec![int(1), int(2), int(3), int(4), int(5)]);
        assert_eq!(trace.running_mean, rat_int(3));
        assert!(trace.safety_violated_at.is_none());
    }

    #[test]
    fn seed_determinism_and_divergence() {
        let e = fixtures::fig1();
        let m = first_choice_machine(&e);
        let cfg = Configuration::new(e.state_id("s").unwrap(), 0);
        let a = run_trace(&e, &m, &cfg, 200, 42).unwrap();
        let b = run_trace(&e, &m, &cfg, 200, 42).unwrap();
        assert_eq!(
            a.steps.iter().map(|s| s.trans).collect::<Vec<_>>(),
            b.steps.iter().map(|s| s.trans).collect::<Vec<_>>()
        );
        let c = run_trace(&e, &m, &cfg, 200, 43).unwrap();
        assert_ne!(
            a.steps.iter().map(|s| s.trans).collect::<Vec<_>>(),
            c.steps.iter().map(|s| s.trans).collect::<Vec<_>>()
        );
    }

    #[test]
    fn fig1_exhibits_unsafety() {
        let e = fixtures::fig1();
        let m = first_choice_machine(&e);
        let cfg = Configuration::new(e.state_id("s").unwrap(), 0);
        let mut violated = false;
        for seed in 0..20 {
            let trace = run_trace(&e, &m, &cfg, 500, seed).unwrap();
            violated |= trace.safety_violated_at.is_some();
        }
        assert!(violated, "some seed must witness a negative level");
    }

    #[test]
    fn fig2l_safe_strategy_holds_level_at_t() {
        let e = fixtures::fig2l();
        let m = crate::energy::safe_strategy(&e).unwrap();
        let t = e.state_id("t").unwrap();
        let cfg = Configuration::new(t, 0);
        let trace = run_trace(&e, &m, &cfg, 100, 5).unwrap();
        assert!(trace.steps.iter().all(|s| s.level == int(0)));
        assert!(trace.safety_violated_at.is_none());
    }

    #[test]
    fn estimate_on_deterministic_loop_has_zero_stderr() {
        let e = crate::model::parse_emdp("state a controllable\ntrans a -> a update=1 reward=3\n")
            .unwrap();
        let m = first_choice_machine(&e);
        let cfg = Configuration::new(StateId(0), 0);
        let report = estimate_mp(&e, &m, &cfg, 8, 50, 1).unwrap();
        assert_eq!(report.mean, 3.0);
        assert_eq!(report.stderr, 0.0);
        assert_eq!(report.safety_violations, 0);
        assert_eq!(report.max_level_seen, int(50));
        assert!(report.episode_means.iter().all(|m| m == &rat_int(3)));
    }

    #[test]
    fn pumping_strategy_pumps_pump2() {
        let e = fixtures::pump2();
        let m = crate::energy::pumping_strategy(&e).unwrap();
        let cfg = Configuration::new(e.state_id("s").unwrap(), 0);
        let report = estimate_mp(&e, &m, &cfg, 20, 200, 9).unwrap();
        assert_eq!(report.safety_violations, 0);
        assert!(report.max_level_seen >= int(100));
    }

    #[test]
    fn trace_dump_is_byte_stable() {
        let e = fixtures::fig3();
        let m = crate::energy::safe_strategy(&e).unwrap();
        let cfg = Configuration::new(e.state_id("s").unwrap(), 2);
        let mut a = Vec::new();
        let mut b = Vec::new();
        dump_traces(&e, &m, &cfg, 3, 50, 11, &mut a).unwrap();
        dump_traces(&e, &m, &cfg, 3, 50, 11, &mut b).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b);
        // Each line parses as JSON with the documented fields.
        let first = a.split(|&c| c == b'\n').next().unwrap();
        let v: serde_json::Value = serde_json::from_slice(first).unwrap();
        for key in ["episode", "i", "state", "trans", "level", "reward", "running_mean"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn oracle_value_fig3_and_single_loop() {
        let e = fixtures::fig3();
        let s = e.state_id("s").unwrap();
        let v = oracle_value(&e, &Configuration::new(s, 2), &int(2)).unwrap();
        assert_eq!(v, rat_int(0));

        let loop3 =
            crate::model::parse_emdp("state a controllable\ntrans a -> a update=0 reward=3\n")
                .unwrap();
        let v = oracle_value(&loop3, &Configuration::new(StateId(0), 0), &int(0)).unwrap();
        assert_eq!(v, rat_int(3));
    }

    #[test]
    fn oracle_value_matches_unfold_solver_on_fig2l() {
        let e = fixtures::fig2l();
        let s = e.state_id("s").unwrap();
        let cap = int(4);
        let v = oracle_value(&e, &Configuration::new(s, 4), &cap).unwrap();
        assert!(v <= rat_int(5));
        let sink = e.min_reward() - rat_int(1);
        let (mdp, map) = crate::finmdp::unfold(&e, &int(0), &cap, &sink).unwrap();
        let solved = crate::finmdp::solve_mean_payoff(&mdp);
        let start = map.state_of(s, &int(4)).unwrap();
        assert_eq!(v, solved.values[start.0]);
    }

    #[test]
    fn oracle_value_monotone_in_cap() {
        let e = fixtures::fig2l();
        let s = e.state_id("s").unwrap();
        let mut prev: Option<Rat> = None;
        for cap in 0..=4 {
            let v = oracle_value(&e, &Configuration::new(s, 0), &int(cap)).unwrap();
            if let Some(p) = prev {
                assert!(v >= p, "oracle value must be nondecreasing in the cap");
            }
            prev = Some(v);
        }
    }

    #[test]
    fn oracle_guards_large_instances() {
        let e = fixtures::fig2l();
        let s = e.state_id("s").unwrap();
        assert!(matches!(
            oracle_value(&e, &Configuration::new(s, 0), &int(1_000_000)),
            Err(SimError::TooLarge(_))
        ));
    }
}
