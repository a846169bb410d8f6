//! Strategy synthesis and value computation: classification, optimal and
//! ε-optimal strategies for strongly connected pumpable models, the mixing and
//! balanced cases for general strongly connected models, limit values through
//! the end-component condensation, value approximation for arbitrary
//! configurations, and the composite ε-optimal strategy.
//!
//! Machines built here are safe by construction from any configuration
//! admitted by the safety level map: danger latches hand over to the safe
//! strategy whenever the level reaches `max min-safe + M`, and every table is
//! level-consistent on the region it can be queried in.

use crate::chain::{self, ChainRows};
use crate::energy::{
    min_pump, min_safe, pumping_table, safe_table, EnergyError, LevelMap,
};
use crate::finmdp::{self, FiniteMdp, FiniteTransition};
use crate::flows::{self, Component, Core, FlowError, FlowSolution, ProgramKind};
use crate::graphs::{self, ReachError};
use crate::model::{Configuration, Emdp, StateId, StateKind, TransId};
use crate::numeric::{ceil_pow_three_quarters, Int, Rat};
use crate::strategy::{
    AnchoredMachine, CaseAMachine, CompositeMachine, Dist, MemorylessTable, StrategyMachine,
    Type1Machine, Type2Machine,
};
use num_integer::Integer;
use num_traits::{One, Signed, Zero};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    SpEmdp,
    StronglyConnectedNotPumpable,
    NotStronglyConnected,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("not a strongly connected pumpable model: {0}")]
    NotSpEmdp(String),
    #[error("operation not applicable: {0}")]
    NotApplicable(String),
    #[error("start configuration is unsafe")]
    UnsafeStart,
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Reach(#[from] ReachError),
    #[error("internal synthesis failure: {0}")]
    Internal(String),
}

/// Membership in the strongly connected pumpable class: strongly connected and
/// every safe configuration pumpable, i.e. the minimal safe and minimal
/// pumping levels agree at every state.
pub fn classify(e: &Emdp) -> Classification {
    if !graphs::is_strongly_connected(e) {
        return Classification::NotStronglyConnected;
    }
    let safe = min_safe(e);
    let pump = min_pump(e);
    if e.state_ids().all(|s| safe.get(s) == pump.get(s)) {
        Classification::SpEmdp
    } else {
        Classification::StronglyConnectedNotPumpable
    }
}

fn is_pumpable(e: &Emdp) -> bool {
    let safe = min_safe(e);
    let pump = min_pump(e);
    e.state_ids().all(|s| safe.get(s) == pump.get(s))
}

// ——— Strongly connected pumpable models ———————————————————————————————

/// Analysis context shared by the synthesis routines: the model restricted to
/// states with safe configurations (all analysis constants live there), plus
/// the optimal payoff flow and its core.
struct SpContext {
    sub: Emdp,
    /// Restricted id -> original id.
    state_back: Vec<StateId>,
    to_sub: Vec<Option<StateId>>,
    trans_back: Vec<TransId>,
    pump: LevelMap,
    payoff: FlowSolution,
    core: Core,
    max_update: Int,
}

fn sp_context(e: &Emdp) -> Result<SpContext, SynthError> {
    match classify(e) {
        Classification::SpEmdp => {}
        other => return Err(SynthError::NotSpEmdp(format!("classification is {other:?}"))),
    }
    let safe_full = min_safe(e);
    if safe_full.all_infinite() {
        return Err(SynthError::NotSpEmdp("no safe configuration".into()));
    }
    let (sub, to_sub, trans_back) = e
        .restrict(|s| safe_full.get(s).is_finite(), |_| true)
        .map_err(|err| SynthError::Internal(format!("safe restriction invalid: {err}")))?;
    if !graphs::is_strongly_connected(&sub) {
        return Err(SynthError::NotSpEmdp(
            "the safe region is not strongly connected".into(),
        ));
    }
    let mut state_back = vec![StateId(0); sub.state_count()];
    for s in e.state_ids() {
        if let Some(n) = to_sub[s.0] {
            state_back[n.0] = s;
        }
    }
    let pump = min_pump(&sub);
    debug_assert!(sub.state_ids().all(|s| min_safe(&sub).get(s).is_finite()));
    let payoff = flows::solve_flow(&sub, ProgramKind::Payoff)?;
    let core = flows::find_core(&sub, &payoff)?;
    let max_update = sub.max_update();
    Ok(SpContext {
        sub,
        state_back,
        to_sub,
        trans_back,
        pump,
        payoff,
        core,
        max_update,
    })
}

/// The common value of all safe configurations: the payoff program optimum of
/// the safe region.
pub fn sp_value(e: &Emdp) -> Result<Rat, SynthError> {
    Ok(sp_context(e)?.payoff.objective_value.clone())
}

/// Switching thresholds of the latched low-mode machine:
/// `L = M + max min-pump`, `H = L + |S| + 2·|S|²·M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdParams {
    pub low: Int,
    pub high: Int,
}

fn thresholds(ctx: &SpContext) -> ThresholdParams {
    let n = Int::from(ctx.sub.state_count() as u64);
    let low = &ctx.max_update + ctx.pump.max_finite().expect("safe states are pumpable");
    let high = &low + &n + Int::from(2u8) * &n * &n * &ctx.max_update;
    ThresholdParams { low, high }
}

/// Stage schedule parameters of the staged type II machine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Type2Params {
    pub p1: Rat,
    pub p2: Rat,
    /// Smallest positive integer making `p1·N` and `p2·N` integral.
    pub n_block: u64,
    /// Anchor state visited between the mixing phases and the pump.
    pub anchor: StateId,
    /// `TH = max min-pump + M`.
    pub threshold: Int,
}

fn type2_params(ctx: &SpContext, c1: &Component, c2: &Component) -> Type2Params {
    let mass = &c1.freq + &c2.freq;
    let p1 = &c1.freq / &mass;
    let p2 = &c2.freq / &mass;
    let n_block_int = p1.denom().lcm(p2.denom());
    let n_block = u64::try_from(&n_block_int).expect("schedule block fits");
    let anchor = *c1.states.iter().next().expect("component is nonempty");
    let threshold = ctx.pump.max_finite().expect("pumpable") + &ctx.max_update;
    Type2Params {
        p1,
        p2,
        n_block,
        anchor,
        threshold,
    }
}

/// Translates an original-model component into restricted coordinates.
fn component_to_sub(ctx: &SpContext, c: &Component) -> Result<Component, SynthError> {
    let mut trans_to_sub = vec![None; ctx.trans_back.iter().map(|t| t.0 + 1).max().unwrap_or(0)];
    for (i, t) in ctx.trans_back.iter().enumerate() {
        if t.0 >= trans_to_sub.len() {
            trans_to_sub.resize(t.0 + 1, None);
        }
        trans_to_sub[t.0] = Some(TransId(i));
    }
    let states = c
        .states
        .iter()
        .map(|&s| {
            ctx.to_sub[s.0].ok_or_else(|| {
                SynthError::NotSpEmdp("core component uses states without safe configurations".into())
            })
        })
        .collect::<Result<BTreeSet<_>, _>>()?;
    let transitions = c
        .transitions
        .iter()
        .map(|&t| {
            trans_to_sub
                .get(t.0)
                .copied()
                .flatten()
                .ok_or_else(|| SynthError::NotSpEmdp("core transition outside the safe region".into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Component {
        states,
        transitions,
        share: c.share.clone(),
        freq: c.freq.clone(),
        trend: c.trend.clone(),
        mp: c.mp.clone(),
    })
}

fn build_type1(ctx: &SpContext, c: &Component) -> Result<StrategyMachine, SynthError> {
    let th = thresholds(ctx);
    let mu = flows::mu_table(&ctx.sub, c)?;
    let pump = pumping_table(&ctx.sub)?;
    let machine = StrategyMachine::Type1(Type1Machine {
        low: th.low,
        high: th.high,
        mu,
        pump,
    });
    Ok(lift_from_sub(ctx, &machine))
}

fn build_type2(
    ctx: &SpContext,
    c1: &Component,
    c2: &Component,
    stage_cap: Option<u64>,
) -> Result<StrategyMachine, SynthError> {
    let params = type2_params(ctx, c1, c2);
    let steps1 = (&params.p1 * Rat::from_integer(Int::from(params.n_block)))
        .to_integer();
    let steps2 = (&params.p2 * Rat::from_integer(Int::from(params.n_block)))
        .to_integer();
    let mu1 = flows::mu_table(&ctx.sub, c1)?;
    let mu2 = flows::mu_table(&ctx.sub, c2)?;
    let kappa_targets: BTreeSet<StateId> = [params.anchor].into();
    let reach = graphs::reach_strategy(&ctx.sub, &kappa_targets)?;
    let kappa = match reach.machine {
        StrategyMachine::Memoryless(t) => t,
        _ => unreachable!(),
    };
    let pump = pumping_table(&ctx.sub)?;
    let machine = StrategyMachine::Type2(Type2Machine {
        mu1,
        mu2,
        kappa,
        pump,
        anchor: params.anchor,
        steps1: u64::try_from(&steps1).expect("schedule fits"),
        steps2: u64::try_from(&steps2).expect("schedule fits"),
        block: params.n_block,
        threshold: params.threshold,
        stage_cap,
    });
    Ok(lift_from_sub(ctx, &machine))
}

fn lift_from_sub(ctx: &SpContext, machine: &StrategyMachine) -> StrategyMachine {
    machine.lift(&ctx.state_back, &ctx.trans_back, ctx.state_back.len().max(
        ctx.to_sub.len(),
    ))
}

/// The optimal switching machine for a type I core: plays the flow strategy
/// until the level latches low, pumps until it clears the release bound. The
/// machine observes the starting counter through its initial memory, so one
/// machine is optimal in every configuration.
pub fn type1_strategy(e: &Emdp, core: &Core) -> Result<StrategyMachine, SynthError> {
    let ctx = sp_context(e)?;
    let Core::TypeI(c) = core else {
        return Err(SynthError::NotApplicable("core is not type I".into()));
    };
    let c_sub = component_to_sub(&ctx, c)?;
    build_type1(&ctx, &c_sub)
}

/// The staged machine for a type II core: stage `i` mixes the two component
/// strategies in their frequency ratio for `N·i` steps, returns to the anchor,
/// and pumps to `TH + ceil((i·N)^(3/4))`; dropping below `TH` aborts the stage
/// into the pump.
pub fn type2_strategy(e: &Emdp, core: &Core) -> Result<StrategyMachine, SynthError> {
    let ctx = sp_context(e)?;
    let Core::TypeII(c1, c2) = core else {
        return Err(SynthError::NotApplicable("core is not type II".into()));
    };
    let c1 = component_to_sub(&ctx, c1)?;
    let c2 = component_to_sub(&ctx, c2)?;
    build_type2(&ctx, &c1, &c2, None)
}

/// Optimal strategy of Theorem 1(3): dispatches on the extracted core.
pub fn sp_optimal_strategy(e: &Emdp) -> Result<StrategyMachine, SynthError> {
    let ctx = sp_context(e)?;
    match ctx.core.clone() {
        Core::TypeI(c) => build_type1(&ctx, &c),
        Core::TypeII(c1, c2) => build_type2(&ctx, &c1, &c2, None),
    }
}

/// Stage index at which the staged schedule can be frozen while keeping the
/// per-stage payoff shortfall below ε/2: overhead (anchor travel plus pumping
/// to the stage target) is bounded through exact expected hitting times and
/// the pumping chain's drift, and shrinks like `i^(-1/4)` against the mixing
/// phases.
pub fn sp_stage_cap(e: &Emdp, epsilon: &Rat) -> Result<u64, SynthError> {
    let ctx = sp_context(e)?;
    let (c1, c2) = match ctx.core.clone() {
        Core::TypeI(_) => return Ok(1),
        Core::TypeII(c1, c2) => (c1, c2),
    };
    let params = type2_params(&ctx, &c1, &c2);
    let reward_span = ctx.sub.max_reward() - ctx.sub.min_reward();
    if reward_span.is_zero() {
        return Ok(1);
    }
    let reach = graphs::reach_strategy(&ctx.sub, &[params.anchor].into())?;
    let kappa_bound: Rat = reach
        .expected_steps
        .iter()
        .max()
        .cloned()
        .expect("nonempty");
    let pump = pumping_table(&ctx.sub)?;
    let (rows, _rewards, updates) = table_chain(&ctx.sub, &pump);
    let drift = chain::gain_bias(&rows, &updates);
    let t_pi = drift
        .gain
        .iter()
        .min()
        .cloned()
        .expect("nonempty");
    if !t_pi.is_positive() {
        return Err(SynthError::Internal(
            "pumping strategy has non-positive drift".into(),
        ));
    }
    let z_span = span(&drift.bias);
    let m = Rat::from_integer(ctx.max_update.clone());
    let n_block = Rat::from_integer(Int::from(params.n_block));
    let th = Rat::from_integer(params.threshold.clone());
    let half_eps = epsilon / Rat::from_integer(Int::from(2u8));
    let mut stage = 1u64;
    loop {
        let target = ceil_pow_three_quarters(&(Int::from(stage) * Int::from(params.n_block)));
        let pump_steps = (&th + Rat::from_integer(target) + &z_span + &m + Rat::one()) / &t_pi;
        let overhead = &kappa_bound + pump_steps;
        let mixing = &n_block * Rat::from_integer(Int::from(stage));
        if &reward_span * &overhead < &half_eps * &mixing {
            return Ok(stage);
        }
        stage = stage
            .checked_mul(2)
            .ok_or_else(|| SynthError::Internal("stage cap overflow".into()))?;
        if stage > 1 << 40 {
            return Err(SynthError::Internal("stage cap did not stabilize".into()));
        }
    }
}

/// Finite-memory ε-optimal machine of Theorem 1(4): the type I machine is
/// already finite-memory; the staged type II machine is frozen at the computed
/// stage cap.
pub fn sp_epsilon_strategy(e: &Emdp, epsilon: &Rat) -> Result<StrategyMachine, SynthError> {
    if !epsilon.is_positive() {
        return Err(SynthError::NotApplicable("epsilon must be positive".into()));
    }
    let ctx = sp_context(e)?;
    match ctx.core.clone() {
        Core::TypeI(c) => build_type1(&ctx, &c),
        Core::TypeII(c1, c2) => {
            let cap = sp_stage_cap(e, epsilon)?;
            build_type2(&ctx, &c1, &c2, Some(cap))
        }
    }
}

// ——— Chains induced by memoryless tables ————————————————————————————————

/// Chain rows plus expected per-state rewards and counter updates for the
/// Markov chain induced by a memoryless table.
fn table_chain(e: &Emdp, table: &MemorylessTable) -> (ChainRows, Vec<Rat>, Vec<Rat>) {
    let mut rows = Vec::with_capacity(e.state_count());
    let mut rewards = Vec::with_capacity(e.state_count());
    let mut updates = Vec::with_capacity(e.state_count());
    for s in e.state_ids() {
        let dist: Vec<(TransId, Rat)> = match e.kind(s) {
            StateKind::Stochastic => e
                .out(s)
                .iter()
                .map(|&t| (t, e.transition(t).prob.clone().expect("stochastic")))
                .collect(),
            StateKind::Controllable => {
                let d = table
                    .next(s)
                    .expect("table must cover controllable states");
                d.0.iter().map(|en| (en.trans, en.prob.clone())).collect()
            }
        };
        let mut reward = Rat::zero();
        let mut update = Rat::zero();
        let mut row = Vec::with_capacity(dist.len());
        for (t, p) in dist {
            let tr = e.transition(t);
            reward += &p * &tr.reward;
            update += &p * Rat::from_integer(tr.update.clone());
            row.push((tr.dst.0, p));
        }
        rows.push(row);
        rewards.push(reward);
        updates.push(update);
    }
    (rows, rewards, updates)
}

fn span(xs: &[Rat]) -> Rat {
    let max = xs.iter().max().cloned().unwrap_or_else(Rat::zero);
    let min = xs.iter().min().cloned().unwrap_or_else(Rat::zero);
    max - min
}

fn ceil_rat(r: &Rat) -> Int {
    r.ceil().to_integer()
}

// ——— Case A: strongly connected, positive trend optimum ————————————————

/// Mixing parameters: component weights with their certificate quantities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseAParams {
    pub weights: Vec<Rat>,
    pub epsilon: Rat,
    pub mixed_trend: Rat,
    pub mixed_mp: Rat,
    pub f_star: Rat,
}

pub struct CaseAOutput {
    pub machine: StrategyMachine,
    pub safe_start_level: Int,
    pub params: CaseAParams,
}

/// ε-optimal machine for a strongly connected model whose trend optimum is
/// positive: time-shares the core component strategies, tilted toward a
/// positive-trend component of the trend program just far enough to keep the
/// payoff within ε/2 of the optimum, with a permanent switch to the safe
/// strategy at the danger threshold. `safe_start_level` certifies the height
/// above which the danger probability costs at most ε/4 of payoff, via an
/// exact exponential supermartingale on the block-cycle level increments.
pub fn case_a_strategy(e: &Emdp, epsilon: &Rat) -> Result<CaseAOutput, SynthError> {
    if !epsilon.is_positive() {
        return Err(SynthError::NotApplicable("epsilon must be positive".into()));
    }
    let safe_full = min_safe(e);
    if safe_full.all_infinite() {
        return Err(SynthError::Energy(EnergyError::NoSafeState));
    }
    let (sub, _to_sub, trans_back) = e
        .restrict(|s| safe_full.get(s).is_finite(), |_| true)
        .map_err(|err| SynthError::Internal(format!("safe restriction invalid: {err}")))?;
    if !graphs::is_strongly_connected(&sub) {
        return Err(SynthError::NotApplicable(
            "the safe region is not strongly connected".into(),
        ));
    }
    let mut state_back = vec![StateId(0); sub.state_count()];
    {
        let mut idx = 0;
        for s in e.state_ids() {
            if safe_full.get(s).is_finite() {
                state_back[idx] = s;
                idx += 1;
            }
        }
    }
    let built = build_case_a(&sub, epsilon)?;
    Ok(CaseAOutput {
        machine: built
            .machine
            .lift(&state_back, &trans_back, e.state_count()),
        safe_start_level: built.safe_start_level,
        params: built.params,
    })
}

/// Case A construction on a model whose states all have safe configurations.
fn build_case_a(sub: &Emdp, epsilon: &Rat) -> Result<CaseAOutput, SynthError> {
    let trend_sol = flows::solve_flow(sub, ProgramKind::Trend)?;
    if !trend_sol.objective_value.is_positive() {
        return Err(SynthError::NotApplicable(format!(
            "trend optimum {} is not positive",
            trend_sol.objective_value
        )));
    }
    let payoff = flows::solve_flow(sub, ProgramKind::Payoff)?;
    let f_star = payoff.objective_value.clone();
    let core = flows::find_core(sub, &payoff)?;
    // Base mixture from the core, in normalized frequency weights.
    let mut mix: Vec<(Component, Rat)> = match core {
        Core::TypeI(c) => vec![(c, Rat::one())],
        Core::TypeII(c1, c2) => {
            let mass = &c1.freq + &c2.freq;
            let w1 = &c1.freq / &mass;
            let w2 = &c2.freq / &mass;
            vec![(c1, w1), (c2, w2)]
        }
    };
    let quarter_eps = epsilon / Rat::from_integer(Int::from(4u8));
    let half_eps = epsilon / Rat::from_integer(Int::from(2u8));
    let base_trend: Rat = mix.iter().map(|(c, w)| &c.trend * w).sum();
    if !base_trend.is_positive() {
        // Tilt toward the best positive-trend component of the trend program,
        // spending half the budget on the tilt to keep the drift workable.
        let d = flows::components(sub, &trend_sol)
            .into_iter()
            .max_by(|a, b| a.trend.cmp(&b.trend))
            .expect("positive optimum has components");
        debug_assert!(d.trend >= trend_sol.objective_value);
        let gap = &f_star - &d.mp;
        let delta = if gap.is_positive() {
            (&half_eps / &gap).min(Rat::new(Int::one(), Int::from(2u8)))
        } else {
            Rat::new(Int::one(), Int::from(2u8))
        };
        let keep = Rat::one() - &delta;
        for (_, w) in mix.iter_mut() {
            *w *= &keep;
        }
        // Merge with an existing entry over the same states, if any.
        if let Some(entry) = mix.iter_mut().find(|(c, _)| c.states == d.states) {
            entry.1 += &delta;
        } else {
            mix.push((d, delta));
        }
    }
    let mixed_trend: Rat = mix.iter().map(|(c, w)| &c.trend * w).sum();
    let mixed_mp: Rat = mix.iter().map(|(c, w)| &c.mp * w).sum();
    debug_assert!(mixed_trend.is_positive());
    debug_assert!(mixed_mp >= &f_star - epsilon / Rat::from_integer(Int::from(2u8)));

    // Integer block lengths proportional to the weights, scaled until the
    // bias-span losses fit the ε/4 budget and the cycle drift is provably
    // positive from every start state.
    let denominators = mix
        .iter()
        .fold(Int::one(), |acc, (_, w)| acc.lcm(w.denom()));
    let base_lens: Vec<Int> = mix
        .iter()
        .map(|(_, w)| (w * Rat::from_integer(denominators.clone())).to_integer())
        .collect();
    let base_total: Int = base_lens.iter().cloned().sum();
    let tables: Vec<MemorylessTable> = mix
        .iter()
        .map(|(c, _)| flows::mu_table(sub, c))
        .collect::<Result<_, _>>()?;
    let mut span_r_total = Rat::zero();
    let mut span_z_total = Rat::zero();
    for table in &tables {
        let (rows, rewards, updates) = table_chain(sub, table);
        span_r_total += span(&chain::gain_bias(&rows, &rewards).bias);
        span_z_total += span(&chain::gain_bias(&rows, &updates).bias);
    }
    let two = Rat::from_integer(Int::from(2u8));
    let m_payoff = ceil_rat(
        &(&two * &span_r_total / (&quarter_eps * Rat::from_integer(base_total.clone()))),
    );
    let m_drift = ceil_rat(
        &(&two * &two * &span_z_total / (&mixed_trend * Rat::from_integer(base_total.clone()))),
    );
    let mut scale = m_payoff.max(m_drift).max(Int::one());
    let safe_map = min_safe(sub);
    let max_update = sub.max_update().max(Int::one());
    let danger = safe_map.max_finite().expect("safe states exist") + &max_update;
    let safe = safe_table(sub, &safe_map);
    for _ in 0..12 {
        let lens: Vec<u64> = base_lens
            .iter()
            .map(|b| u64::try_from(&(b * &scale)).expect("block length fits"))
            .collect();
        let cycle_len: u64 = lens.iter().sum();
        if cycle_len > 20_000 {
            return Err(SynthError::Internal(
                "mixing cycle too long for exact certification at this epsilon".into(),
            ));
        }
        let blocks: Vec<(MemorylessTable, u64)> =
            tables.iter().cloned().zip(lens.iter().copied()).collect();
        let means = cycle_mean(sub, &blocks);
        if !means.iter().all(Rat::is_positive) {
            scale *= Int::from(2u8);
            continue;
        }
        let reward_span = (sub.max_reward() - sub.min_reward()).max(Rat::one());
        let bound = &quarter_eps / &reward_span;
        let exponent = ruin_exponent(sub, &blocks, &bound)?;
        let cycle_drop = Int::from(cycle_len) * &max_update;
        let safe_start_level = &danger + cycle_drop + exponent + Int::one();
        let machine = StrategyMachine::CaseA(CaseAMachine {
            blocks,
            danger: danger.clone(),
            safe: safe.clone(),
            safe_start_level: safe_start_level.clone(),
        });
        return Ok(CaseAOutput {
            machine,
            safe_start_level,
            params: CaseAParams {
                weights: mix.iter().map(|(_, w)| w.clone()).collect(),
                epsilon: epsilon.clone(),
                mixed_trend,
                mixed_mp,
                f_star,
            },
        });
    }
    Err(SynthError::Internal(
        "cycle drift failed to certify positive".into(),
    ))
}

/// Per-state branch tables of one block: `(destination, update, probability)`.
fn block_branches(e: &Emdp, table: &MemorylessTable) -> Vec<Vec<(usize, i64, Rat)>> {
    e.state_ids()
        .map(|s| {
            let dist: Vec<(TransId, Rat)> = match e.kind(s) {
                StateKind::Stochastic => e
                    .out(s)
                    .iter()
                    .map(|&t| (t, e.transition(t).prob.clone().expect("stochastic")))
                    .collect(),
                StateKind::Controllable => table
                    .next(s)
                    .expect("block tables cover controllable states")
                    .0
                    .iter()
                    .map(|en| (en.trans, en.prob.clone()))
                    .collect(),
            };
            dist.into_iter()
                .map(|(t, p)| {
                    let tr = e.transition(t);
                    let delta = i64::try_from(&tr.update).expect("update fits i64");
                    (tr.dst.0, delta, p)
                })
                .collect()
        })
        .collect()
}

/// Expected level change over one block cycle per start state, by backward
/// recursion over the cycle steps.
fn cycle_mean(e: &Emdp, blocks: &[(MemorylessTable, u64)]) -> Vec<Rat> {
    let n = e.state_count();
    let mut mean = vec![Rat::zero(); n];
    for (table, len) in blocks.iter().rev() {
        let branches = block_branches(e, table);
        for _ in 0..*len {
            let mut next = vec![Rat::zero(); n];
            for (s, out) in branches.iter().enumerate() {
                let mut acc = Rat::zero();
                for (dst, delta, p) in out {
                    acc += p * (Rat::from_integer(Int::from(*delta)) + &mean[*dst]);
                }
                next[s] = acc;
            }
            mean = next;
        }
    }
    mean
}

/// `E[ρ^Δ]` of the cycle level change per start state.
fn cycle_mgf(e: &Emdp, blocks: &[(MemorylessTable, u64)], rho: &Rat) -> Vec<Rat> {
    let n = e.state_count();
    let mut v = vec![Rat::one(); n];
    for (table, len) in blocks.iter().rev() {
        let branches: Vec<Vec<(usize, Rat)>> = block_branches(e, table)
            .into_iter()
            .map(|out| {
                out.into_iter()
                    .map(|(dst, delta, p)| (dst, p * pow_rat(rho, delta)))
                    .collect()
            })
            .collect();
        for _ in 0..*len {
            let mut next = vec![Rat::zero(); n];
            for (s, out) in branches.iter().enumerate() {
                let mut acc = Rat::zero();
                for (dst, w) in out {
                    acc += w * &v[*dst];
                }
                next[s] = acc;
            }
            v = next;
        }
    }
    v
}

/// Smallest `j` with `ρ^j <= bound` for the least `ρ = 1 - 2^-k` making
/// `ρ^level` a supermartingale of the cycle-sampled level process.
fn ruin_exponent(
    e: &Emdp,
    blocks: &[(MemorylessTable, u64)],
    bound: &Rat,
) -> Result<Int, SynthError> {
    for k in 1..=16u32 {
        let rho = Rat::new(Int::from((1u64 << k) - 1), Int::from(1u64 << k));
        let mgf = cycle_mgf(e, blocks, &rho);
        if mgf.iter().any(|v| v > &Rat::one()) {
            continue;
        }
        // Found a certifying rho; count multiplications to reach the bound.
        let mut power = Rat::one();
        let mut j = Int::zero();
        while &power > bound {
            power *= &rho;
            j += Int::one();
            if j > Int::from(200_000u64) {
                return Err(SynthError::Internal("ruin exponent too large".into()));
            }
        }
        return Ok(j);
    }
    Err(SynthError::Internal(
        "no supermartingale certificate found".into(),
    ))
}

fn pow_rat(rho: &Rat, exponent: i64) -> Rat {
    let mag = rho.pow(exponent.unsigned_abs() as u32 as i32);
    if exponent >= 0 {
        mag
    } else {
        Rat::one() / mag
    }
}

// ——— Case B: strongly connected, balanced trend ————————————————————————

pub struct CaseBOutput {
    pub value: Rat,
    /// A configuration with the largest value in the bounded-counter product.
    pub anchor: Configuration,
}

/// Limit value of every state of a strongly connected model with trend
/// optimum zero: every safe strategy is eventually level-stable, so the best
/// value in the `[0, |S|·M]` product with a penalizing sink is the common
/// limit value; the returned configuration attains it.
pub fn case_b_value(e: &Emdp) -> Result<CaseBOutput, SynthError> {
    if !graphs::is_strongly_connected(e) {
        return Err(SynthError::NotApplicable("model is not strongly connected".into()));
    }
    let trend_sol = flows::solve_flow(e, ProgramKind::Trend)?;
    if !trend_sol.objective_value.is_zero() {
        return Err(SynthError::NotApplicable(format!(
            "trend optimum is {}, not zero",
            trend_sol.objective_value
        )));
    }
    let bound = Int::from(e.state_count() as u64) * e.max_update();
    let sink_reward = e.min_reward() - Rat::one();
    let (mdp, map) = finmdp::unfold(e, &Int::zero(), &bound, &sink_reward)
        .map_err(|err| SynthError::Internal(err.to_string()))?;
    let solved = finmdp::solve_mean_payoff(&mdp);
    let mut best: Option<(Rat, StateId)> = None;
    for p in mdp.state_ids() {
        if p == map.sink {
            continue;
        }
        let v = &solved.values[p.0];
        if best.as_ref().is_none_or(|(b, _)| v > b) {
            best = Some((v.clone(), p));
        }
    }
    let (value, anchor_product) = best.expect("non-sink states exist");
    if value < e.min_reward() {
        return Err(SynthError::NotApplicable(
            "no level-stable behavior exists".into(),
        ));
    }
    let (state, counter) = map.config_of(anchor_product).expect("not the sink");
    Ok(CaseBOutput {
        value,
        anchor: Configuration { state, counter },
    })
}

// ——— Limit values ———————————————————————————————————————————————————————

/// Limit values of every state: `None` encodes −∞ (no counter value makes the
/// state safe). Strongly connected safe models resolve through the trend
/// dichotomy; general models restrict to the safe region, analyze each end
/// component as a standalone model, and optimize the condensation.
pub fn limit_values(e: &Emdp) -> Vec<Option<Rat>> {
    let safe = min_safe(e);
    if safe.all_infinite() {
        return vec![None; e.state_count()];
    }
    if !e.state_ids().all(|s| safe.get(s).is_finite()) {
        let (sub, to_sub, _) = e
            .restrict(|s| safe.get(s).is_finite(), |_| true)
            .expect("safe restriction is well formed");
        let inner = limit_values(&sub);
        return e
            .state_ids()
            .map(|s| to_sub[s.0].and_then(|n| inner[n.0].clone()))
            .collect();
    }
    if graphs::is_strongly_connected(e) {
        let trend_sol = flows::solve_flow(e, ProgramKind::Trend)
            .expect("safe strongly connected models have feasible flows");
        let value = if trend_sol.objective_value.is_positive() {
            flows::solve_flow(e, ProgramKind::Payoff)
                .expect("feasible")
                .objective_value
        } else {
            case_b_value(e).expect("balanced case applies").value
        };
        return vec![Some(value); e.state_count()];
    }
    let components = graphs::mecs(e);
    let mut mec_values = Vec::with_capacity(components.len());
    for mec in &components {
        let (model, _, _) = e
            .restrict(|s| mec.states.contains(&s), |t| mec.transitions.contains(&t))
            .expect("end components are well-formed sub-models");
        let best = limit_values(&model)
            .into_iter()
            .flatten()
            .max();
        mec_values.push(best);
    }
    let sentinel = mec_values
        .iter()
        .flatten()
        .min()
        .cloned()
        .unwrap_or_else(|| e.min_reward())
        .min(e.min_reward())
        - Rat::one();
    let filled: Vec<Rat> = mec_values
        .iter()
        .map(|v| v.clone().unwrap_or_else(|| sentinel.clone()))
        .collect();
    let cond = finmdp::condensation(e, &filled);
    let solved = finmdp::solve_mean_payoff(&cond.mdp);
    e.state_ids()
        .map(|s| Some(solved.values[cond.hat[s.0].0].clone()))
        .collect()
}

/// Limit value of one state, `None` for −∞.
pub fn limit_value(e: &Emdp, s: StateId) -> Option<Rat> {
    limit_values(e)[s.0].clone()
}

// ——— Safe counter windows for approximation ————————————————————————————

/// Safety-restricted counter window `[0, cap]` of a model whose states all
/// have finite minimal safe levels: configurations below `min-safe` do not
/// exist and controllable moves must stay safe, so every policy of the window
/// is a genuinely safe strategy. The top border either clamps (value lower
/// bound) or absorbs at the per-state limit values (value upper bound).
struct SafeWindow {
    mdp: FiniteMdp,
    /// Per product transition, the original transition (None on the added
    /// absorbing loops).
    origin: Vec<Option<TransId>>,
    /// (state, level) -> product state, for levels within the window.
    index: Vec<Vec<Option<StateId>>>,
    width: usize,
}

impl SafeWindow {
    fn state_of(&self, s: StateId, counter: &Int) -> Option<StateId> {
        let k = usize::try_from(counter).ok()?;
        if k >= self.width {
            return None;
        }
        self.index[s.0][k]
    }
}

enum TopBorder<'a> {
    Clamp,
    Absorb(&'a [Rat]),
}

fn safe_window(e: &Emdp, safe: &LevelMap, cap: &Int, top: TopBorder) -> SafeWindow {
    let width = usize::try_from(cap).expect("window fits") + 1;
    let n = e.state_count();
    let mut index: Vec<Vec<Option<StateId>>> = vec![vec![None; width]; n];
    let mut states: Vec<(String, StateKind)> = Vec::new();
    for s in e.state_ids() {
        let floor = safe
            .get(s)
            .as_finite()
            .expect("all states safe")
            .clone();
        for k in 0..width {
            if Int::from(k as u64) >= floor {
                index[s.0][k] = Some(StateId(states.len()));
                states.push((format!("{}_l{}", e.name(s), k), e.kind(s)));
            }
        }
    }
    // Absorbing top states, one per model state when absorbing.
    let mut top_state: Vec<Option<StateId>> = vec![None; n];
    if let TopBorder::Absorb(_) = top {
        for s in e.state_ids() {
            top_state[s.0] = Some(StateId(states.len()));
            states.push((format!("{}_top", e.name(s)), StateKind::Controllable));
        }
    }
    let mut transitions = Vec::new();
    let mut origin = Vec::new();
    for s in e.state_ids() {
        for k in 0..width {
            let Some(src) = index[s.0][k] else { continue };
            for &t in e.out(s) {
                let tr = e.transition(t);
                let next = Int::from(k as u64) + &tr.update;
                let floor = safe.get(tr.dst).as_finite().expect("all safe");
                if &next < floor {
                    // Unsafe move: forbidden for controllable states and
                    // impossible from admitted stochastic configurations.
                    debug_assert!(e.is_controllable(s));
                    continue;
                }
                let dst = if next > *cap {
                    match top {
                        TopBorder::Clamp => index[tr.dst.0][width - 1]
                            .expect("cap at least the destination floor"),
                        TopBorder::Absorb(_) => top_state[tr.dst.0].unwrap(),
                    }
                } else {
                    index[tr.dst.0][usize::try_from(&next).unwrap()]
                        .expect("level at least the destination floor")
                };
                transitions.push(FiniteTransition {
                    src,
                    dst,
                    reward: tr.reward.clone(),
                    prob: tr.prob.clone(),
                });
                origin.push(Some(t));
            }
        }
    }
    if let TopBorder::Absorb(limits) = top {
        for s in e.state_ids() {
            let id = top_state[s.0].unwrap();
            transitions.push(FiniteTransition {
                src: id,
                dst: id,
                reward: limits[s.0].clone(),
                prob: None,
            });
            origin.push(None);
        }
    }
    let mdp = FiniteMdp::new(states, transitions).expect("safe window is well formed");
    SafeWindow {
        mdp,
        origin,
        index,
        width,
    }
}

// ——— Value approximation ————————————————————————————————————————————————

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValueKind {
    Exact,
    Approximate(Rat),
    Limit,
}

/// Report of a value query; `value == None` encodes −∞.
#[derive(Debug, Clone)]
pub struct ValueReport {
    pub state: StateId,
    pub counter: Option<Int>,
    pub value: Option<Rat>,
    pub kind: ValueKind,
    pub witness: Option<Box<StrategyMachine>>,
}

/// Approximates the configuration value within ε. Unsafe configurations are
/// exactly −∞ and strongly connected pumpable models have the exact common
/// value. Otherwise the value is bracketed by two solves of one
/// safety-restricted counter window whose top crossings absorb at the
/// per-state limit values (upper bound) and at those values less the
/// ε-machine's certified shortfall (lower bound, realizable by handing over
/// to that machine on crossing): the midpoint is within ε/2. On balanced
/// models whose optimum settles inside the window both solves agree and the
/// report is exact-valued.
pub fn approx_value(e: &Emdp, cfg: &Configuration, epsilon: &Rat) -> Result<ValueReport, SynthError> {
    if !epsilon.is_positive() {
        return Err(SynthError::NotApplicable("epsilon must be positive".into()));
    }
    let safe_full = min_safe(e);
    if !safe_full.admits(cfg.state, &cfg.counter) {
        return Ok(ValueReport {
            state: cfg.state,
            counter: Some(cfg.counter.clone()),
            value: None,
            kind: ValueKind::Exact,
            witness: None,
        });
    }
    if classify(e) == Classification::SpEmdp {
        if let Ok(v) = sp_value(e) {
            return Ok(ValueReport {
                state: cfg.state,
                counter: Some(cfg.counter.clone()),
                value: Some(v),
                kind: ValueKind::Exact,
                witness: None,
            });
        }
    }
    let (sub, to_sub, trans_back) = e
        .restrict(|s| safe_full.get(s).is_finite(), |_| true)
        .map_err(|err| SynthError::Internal(format!("safe restriction invalid: {err}")))?;
    let mut state_back = vec![StateId(0); sub.state_count()];
    for s in e.state_ids() {
        if let Some(n) = to_sub[s.0] {
            state_back[n.0] = s;
        }
    }
    let start = to_sub[cfg.state.0].expect("admitted configuration");
    let half = epsilon / Rat::from_integer(Int::from(2u8));
    let general = general_machine(&sub, epsilon)?;
    let limits: Vec<Rat> = limit_values(&sub)
        .into_iter()
        .map(|v| v.expect("restricted states have finite limit values"))
        .collect();
    let safe = min_safe(&sub);
    let m = sub.max_update().max(Int::one());
    let cap = general
        .required
        .clone()
        .max(safe.max_finite().expect("safe states") + &m)
        .max(cfg.counter.clone())
        + &m;
    let window_cells = Int::from(sub.state_count() as u64) * (&cap + Int::one());
    if window_cells > Int::from(400_000u64) {
        // Far above the certified start: the machine itself is the witness.
        let limit = limits[start.0].clone();
        return Ok(ValueReport {
            state: cfg.state,
            counter: Some(cfg.counter.clone()),
            value: Some(limit - half),
            kind: ValueKind::Approximate(epsilon.clone()),
            witness: Some(Box::new(general.machine.lift(
                &state_back,
                &trans_back,
                e.state_count(),
            ))),
        });
    }
    let lowered: Vec<Rat> = limits.iter().map(|v| v - epsilon).collect();
    let upper_window = safe_window(&sub, &safe, &cap, TopBorder::Absorb(&limits));
    let upper_solved = finmdp::solve_mean_payoff(&upper_window.mdp);
    let lower_window = safe_window(&sub, &safe, &cap, TopBorder::Absorb(&lowered));
    let lower_solved = finmdp::solve_mean_payoff(&lower_window.mdp);
    let start_product = upper_window
        .state_of(start, &cfg.counter)
        .expect("admitted configuration lies in the window");
    let upper = upper_solved.values[start_product.0].clone();
    let lower = lower_solved.values[start_product.0].clone();
    debug_assert!(lower <= upper);
    let two = Rat::from_integer(Int::from(2u8));
    let value = (&upper + &lower) / &two;
    let policy_rows: Vec<Vec<Option<Dist>>> = (0..lower_window.width)
        .map(|k| {
            sub.state_ids()
                .map(|s| {
                    if !sub.is_controllable(s) {
                        return None;
                    }
                    let product = lower_window.index[s.0][k]?;
                    let t = lower_solved.policy[product.0]?;
                    lower_window.origin[t].map(Dist::dirac)
                })
                .collect()
        })
        .collect();
    let machine = StrategyMachine::Windowed(crate::strategy::WindowedMachine {
        cap: (lower_window.width - 1) as u64,
        policy: policy_rows,
        handover: Box::new(general.machine),
    });
    Ok(ValueReport {
        state: cfg.state,
        counter: Some(cfg.counter.clone()),
        value: Some(value),
        kind: ValueKind::Approximate(epsilon.clone()),
        witness: Some(Box::new(machine.lift(
            &state_back,
            &trans_back,
            e.state_count(),
        ))),
    })
}

// ——— The composite ε-optimal strategy ———————————————————————————————————

struct GeneralMachine {
    machine: StrategyMachine,
    /// Counter height above which the machine is ε-optimal (safety holds from
    /// any admitted configuration regardless).
    required: Int,
}

/// Level allowance `d` such that the chain absorbs into `targets` before
/// losing `d` units, except with probability at most `bound`: doubling horizon
/// `m` until the exact `m`-step non-absorption probability is at most 1/2 from
/// every state, then `d = k·m·M` with `2^-k <= bound`.
fn absorption_allowance(
    rows: &ChainRows,
    is_target: &dyn Fn(usize) -> bool,
    max_update: &Int,
    bound: &Rat,
) -> Result<Int, SynthError> {
    let n = rows.len();
    let mut alive: Vec<Rat> = (0..n)
        .map(|s| if is_target(s) { Rat::zero() } else { Rat::one() })
        .collect();
    let mut m: u64 = 1;
    let half = Rat::new(Int::one(), Int::from(2u8));
    let mut steps_done = 0u64;
    for _ in 0..40 {
        while steps_done < m {
            let mut next = vec![Rat::zero(); n];
            for s in 0..n {
                if is_target(s) {
                    continue;
                }
                let mut acc = Rat::zero();
                for (t, p) in &rows[s] {
                    if !is_target(*t) {
                        acc += p * &alive[*t];
                    }
                }
                next[s] = acc;
            }
            alive = next;
            steps_done += 1;
        }
        if alive.iter().all(|p| p <= &half) {
            let mut k = 1u64;
            let mut tail = half.clone();
            while &tail > bound {
                tail *= &half;
                k += 1;
                if k > 4096 {
                    return Err(SynthError::Internal("absorption bound too small".into()));
                }
            }
            return Ok(Int::from(k) * Int::from(m) * max_update);
        }
        m *= 2;
    }
    Err(SynthError::Internal(
        "chain does not absorb quickly enough".into(),
    ))
}

/// Balanced-case machine for a fully safe, strongly connected model: travel to
/// the anchor configuration of the stable window, then follow the clamp-window
/// policy anchored there.
fn build_anchored(sub: &Emdp, epsilon: &Rat) -> Result<GeneralMachine, SynthError> {
    let safe = min_safe(sub);
    let m = sub.max_update().max(Int::one());
    let cap = Int::from(sub.state_count() as u64) * &m + safe.max_finite().expect("safe") + &m;
    let window = safe_window(sub, &safe, &cap, TopBorder::Clamp);
    let solved = finmdp::solve_mean_payoff(&window.mdp);
    // Deterministic argmax over window configurations.
    let mut best: Option<(Rat, StateId, usize)> = None;
    for s in sub.state_ids() {
        for k in 0..window.width {
            if let Some(p) = window.index[s.0][k] {
                let v = &solved.values[p.0];
                if best.as_ref().is_none_or(|(b, _, _)| v > b) {
                    best = Some((v.clone(), s, k));
                }
            }
        }
    }
    let (_, anchor, anchor_level) = best.expect("window is nonempty");
    let policy: Vec<Vec<Option<Dist>>> = (0..window.width)
        .map(|k| {
            sub.state_ids()
                .map(|s| {
                    if !sub.is_controllable(s) {
                        return None;
                    }
                    let product = window.index[s.0][k]?;
                    let t = solved.policy[product.0]?;
                    window.origin[t].map(Dist::dirac)
                })
                .collect()
        })
        .collect();
    let reach = graphs::reach_strategy(sub, &[anchor].into())?;
    let travel = match reach.machine {
        StrategyMachine::Memoryless(t) => t,
        _ => unreachable!(),
    };
    let danger = safe.max_finite().unwrap() + &m;
    let reward_span = (sub.max_reward() - sub.min_reward()).max(Rat::one());
    let bound = epsilon / (Rat::from_integer(Int::from(4u8)) * reward_span);
    let (rows, _, _) = {
        // Chain of the travel table with stochastic dynamics, absorbing at the
        // anchor state.
        let (mut rows, r, u) = table_chain(sub, &travel);
        rows[anchor.0].clear();
        (rows, r, u)
    };
    let allowance = absorption_allowance(&rows, &|s| s == anchor.0, &m, &bound)?;
    let required = &danger + &allowance + Int::from(anchor_level as u64) + &m + Int::one();
    let machine = StrategyMachine::Anchored(AnchoredMachine {
        travel,
        anchor,
        anchor_level: Int::from(anchor_level as u64),
        anchor_coord: anchor_level as u64,
        cap: (window.width - 1) as u64,
        policy,
        danger,
        safe: safe_table(sub, &safe),
    });
    Ok(GeneralMachine { machine, required })
}

/// ε-optimal machine with its start requirement, for an arbitrary model:
/// mirrors the limit-value recursion. Safety holds from every admitted start;
/// ε-optimality holds above the returned requirement.
fn general_machine(model: &Emdp, epsilon: &Rat) -> Result<GeneralMachine, SynthError> {
    let safe = min_safe(model);
    if safe.all_infinite() {
        return Err(SynthError::Energy(EnergyError::NoSafeState));
    }
    let m = model.max_update().max(Int::one());
    if !model.state_ids().all(|s| safe.get(s).is_finite()) {
        // Shrink to the safe region; wrap with travel toward its best part so
        // entries anywhere in the model are covered.
        let (sub, to_sub, trans_back) = model
            .restrict(|s| safe.get(s).is_finite(), |_| true)
            .map_err(|err| SynthError::Internal(format!("safe restriction: {err}")))?;
        let mut state_back = vec![StateId(0); sub.state_count()];
        for s in model.state_ids() {
            if let Some(n) = to_sub[s.0] {
                state_back[n.0] = s;
            }
        }
        let inner = general_machine(&sub, epsilon)?;
        let lifted = inner
            .machine
            .lift(&state_back, &trans_back, model.state_count());
        let vals = limit_values(&sub);
        let best = vals.iter().flatten().max().cloned();
        let targets: BTreeSet<StateId> = model
            .state_ids()
            .filter(|s| {
                to_sub[s.0]
                    .is_some_and(|n| vals[n.0].as_ref() == best.as_ref() && best.is_some())
            })
            .collect();
        let danger = safe.max_finite().unwrap() + &m;
        match graphs::reach_strategy(model, &targets) {
            Ok(reach) => {
                let travel = match reach.machine {
                    StrategyMachine::Memoryless(t) => t,
                    _ => unreachable!(),
                };
                let reward_span = (model.max_reward() - model.min_reward()).max(Rat::one());
                let bound = epsilon / (Rat::from_integer(Int::from(4u8)) * reward_span);
                let (mut rows, _, _) = table_chain(model, &travel);
                for s in &targets {
                    rows[s.0].clear();
                }
                let allowance =
                    absorption_allowance(&rows, &|s| targets.contains(&StateId(s)), &m, &bound)?;
                let mut mec_of = vec![None; model.state_count()];
                for s in &targets {
                    mec_of[s.0] = Some(0);
                }
                let machine = StrategyMachine::Composite(CompositeMachine {
                    transient: travel,
                    mec_of,
                    settle: vec![Some(Box::new(lifted))],
                    danger: danger.clone(),
                    safe: safe_table(model, &safe),
                });
                let required = inner.required + allowance + danger + &m + Int::one();
                Ok(GeneralMachine { machine, required })
            }
            Err(_) => {
                // Disconnected safe pockets: fall back to the safe strategy.
                // Values stay exact elsewhere; see the decisions ledger.
                Ok(GeneralMachine {
                    machine: StrategyMachine::Memoryless(safe_table(model, &safe)),
                    required: danger,
                })
            }
        }
    } else if graphs::is_strongly_connected(model) {
        if is_pumpable(model) {
            let machine = sp_epsilon_strategy(model, epsilon)?;
            Ok(GeneralMachine {
                machine,
                required: Int::zero(),
            })
        } else {
            let trend_sol = flows::solve_flow(model, ProgramKind::Trend)?;
            if trend_sol.objective_value.is_positive() {
                let out = build_case_a(model, epsilon)?;
                Ok(GeneralMachine {
                    machine: out.machine,
                    required: out.safe_start_level,
                })
            } else {
                build_anchored(model, epsilon)
            }
        }
    } else {
        build_composite(model, epsilon)
    }
}

/// Composite machine over the end components of a fully safe model: mimic the
/// condensation-optimal strategy through transients, hand over to the
/// per-component machine on settlement.
fn build_composite(model: &Emdp, epsilon: &Rat) -> Result<GeneralMachine, SynthError> {
    let safe = min_safe(model);
    let m = model.max_update().max(Int::one());
    let half = epsilon / Rat::from_integer(Int::from(2u8));
    let components = graphs::mecs(model);
    let mut mec_of: Vec<Option<usize>> = vec![None; model.state_count()];
    for (i, mec) in components.iter().enumerate() {
        for &s in &mec.states {
            mec_of[s.0] = Some(i);
        }
    }
    struct MecInfo {
        value: Option<Rat>,
        machine: Option<GeneralMachine>,
        state_back: Vec<StateId>,
        trans_back: Vec<TransId>,
        to_sub: Vec<Option<StateId>>,
    }
    let mut infos = Vec::with_capacity(components.len());
    for mec in &components {
        let (inner_model, to_sub, trans_back) = model
            .restrict(|s| mec.states.contains(&s), |t| mec.transitions.contains(&t))
            .map_err(|err| SynthError::Internal(format!("component restriction: {err}")))?;
        let mut state_back = vec![StateId(0); inner_model.state_count()];
        for s in model.state_ids() {
            if let Some(n) = to_sub[s.0] {
                state_back[n.0] = s;
            }
        }
        let value = limit_values(&inner_model).into_iter().flatten().max();
        let machine = if value.is_some() {
            Some(general_machine(&inner_model, &half)?)
        } else {
            None
        };
        infos.push(MecInfo {
            value,
            machine,
            state_back,
            trans_back,
            to_sub,
        });
    }
    let sentinel = infos
        .iter()
        .filter_map(|i| i.value.clone())
        .min()
        .unwrap_or_else(|| model.min_reward())
        .min(model.min_reward())
        - Rat::one();
    let filled: Vec<Rat> = infos
        .iter()
        .map(|i| i.value.clone().unwrap_or_else(|| sentinel.clone()))
        .collect();
    let cond = finmdp::condensation(model, &filled);
    let solved = finmdp::solve_mean_payoff(&cond.mdp);
    // Transit choices per controllable state, and per-component plans.
    let mut transient: Vec<Option<Dist>> = vec![None; model.state_count()];
    let mut settle: Vec<Option<Box<StrategyMachine>>> = vec![None; components.len()];
    let mut required_inner = Int::zero();
    for s in model.state_ids() {
        if !model.is_controllable(s) || mec_of[s.0].is_some() {
            continue;
        }
        let hat = cond.hat[s.0];
        let choice = solved.policy[hat.0].expect("controllable");
        let origin = cond.origin[choice].expect("transient choices originate in the model");
        transient[s.0] = Some(Dist::dirac(origin));
    }
    for (i, mec) in components.iter().enumerate() {
        let info = &infos[i];
        let r_state = cond.mec_state[i];
        let choice = solved.policy[r_state.0].expect("component states are controllable");
        match cond.origin[choice] {
            None => {
                // Self-loop: settle here.
                let inner = info.machine.as_ref().ok_or_else(|| {
                    SynthError::Internal("settlement into a valueless component".into())
                })?;
                let lifted = inner.machine.lift(
                    &info.state_back,
                    &info.trans_back,
                    model.state_count(),
                );
                settle[i] = Some(Box::new(lifted));
                required_inner = required_inner.max(inner.required.clone());
            }
            Some(exit) => {
                // Exit plan: reach the exit transition's source inside the
                // component, then take it.
                let exit_src = model.transition(exit).src;
                let (inner_model, _, tb) = model
                    .restrict(|s| mec.states.contains(&s), |t| mec.transitions.contains(&t))
                    .expect("validated above");
                let sub_target = info.to_sub[exit_src.0].expect("exit source inside component");
                let reach = graphs::reach_strategy(&inner_model, &[sub_target].into())?;
                for (sub_idx, choice) in reach.choices.iter().enumerate() {
                    let s = info.state_back[sub_idx];
                    if !model.is_controllable(s) {
                        continue;
                    }
                    if s == exit_src {
                        transient[s.0] = Some(Dist::dirac(exit));
                    } else if let Some(c) = choice {
                        transient[s.0] = Some(Dist::dirac(tb[c.0]));
                    }
                }
            }
        }
    }
    let danger = safe.max_finite().expect("all safe") + &m;
    let machine = StrategyMachine::Composite(CompositeMachine {
        transient: MemorylessTable { choices: transient },
        mec_of: mec_of.clone(),
        settle: settle.clone(),
        danger: danger.clone(),
        safe: safe_table(model, &safe),
    });
    // Entry requirement: the mimic chain must settle before losing the
    // allowance, and arrive above the inner requirements.
    if settle.iter().all(Option::is_none) {
        return Err(SynthError::Internal(
            "condensation strategy never settles".into(),
        ));
    }
    let settle_target: Vec<bool> = model
        .state_ids()
        .map(|s| mec_of[s.0].is_some_and(|i| settle[i].is_some()))
        .collect();
    let reward_span = (model.max_reward() - model.min_reward()).max(Rat::one());
    let bound = epsilon / (Rat::from_integer(Int::from(4u8)) * reward_span);
    let mimic_rows = composite_transit_chain(model, &machine, &settle_target);
    let allowance = absorption_allowance(&mimic_rows, &|s| settle_target[s], &m, &bound)?;
    let required = danger + allowance + required_inner + &m + Int::one();
    Ok(GeneralMachine { machine, required })
}

/// Chain of the composite's pre-settlement play, absorbing at settlement
/// states.
fn composite_transit_chain(
    model: &Emdp,
    machine: &StrategyMachine,
    settle_target: &[bool],
) -> ChainRows {
    let StrategyMachine::Composite(c) = machine else {
        unreachable!("composite expected");
    };
    model
        .state_ids()
        .map(|s| {
            if settle_target[s.0] {
                return Vec::new();
            }
            match model.kind(s) {
                StateKind::Stochastic => model
                    .out(s)
                    .iter()
                    .map(|&t| {
                        let tr = model.transition(t);
                        (tr.dst.0, tr.prob.clone().expect("stochastic"))
                    })
                    .collect(),
                StateKind::Controllable => match c.transient.next(s) {
                    Ok(dist) => dist
                        .0
                        .iter()
                        .map(|en| (model.transition(en.trans).dst.0, en.prob.clone()))
                        .collect(),
                    // States without a transit choice (inside exit-plan
                    // components covered elsewhere, or unreachable): park on
                    // the first transition for the absorption analysis; this
                    // only makes the allowance more conservative.
                    Err(_) => vec![(
                        model.transition(model.out(s)[0]).dst.0,
                        Rat::one(),
                    )],
                },
            }
        })
        .collect()
}

/// ε-optimal strategy for an arbitrary safe start: strongly connected
/// pumpable models delegate to the frozen staged machine; from high starts the
/// composite mimics the condensation optimum with per-component machines; low
/// starts play the certified clamp-window policy.
pub fn epsilon_strategy(
    e: &Emdp,
    cfg: &Configuration,
    epsilon: &Rat,
) -> Result<StrategyMachine, SynthError> {
    if !epsilon.is_positive() {
        return Err(SynthError::NotApplicable("epsilon must be positive".into()));
    }
    let safe_full = min_safe(e);
    if !safe_full.admits(cfg.state, &cfg.counter) {
        return Err(SynthError::UnsafeStart);
    }
    if classify(e) == Classification::SpEmdp {
        match sp_epsilon_strategy(e, epsilon) {
            Ok(machine) => return Ok(machine),
            // Vacuously pumpable corner cases fall through to the general path.
            Err(SynthError::NotSpEmdp(_)) => {}
            Err(other) => return Err(other),
        }
    }
    let general = general_machine(e, epsilon)?;
    if cfg.counter >= general.required {
        return Ok(general.machine);
    }
    // Low start: the clamp-window policy realizing the certified lower bound.
    let report = approx_value(e, cfg, epsilon)?;
    report
        .witness
        .map(|b| *b)
        .ok_or_else(|| SynthError::Internal("approximation produced no witness".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::parse_emdp;
    use crate::numeric::{int, rat, rat_int};
    use crate::sim;

    fn cfg(e: &Emdp, name: &str, counter: i64) -> Configuration {
        Configuration::new(e.state_id(name).unwrap(), counter)
    }

    #[test]
    fn classification_of_fixtures() {
        assert_eq!(
            classify(&fixtures::fig2l()),
            Classification::StronglyConnectedNotPumpable
        );
        assert_eq!(
            classify(&fixtures::fig2r()),
            Classification::NotStronglyConnected
        );
        assert_eq!(
            classify(&fixtures::fig3()),
            Classification::StronglyConnectedNotPumpable
        );
        let single =
            parse_emdp("state a controllable\ntrans a -> a update=1 reward=0\n").unwrap();
        assert_eq!(classify(&single), Classification::SpEmdp);
        assert_eq!(classify(&fixtures::pump2()), Classification::SpEmdp);
    }

    #[test]
    fn classify_rejects_safe_but_unpumpable_level_gaps() {
        // min_safe(s) = 0 < min_pump(s) = 5: s(0) is safe but not pumpable.
        let text = "state s controllable\nstate p controllable\n\
                    trans s -> s update=0 reward=0\n\
                    trans s -> p update=-5 reward=0\n\
                    trans p -> p update=1 reward=0\n\
                    trans p -> s update=0 reward=0\n";
        let e = parse_emdp(text).unwrap();
        assert_eq!(classify(&e), Classification::StronglyConnectedNotPumpable);
    }

    #[test]
    fn sp_values() {
        let single =
            parse_emdp("state a controllable\ntrans a -> a update=1 reward=3\n").unwrap();
        assert_eq!(sp_value(&single).unwrap(), rat_int(3));
        assert_eq!(sp_value(&fixtures::pump2_reward()).unwrap(), rat_int(1));
        assert!(matches!(
            sp_value(&fixtures::fig2l()),
            Err(SynthError::NotSpEmdp(_))
        ));
    }

    /// Two-state pumpable model mixing a +1;0 loop with a ±1;10 stochastic
    /// cycle: the payoff optimum puts all mass on the cycle.
    fn pump2_rich() -> Emdp {
        parse_emdp(
            "state s controllable\nstate t stochastic\n\
             trans s -> s update=1 reward=0\n\
             trans s -> t update=0 reward=0\n\
             trans t -> s update=1 reward=10 prob=1/2\n\
             trans t -> s update=-1 reward=10 prob=1/2\n",
        )
        .unwrap()
    }

    #[test]
    fn sp_value_of_rich_cycle_matches_simulation() {
        let e = pump2_rich();
        assert_eq!(classify(&e), Classification::SpEmdp);
        let value = sp_value(&e).unwrap();
        assert_eq!(value, rat_int(5));
        let machine = sp_optimal_strategy(&e).unwrap();
        machine.check(&e).unwrap();
        let report =
            sim::estimate_mp(&e, &machine, &cfg(&e, "s", 2), 40, 20_000, 77).unwrap();
        assert_eq!(report.safety_violations, 0);
        assert!(
            (report.mean - 5.0).abs() < 3.0 * report.stderr + 0.05,
            "mean {} stderr {}",
            report.mean,
            report.stderr
        );
    }

    #[test]
    fn type1_machine_structure() {
        let e = fixtures::pump2_reward();
        let fs = flows::solve_flow(&e, ProgramKind::Payoff).unwrap();
        let core = flows::find_core(&e, &fs).unwrap();
        let machine = type1_strategy(&e, &core).unwrap();
        machine.check(&e).unwrap();
        let StrategyMachine::Type1(t1) = &machine else {
            panic!("expected a type I machine");
        };
        // L = M + max min-pump = 1 + 1 = 2; H = L + |S| + 2|S|²M = 2 + 2 + 8.
        assert_eq!(t1.low, int(2));
        assert_eq!(t1.high, int(12));
        // Started above H: plays the flow strategy (the rewarded self-loop).
        let s = e.state_id("s").unwrap();
        let mem = machine.init(&Configuration::new(s, 20));
        let dist = machine.next(s, &mem).unwrap();
        assert_eq!(e.transition(dist.0[0].trans).dst, s);
        // Started at or below L: first action comes from the pumping strategy.
        let mem_low = machine.init(&Configuration::new(s, 1));
        assert_eq!(mem_low, crate::strategy::Memory::Type1 { low: true });
        // The machine is rejected for non-pumpable models.
        assert!(matches!(
            type2_strategy(&e, &core),
            Err(SynthError::NotApplicable(_))
        ));
    }

    #[test]
    fn type2_machine_on_rich_cycle() {
        let e = pump2_rich();
        let fs = flows::solve_flow(&e, ProgramKind::Payoff).unwrap();
        let core = flows::find_core(&e, &fs).unwrap();
        let Core::TypeII(c1, c2) = &core else {
            panic!("balanced optimum yields a type II core, got {core:?}");
        };
        assert!(c1.trend >= rat_int(0));
        assert!(c2.trend <= rat_int(0));
        let machine = type2_strategy(&e, &core).unwrap();
        machine.check(&e).unwrap();
        let report =
            sim::estimate_mp(&e, &machine, &cfg(&e, "s", 3), 40, 20_000, 5).unwrap();
        assert_eq!(report.safety_violations, 0);
        assert!(
            (report.mean - 5.0).abs() < 3.0 * report.stderr + 0.05,
            "mean {} stderr {}",
            report.mean,
            report.stderr
        );
    }

    #[test]
    fn sp_epsilon_caps_are_monotone_in_epsilon() {
        let e = pump2_rich();
        let caps: Vec<u64> = [rat_int(1), rat(1, 2), rat(1, 4)]
            .iter()
            .map(|eps| sp_stage_cap(&e, eps).unwrap())
            .collect();
        assert!(caps[0] <= caps[1] && caps[1] <= caps[2], "caps {caps:?}");
        let machine = sp_epsilon_strategy(&e, &rat_int(1)).unwrap();
        let StrategyMachine::Type2(t2) = &machine else {
            panic!("expected frozen staged machine");
        };
        assert_eq!(t2.stage_cap, Some(caps[0]));
        // Frozen stage schedule still simulates safely near the value.
        let report =
            sim::estimate_mp(&e, &machine, &cfg(&e, "s", 3), 40, 20_000, 6).unwrap();
        assert_eq!(report.safety_violations, 0);
        assert!(report.mean > 4.0, "mean {}", report.mean);
    }

    #[test]
    fn sp_epsilon_on_type1_is_the_switching_machine() {
        let e = fixtures::pump2_reward();
        let machine = sp_epsilon_strategy(&e, &rat_int(1)).unwrap();
        assert!(matches!(machine, StrategyMachine::Type1(_)));
    }

    #[test]
    fn case_a_on_fig1_propagates_no_safe_state() {
        let e = fixtures::fig1();
        assert!(matches!(
            case_a_strategy(&e, &rat(1, 2)),
            Err(SynthError::Energy(EnergyError::NoSafeState))
        ));
    }

    #[test]
    fn case_a_on_fig2l_certifies_and_simulates() {
        let e = fixtures::fig2l();
        let eps = rat(1, 2);
        let out = case_a_strategy(&e, &eps).unwrap();
        out.machine.check(&e).unwrap();
        // Parameter invariants: weights sum to one, payoff within eps/2,
        // strictly positive mixed trend.
        let total: Rat = out.params.weights.iter().cloned().sum();
        assert_eq!(total, rat_int(1));
        assert!(out.params.mixed_trend.is_positive());
        assert!(out.params.mixed_mp >= &out.params.f_star - &eps / rat_int(2));
        // From the certified height the machine is safe and near-optimal.
        let start = Configuration {
            state: e.state_id("s").unwrap(),
            counter: out.safe_start_level.clone(),
        };
        let report = sim::estimate_mp(&e, &out.machine, &start, 30, 40_000, 11).unwrap();
        assert_eq!(report.safety_violations, 0);
        assert!(
            report.mean >= 4.5 - 3.0 * report.stderr - 0.05,
            "mean {} stderr {} start {}",
            report.mean,
            report.stderr,
            out.safe_start_level
        );
    }

    #[test]
    fn case_a_rejects_balanced_models() {
        assert!(matches!(
            case_a_strategy(&fixtures::fig3(), &rat(1, 2)),
            Err(SynthError::NotApplicable(_))
        ));
    }

    #[test]
    fn case_b_values() {
        let out = case_b_value(&fixtures::fig3()).unwrap();
        assert_eq!(out.value, rat_int(0));
        // All-zero-update loop: trend optimum 0, value is the loop reward.
        let loop3 =
            parse_emdp("state a controllable\ntrans a -> a update=0 reward=3\n").unwrap();
        let out = case_b_value(&loop3).unwrap();
        assert_eq!(out.value, rat_int(3));
        // fig3 with the s self-loop paying 2: stable looping at s pays.
        let text = "state s controllable\nstate t stochastic\n\
                    trans s -> s update=0 reward=2\n\
                    trans s -> t update=0 reward=0\n\
                    trans t -> s update=-1 reward=10 prob=1/2\n\
                    trans t -> s update=1 reward=10 prob=1/2\n";
        let e = parse_emdp(text).unwrap();
        let out = case_b_value(&e).unwrap();
        assert_eq!(out.value, rat_int(2));
        // Not applicable on positive-trend models.
        assert!(matches!(
            case_b_value(&fixtures::fig2l()),
            Err(SynthError::NotApplicable(_))
        ));
    }

    #[test]
    fn limit_values_of_fixtures() {
        let e = fixtures::fig2r();
        let a = e.state_id("a").unwrap();
        assert_eq!(limit_value(&e, a), Some(rat_int(5)));
        let e = fixtures::fig2l();
        let s = e.state_id("s").unwrap();
        assert_eq!(limit_value(&e, s), Some(rat_int(5)));
        let e = fixtures::fig3();
        let s = e.state_id("s").unwrap();
        assert_eq!(limit_value(&e, s), Some(rat_int(0)));
        // Nowhere-safe models have limit value -infinity everywhere.
        assert_eq!(limit_values(&fixtures::fig1()), vec![None, None]);
    }

    #[test]
    fn approx_value_on_fig3_is_zero_at_any_height() {
        let e = fixtures::fig3();
        let report = approx_value(&e, &cfg(&e, "s", 100), &rat(1, 10)).unwrap();
        assert_eq!(report.value, Some(rat_int(0)));
    }

    #[test]
    fn approx_value_of_unsafe_configuration_is_minus_infinity() {
        let e = fixtures::fig3();
        let report = approx_value(&e, &cfg(&e, "t", 0), &rat(1, 10)).unwrap();
        assert_eq!(report.value, None);
        assert_eq!(report.kind, ValueKind::Exact);
        let e = fixtures::fig1();
        let report = approx_value(&e, &cfg(&e, "s", 50), &rat(1, 10)).unwrap();
        assert_eq!(report.value, None);
    }

    #[test]
    fn approx_value_on_fig2l_start_zero() {
        let e = fixtures::fig2l();
        let report = approx_value(&e, &cfg(&e, "s", 0), &rat(1, 2)).unwrap();
        let value = report.value.unwrap();
        assert!(
            value >= rat(9, 2) && value <= rat_int(5),
            "value {value} outside [9/2, 5]"
        );
        // The witness is a real safe strategy achieving the lower bound.
        let witness = report.witness.unwrap();
        witness.check(&e).unwrap();
        let report = sim::estimate_mp(&e, &witness, &cfg(&e, "s", 0), 20, 40_000, 3).unwrap();
        assert_eq!(report.safety_violations, 0);
        assert!(report.mean > 3.8, "mean {}", report.mean);
    }

    #[test]
    fn approx_value_is_exact_on_sp_models() {
        let e = pump2_rich();
        let report = approx_value(&e, &cfg(&e, "s", 0), &rat(1, 10)).unwrap();
        assert_eq!(report.kind, ValueKind::Exact);
        assert_eq!(report.value, Some(rat_int(5)));
    }

    #[test]
    fn epsilon_strategy_rejects_unsafe_starts() {
        let e = fixtures::fig3();
        assert!(matches!(
            epsilon_strategy(&e, &cfg(&e, "t", 0), &rat_int(1)),
            Err(SynthError::UnsafeStart)
        ));
    }

    #[test]
    fn epsilon_strategy_delegates_on_sp_models() {
        let e = pump2_rich();
        let machine = epsilon_strategy(&e, &cfg(&e, "s", 0), &rat_int(1)).unwrap();
        assert!(matches!(machine, StrategyMachine::Type2(_)));
    }

    #[test]
    fn epsilon_strategy_fig2l_low_start() {
        let e = fixtures::fig2l();
        let machine = epsilon_strategy(&e, &cfg(&e, "s", 0), &rat_int(1)).unwrap();
        machine.check(&e).unwrap();
        let report =
            sim::estimate_mp(&e, &machine, &cfg(&e, "s", 0), 50, 50_000, 21).unwrap();
        assert_eq!(report.safety_violations, 0);
        assert!(
            report.mean >= 4.0 - 3.0 * report.stderr,
            "mean {} stderr {}",
            report.mean,
            report.stderr
        );
    }

    #[test]
    fn epsilon_strategy_fig2r_low_start() {
        let e = fixtures::fig2r();
        let machine = epsilon_strategy(&e, &cfg(&e, "a", 0), &rat(1, 2)).unwrap();
        machine.check(&e).unwrap();
        let report =
            sim::estimate_mp(&e, &machine, &cfg(&e, "a", 0), 50, 50_000, 22).unwrap();
        assert_eq!(report.safety_violations, 0);
        assert!(
            report.mean >= 4.2 - 3.0 * report.stderr,
            "mean {} stderr {}",
            report.mean,
            report.stderr
        );
    }

    #[test]
    fn epsilon_strategy_fig2r_high_start_uses_composite() {
        let e = fixtures::fig2r();
        let general = general_machine(&e, &rat(1, 2)).unwrap();
        let start = Configuration {
            state: e.state_id("a").unwrap(),
            counter: general.required.clone(),
        };
        let machine = epsilon_strategy(&e, &start, &rat(1, 2)).unwrap();
        assert!(matches!(machine, StrategyMachine::Composite(_)));
        machine.check(&e).unwrap();
        let report = sim::estimate_mp(&e, &machine, &start, 40, 40_000, 23).unwrap();
        assert_eq!(report.safety_violations, 0);
        assert!(
            report.mean >= 4.5 - 3.0 * report.stderr - 0.05,
            "mean {} stderr {}",
            report.mean,
            report.stderr
        );
    }

    #[test]
    fn monotonicity_of_approx_values_in_the_counter() {
        let e = fixtures::fig2l();
        let eps = rat(1, 10);
        let two_eps = rat(1, 5);
        let mut prev: Option<Rat> = None;
        for n in [0i64, 2, 5, 9] {
            let v = approx_value(&e, &cfg(&e, "s", n), &eps)
                .unwrap()
                .value
                .unwrap();
            if let Some(p) = prev {
                assert!(p <= &v + &two_eps, "monotonicity violated: {p} vs {v}");
            }
            prev = Some(v);
        }
    }
}
