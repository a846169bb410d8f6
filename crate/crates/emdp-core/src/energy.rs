//! Energy-game layer: minimal safe levels, minimal pumping levels, memoryless
//! safe and globally pumping strategies, and the safety-to-pumpability
//! reduction gadget.
//!
//! Safety treats stochastic states as adversarial, since a violation is
//! witnessed by a finite prefix. Minimal safe levels come from progress-measure
//! lifting with the standard `(|S|-1)·M` cutoff. Minimal pumping levels reduce
//! to an energy-Büchi condition on a gadget that routes every transition
//! through a controllable detour with a `-1` decrement pair: a configuration is
//! pumpable iff a safe strategy can take the decrement infinitely often with
//! probability 1. That condition is solved by interleaving the safety
//! restriction with an almost-sure Büchi attractor on the counter-bounded
//! configuration lattice, cut off at the `3·|S|·M` bound.

use crate::model::{Emdp, StateId, StateKind, TransId, Transition};
use crate::numeric::{Int, Rat};
use crate::strategy::{MemorylessTable, StrategyMachine};
use num_traits::{One, Signed, Zero};
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Level {
    Finite(Int),
    Infinite,
}

impl Level {
    pub fn is_finite(&self) -> bool {
        matches!(self, Level::Finite(_))
    }

    pub fn as_finite(&self) -> Option<&Int> {
        match self {
            Level::Finite(v) => Some(v),
            Level::Infinite => None,
        }
    }
}

impl PartialOrd for Level {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Level {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        match (self, other) {
            (Level::Finite(a), Level::Finite(b)) => a.cmp(b),
            (Level::Finite(_), Level::Infinite) => std::cmp::Ordering::Less,
            (Level::Infinite, Level::Finite(_)) => std::cmp::Ordering::Greater,
            (Level::Infinite, Level::Infinite) => std::cmp::Ordering::Equal,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Finite(v) => write!(f, "{v}"),
            Level::Infinite => f.write_str("inf"),
        }
    }
}

/// Per-state minimal energy levels, `inf` where no witness exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelMap {
    values: Vec<Level>,
}

impl LevelMap {
    pub fn get(&self, s: StateId) -> &Level {
        &self.values[s.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (StateId, &Level)> {
        self.values.iter().enumerate().map(|(i, l)| (StateId(i), l))
    }

    pub fn all_infinite(&self) -> bool {
        self.values.iter().all(|l| !l.is_finite())
    }

    pub fn any_finite(&self) -> bool {
        self.values.iter().any(Level::is_finite)
    }

    pub fn max_finite(&self) -> Option<Int> {
        self.values
            .iter()
            .filter_map(Level::as_finite)
            .max()
            .cloned()
    }

    /// Is the configuration `state(counter)` at or above this map's level?
    pub fn admits(&self, s: StateId, counter: &Int) -> bool {
        match &self.values[s.0] {
            Level::Finite(v) => counter >= v,
            Level::Infinite => false,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum EnergyError {
    #[error("no state has a safe configuration")]
    NoSafeState,
    #[error("no state has a pumpable configuration")]
    NoPumpableState,
    #[error("pumping strategy construction failed: {0}")]
    PumpConstruction(String),
}

/// Minimal safe initial credits, treating stochastic states as adversarial.
/// Progress-measure lifting over `{0, …, (|S|-1)·M} ∪ {inf}`.
pub fn min_safe(e: &Emdp) -> LevelMap {
    let bound = (Int::from(e.state_count() as u64) - Int::one()) * e.max_update();
    let mut map = vec![Level::Finite(Int::zero()); e.state_count()];
    // Required credit before taking transition t, given the successor's level.
    let need = |map: &[Level], t: &Transition| -> Level {
        match &map[t.dst.0] {
            Level::Infinite => Level::Infinite,
            Level::Finite(v) => Level::Finite((v - &t.update).max(Int::zero())),
        }
    };
    loop {
        let mut changed = false;
        for s in e.state_ids() {
            let requirement = match e.kind(s) {
                StateKind::Controllable => e
                    .out(s)
                    .iter()
                    .map(|&t| need(&map, e.transition(t)))
                    .min()
                    .expect("total"),
                StateKind::Stochastic => e
                    .out(s)
                    .iter()
                    .map(|&t| need(&map, e.transition(t)))
                    .max()
                    .expect("total"),
            };
            let requirement = match requirement {
                Level::Finite(v) if v > bound => Level::Infinite,
                other => other,
            };
            if requirement > map[s.0] {
                map[s.0] = requirement;
                changed = true;
            }
        }
        if !changed {
            return LevelMap { values: map };
        }
    }
}

/// Memoryless deterministic choices consistent with a safe level map: every
/// chosen transition satisfies `level(src) + update >= level(dst)`. States with
/// infinite level fall back to their first transition.
pub fn safe_table(e: &Emdp, levels: &LevelMap) -> MemorylessTable {
    let choices = e
        .state_ids()
        .map(|s| {
            if !e.is_controllable(s) {
                return None;
            }
            let pick = match levels.get(s) {
                Level::Infinite => None,
                Level::Finite(v) => e.out(s).iter().copied().find(|&t| {
                    let tr = e.transition(t);
                    match levels.get(tr.dst) {
                        Level::Infinite => false,
                        Level::Finite(w) => &(v + &tr.update) >= w,
                    }
                }),
            };
            Some(pick.unwrap_or(e.out(s)[0]))
        })
        .collect();
    MemorylessTable::deterministic(choices)
}

/// Memoryless deterministic strategy safe in every configuration `s(n)` with
/// `n >= min_safe(s)`.
pub fn safe_strategy(e: &Emdp) -> Result<StrategyMachine, EnergyError> {
    let levels = min_safe(e);
    if levels.all_infinite() {
        return Err(EnergyError::NoSafeState);
    }
    Ok(StrategyMachine::Memoryless(safe_table(e, &levels)))
}

/// The pumpability gadget of the minimal-credit reduction: every transition
/// `(s, t)` is routed through fresh controllable states `in_e`, `dec_e` with
/// `s -> in_e` carrying the original update, `in_e -> t` free, and a decrement
/// pair `in_e -> dec_e` (update `-1`), `dec_e -> in_e`. Visiting some `dec_e`
/// infinitely often while staying safe is equivalent to pumping.
struct PumpGadget {
    model: Emdp,
    /// Gadget states that are decrement targets of the Büchi condition.
    buchi: Vec<bool>,
}

fn pump_gadget(e: &Emdp) -> PumpGadget {
    let mut names: BTreeSet<String> = e.state_ids().map(|s| e.name(s).to_string()).collect();
    let mut fresh = |base: String| -> String {
        let mut name = base;
        while names.contains(&name) {
            name.insert(0, '_');
        }
        names.insert(name.clone());
        name
    };
    let mut states: Vec<(String, StateKind)> = e
        .state_ids()
        .map(|s| (e.name(s).to_string(), e.kind(s)))
        .collect();
    let mut transitions = Vec::new();
    let mut buchi = vec![false; e.state_count() + 2 * e.trans_count()];
    for t in e.trans_ids() {
        let tr = e.transition(t);
        let via = StateId(states.len());
        states.push((fresh(format!("via_{}", t.0)), StateKind::Controllable));
        let dec = StateId(states.len());
        states.push((fresh(format!("dec_{}", t.0)), StateKind::Controllable));
        buchi[dec.0] = true;
        transitions.push(Transition {
            src: tr.src,
            dst: via,
            update: tr.update.clone(),
            reward: tr.reward.clone(),
            prob: tr.prob.clone(),
        });
        transitions.push(Transition {
            src: via,
            dst: tr.dst,
            update: Int::zero(),
            reward: Rat::zero(),
            prob: None,
        });
        transitions.push(Transition {
            src: via,
            dst: dec,
            update: -Int::one(),
            reward: Rat::zero(),
            prob: None,
        });
        transitions.push(Transition {
            src: dec,
            dst: via,
            update: Int::zero(),
            reward: Rat::zero(),
            prob: None,
        });
    }
    let model = Emdp::new(states, transitions).expect("gadget is well formed");
    PumpGadget { model, buchi }
}

/// Minimal credit per state for "stay safe and visit a target state infinitely
/// often with probability 1", solved on the counter-clamped configuration
/// lattice: alternate the almost-sure Büchi attractor with the implicit safety
/// restriction until a fixpoint, then read off the least surviving level.
fn energy_buchi_levels(e: &Emdp, target: &[bool], cap: u64) -> Vec<Level> {
    let n = e.state_count();
    let width = cap as usize + 1;
    let ncfg = n * width;
    let idx = |s: usize, lev: u64| s * width + lev as usize;
    // succ[c] lists successor configs; None marks a dead (negative) branch.
    let mut succ: Vec<Vec<Option<usize>>> = vec![Vec::new(); ncfg];
    for s in e.state_ids() {
        for lev in 0..=cap {
            let c = idx(s.0, lev);
            succ[c] = e
                .out(s)
                .iter()
                .map(|&t| {
                    let next = Int::from(lev) + &e.transition(t).update;
                    if next.is_negative() {
                        None
                    } else {
                        let clamped = next.min(Int::from(cap));
                        Some(idx(
                            e.transition(t).dst.0,
                            u64::try_from(&clamped).expect("clamped level fits"),
                        ))
                    }
                })
                .collect();
        }
    }
    let controllable: Vec<bool> = (0..n).map(|s| e.is_controllable(StateId(s))).collect();
    let cfg_target: Vec<bool> = (0..ncfg).map(|c| target[c / width]).collect();
    let cfg_state = |c: usize| c / width;

    // Almost-sure reach of `goal ∩ good` within `good`: the nested fixpoint
    // where controllable configs need some successor in the growing set and
    // stochastic configs additionally need all successors alive.
    let value1 = |good: &mut Vec<bool>, goal: &dyn Fn(usize) -> bool| loop {
        let mut z = vec![false; ncfg];
        for c in 0..ncfg {
            if good[c] && goal(c) {
                // Goal configs must also be able to continue inside `good`.
                let viable = if controllable[cfg_state(c)] {
                    succ[c].iter().flatten().any(|&d| good[d])
                } else {
                    succ[c].iter().all(|d| d.is_some_and(|d| good[d]))
                };
                if viable {
                    z[c] = true;
                }
            }
        }
        loop {
            let mut grew = false;
            for c in 0..ncfg {
                if z[c] || !good[c] {
                    continue;
                }
                let ok = if controllable[cfg_state(c)] {
                    succ[c].iter().flatten().any(|&d| z[d])
                } else {
                    succ[c].iter().all(|d| d.is_some_and(|d| good[d]))
                        && succ[c].iter().flatten().any(|&d| z[d])
                };
                if ok {
                    z[c] = true;
                    grew = true;
                }
            }
            if !grew {
                break;
            }
        }
        if z == *good {
            break;
        }
        *good = z;
    };

    let mut winning: Vec<bool> = vec![true; ncfg];
    loop {
        let before = winning.clone();
        let goal_set: Vec<bool> = (0..ncfg).map(|c| before[c] && cfg_target[c]).collect();
        value1(&mut winning, &|c| goal_set[c]);
        if winning == before {
            break;
        }
    }

    (0..n)
        .map(|s| {
            (0..=cap)
                .find(|&lev| winning[idx(s, lev)])
                .map(|lev| Level::Finite(Int::from(lev)))
                .unwrap_or(Level::Infinite)
        })
        .collect()
}

/// Minimal pumping credits: the least `n` per state such that `s(n)` admits a
/// safe strategy whose running level supremum is almost surely infinite.
pub fn min_pump(e: &Emdp) -> LevelMap {
    let gadget = pump_gadget(e);
    let m_orig = e.max_update();
    let m_gadget = gadget.model.max_update().max(Int::one());
    // Sound cutoff: the pumping bound for original states plus headroom for
    // one sweep through the gadget states.
    let cap_int = Int::from(3u32) * Int::from(e.state_count() as u64) * &m_orig
        + Int::from(gadget.model.state_count() as u64) * &m_gadget
        + Int::from(2u32);
    let cap = u64::try_from(&cap_int).expect("pumping analysis cutoff exceeds supported range");
    let levels = energy_buchi_levels(&gadget.model, &gadget.buchi, cap);
    LevelMap {
        values: levels[..e.state_count()].to_vec(),
    }
}

/// The sub-model of pumpable states with only level-consistent transitions:
/// `min_pump(src) + update >= min_pump(dst)`. Every cycle in it has
/// non-negative total update.
fn pump_restriction(e: &Emdp, pump: &LevelMap) -> Result<(Emdp, Vec<Option<StateId>>, Vec<TransId>), EnergyError> {
    e.restrict(
        |s| pump.get(s).is_finite(),
        |t| {
            let tr = e.transition(t);
            match (pump.get(tr.src), pump.get(tr.dst)) {
                (Level::Finite(a), Level::Finite(b)) => &(a + &tr.update) >= b,
                _ => false,
            }
        },
    )
    .map_err(|err| EnergyError::PumpConstruction(format!("restriction invalid: {err}")))
}

/// Memoryless globally pumping strategy: level-consistent choices that steer
/// every run toward a set of disjoint positive cycles and then traverse them.
pub fn pumping_table(e: &Emdp) -> Result<MemorylessTable, EnergyError> {
    let pump = min_pump(e);
    if pump.all_infinite() {
        return Err(EnergyError::NoPumpableState);
    }
    let (sub, old_to_new, trans_back) = pump_restriction(e, &pump)?;
    // Potentials per strongly connected component: shortest update-sums from a
    // component root. Edges with positive slack witness positive cycles.
    let edges: Vec<(usize, usize)> = sub
        .transitions()
        .iter()
        .map(|t| (t.src.0, t.dst.0))
        .collect();
    let comps = crate::graphs::sccs(sub.state_count(), &edges);
    let comp_of = {
        let mut map = vec![usize::MAX; sub.state_count()];
        for (ci, comp) in comps.iter().enumerate() {
            for &s in comp {
                map[s] = ci;
            }
        }
        map
    };
    let mut cycle_choice: Vec<Option<TransId>> = vec![None; sub.state_count()];
    let mut cycle_states: BTreeSet<StateId> = BTreeSet::new();
    for comp in &comps {
        if let Some((cycle_trans, states)) = positive_cycle(&sub, comp, &comp_of) {
            for (s, t) in cycle_trans {
                if sub.is_controllable(s) {
                    cycle_choice[s.0] = Some(t);
                }
            }
            cycle_states.extend(states);
        }
    }
    if cycle_states.is_empty() {
        return Err(EnergyError::PumpConstruction(
            "no positive cycle among pumpable states".into(),
        ));
    }
    let reach = crate::graphs::reach_strategy(&sub, &cycle_states).map_err(|err| {
        EnergyError::PumpConstruction(format!("positive cycles not almost-surely reachable: {err}"))
    })?;
    // Assemble: on-cycle states follow their cycle, everything else steers
    // toward the cycles; translate back to the original transition ids.
    let choices: Vec<Option<TransId>> = e
        .state_ids()
        .map(|s| {
            if !e.is_controllable(s) {
                return None;
            }
            let sub_s = old_to_new[s.0]?;
            let pick = cycle_choice[sub_s.0].or(reach.choices[sub_s.0]).or_else(|| {
                // Inside the target set a controllable state may have gotten a
                // fallback; any consistent transition keeps it safe.
                sub.out(sub_s).first().copied()
            })?;
            Some(trans_back[pick.0])
        })
        .collect();
    Ok(MemorylessTable::deterministic(choices))
}

/// Memoryless globally pumping strategy, pumping in every pumpable
/// configuration.
pub fn pumping_strategy(e: &Emdp) -> Result<StrategyMachine, EnergyError> {
    Ok(StrategyMachine::Memoryless(pumping_table(e)?))
}

/// One simple positive-update cycle within the component, if any: a positive
/// slack edge closed with a shortest-potential path. Returns the per-state
/// chosen transitions and the cycle's states.
fn positive_cycle(
    sub: &Emdp,
    comp: &[usize],
    comp_of: &[usize],
) -> Option<(Vec<(StateId, TransId)>, Vec<StateId>)> {
    let inside = |s: StateId| comp.binary_search(&s.0).is_ok();
    let ci = comp_of[comp[0]];
    // Bellman-Ford potentials from the first component state: phi(v) = least
    // update-sum over component paths root -> v. No negative cycles exist, so
    // |comp| rounds converge.
    let root = StateId(comp[0]);
    let mut phi: Vec<Option<Int>> = vec![None; sub.state_count()];
    phi[root.0] = Some(Int::zero());
    for _ in 0..comp.len() {
        let mut changed = false;
        for t in sub.trans_ids() {
            let tr = sub.transition(t);
            if comp_of[tr.src.0] != ci || comp_of[tr.dst.0] != ci {
                continue;
            }
            if let Some(src_phi) = phi[tr.src.0].clone() {
                let candidate = src_phi + &tr.update;
                if phi[tr.dst.0].as_ref().is_none_or(|old| &candidate < old) {
                    phi[tr.dst.0] = Some(candidate);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    // Positive slack edge: update + phi(src) - phi(dst) > 0.
    let slack_edge = sub.trans_ids().find(|&t| {
        let tr = sub.transition(t);
        comp_of[tr.src.0] == ci && comp_of[tr.dst.0] == ci && {
            match (&phi[tr.src.0], &phi[tr.dst.0]) {
                (Some(a), Some(b)) => (&tr.update + a - b).is_positive(),
                _ => false,
            }
        }
    })?;
    let e_tr = sub.transition(slack_edge);
    let (u, v) = (e_tr.src, e_tr.dst);
    // Simple path v -> u inside the component (BFS over component edges).
    let mut prev: Vec<Option<(StateId, TransId)>> = vec![None; sub.state_count()];
    let mut queue = std::collections::VecDeque::from([v]);
    let mut seen = vec![false; sub.state_count()];
    seen[v.0] = true;
    while let Some(x) = queue.pop_front() {
        if x == u {
            break;
        }
        for &t in sub.out(x) {
            let dst = sub.transition(t).dst;
            if inside(dst) && !seen[dst.0] {
                seen[dst.0] = true;
                prev[dst.0] = Some((x, t));
                queue.push_back(dst);
            }
        }
    }
    let mut cycle = vec![(u, slack_edge)];
    let mut states = vec![u];
    if u != v {
        if !seen[u.0] {
            return None;
        }
        let mut here = u;
        while here != v {
            let (p, t) = prev[here.0].clone().expect("path reconstructed");
            cycle.push((p, t));
            states.push(p);
            here = p;
        }
    }
    Some((cycle, states))
}

/// The safety-reduction gadget: a pumpable model in which a configuration is
/// safe iff it was safe in the input. Every transition `(s, s')` is re-routed
/// through a fresh stochastic state that either pumps itself by `M+1` or moves
/// on, each with probability 1/2.
pub fn safety_gadget(e: &Emdp) -> Emdp {
    let mut names: BTreeSet<String> = e.state_ids().map(|s| e.name(s).to_string()).collect();
    let mut fresh = |base: String| -> String {
        let mut name = base;
        while names.contains(&name) {
            name.insert(0, '_');
        }
        names.insert(name.clone());
        name
    };
    let pump_update = e.max_update() + Int::one();
    let mut states: Vec<(String, StateKind)> = e
        .state_ids()
        .map(|s| (e.name(s).to_string(), e.kind(s)))
        .collect();
    let mut transitions = Vec::new();
    let half = Rat::new(Int::one(), Int::from(2u32));
    for t in e.trans_ids() {
        let tr = e.transition(t);
        let hop = StateId(states.len());
        states.push((fresh(format!("hop_{}", t.0)), StateKind::Stochastic));
        transitions.push(Transition {
            src: tr.src,
            dst: hop,
            update: tr.update.clone(),
            reward: tr.reward.clone(),
            prob: tr.prob.clone(),
        });
        transitions.push(Transition {
            src: hop,
            dst: hop,
            update: pump_update.clone(),
            reward: Rat::zero(),
            prob: Some(half.clone()),
        });
        transitions.push(Transition {
            src: hop,
            dst: tr.dst,
            update: Int::zero(),
            reward: Rat::zero(),
            prob: Some(half.clone()),
        });
    }
    Emdp::new(states, transitions).expect("gadget is well formed")
}
