//! Finite mean-payoff MDPs and the two constructions that produce them from
//! energy models: the counter-bounded unfolding with a penalizing sink, and
//! the end-component condensation.
//!
//! `solve_mean_payoff` runs exact multichain policy iteration (gain
//! improvement first, bias improvement among gain-tight actions, switch only
//! on strict improvement). The classical gain/bias linear program is exposed
//! as [`gains_via_lp`] and cross-checked against policy iteration in tests;
//! the iteration is the production engine because counter unfoldings grow to
//! thousands of states, where the dense exact tableau is hopeless but sparse
//! policy evaluation stays cheap.

use crate::chain::{self, ChainRows};
use crate::graphs::{mecs, Mec};
use crate::model::{Emdp, StateId, StateKind, TransId};
use crate::numeric::{Int, Rat};
use crate::ratlp::{Constraint, LinearProgram, LpOutcome, Rel, Sense};
use crate::strategy::{MemorylessTable, StrategyMachine};
use num_traits::{One, Signed, Zero};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiniteTransition {
    pub src: StateId,
    pub dst: StateId,
    pub reward: Rat,
    pub prob: Option<Rat>,
}

/// Plain finite-state mean-payoff MDP: same totality and normalization rules
/// as the energy model, no counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiniteMdp {
    names: Vec<String>,
    kinds: Vec<StateKind>,
    transitions: Vec<FiniteTransition>,
    out: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum FinError {
    #[error("invalid finite MDP: {0}")]
    Invalid(String),
    #[error("bad unfolding bounds: {0}")]
    BadBounds(String),
}

impl FiniteMdp {
    pub fn new(
        states: Vec<(String, StateKind)>,
        transitions: Vec<FiniteTransition>,
    ) -> Result<Self, FinError> {
        let n = states.len();
        let mut out = vec![Vec::new(); n];
        for (i, t) in transitions.iter().enumerate() {
            if t.src.0 >= n || t.dst.0 >= n {
                return Err(FinError::Invalid("transition endpoint out of range".into()));
            }
            out[t.src.0].push(i);
        }
        let (names, kinds): (Vec<_>, Vec<_>) = states.into_iter().unzip();
        for s in 0..n {
            if out[s].is_empty() {
                return Err(FinError::Invalid(format!("state `{}` has no transition", names[s])));
            }
            match kinds[s] {
                StateKind::Controllable => {
                    if out[s].iter().any(|&t| transitions[t].prob.is_some()) {
                        return Err(FinError::Invalid(format!(
                            "controllable `{}` carries probabilities",
                            names[s]
                        )));
                    }
                }
                StateKind::Stochastic => {
                    let mut sum = Rat::zero();
                    for &t in &out[s] {
                        match &transitions[t].prob {
                            Some(p) if p.is_positive() => sum += p,
                            _ => {
                                return Err(FinError::Invalid(format!(
                                    "stochastic `{}` needs positive probabilities",
                                    names[s]
                                )))
                            }
                        }
                    }
                    if !sum.is_one() {
                        return Err(FinError::Invalid(format!(
                            "probabilities at `{}` sum to {sum}",
                            names[s]
                        )));
                    }
                }
            }
        }
        Ok(FiniteMdp {
            names,
            kinds,
            transitions,
            out,
        })
    }

    pub fn state_count(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, s: StateId) -> &str {
        &self.names[s.0]
    }

    pub fn kind(&self, s: StateId) -> StateKind {
        self.kinds[s.0]
    }

    pub fn is_controllable(&self, s: StateId) -> bool {
        self.kinds[s.0] == StateKind::Controllable
    }

    pub fn out(&self, s: StateId) -> &[usize] {
        &self.out[s.0]
    }

    pub fn transition(&self, t: usize) -> &FiniteTransition {
        &self.transitions[t]
    }

    pub fn transitions(&self) -> &[FiniteTransition] {
        &self.transitions
    }

    pub fn state_ids(&self) -> impl Iterator<Item = StateId> {
        (0..self.names.len()).map(StateId)
    }

    /// Chain rows and per-state expected one-step rewards under a policy
    /// (choice of outgoing transition per controllable state).
    pub fn induced_chain(&self, policy: &[Option<usize>]) -> (ChainRows, Vec<Rat>) {
        let mut rows = Vec::with_capacity(self.state_count());
        let mut rewards = Vec::with_capacity(self.state_count());
        for s in self.state_ids() {
            match self.kinds[s.0] {
                StateKind::Controllable => {
                    let t = policy[s.0].expect("policy must cover controllable states");
                    let tr = &self.transitions[t];
                    rows.push(vec![(tr.dst.0, Rat::one())]);
                    rewards.push(tr.reward.clone());
                }
                StateKind::Stochastic => {
                    let mut row = Vec::new();
                    let mut reward = Rat::zero();
                    for &t in &self.out[s.0] {
                        let tr = &self.transitions[t];
                        let p = tr.prob.clone().expect("validated");
                        reward += &p * &tr.reward;
                        row.push((tr.dst.0, p));
                    }
                    rows.push(row);
                    rewards.push(reward);
                }
            }
        }
        (rows, rewards)
    }
}

/// Optimal mean-payoff values with a memoryless deterministic witness.
#[derive(Debug, Clone)]
pub struct MeanPayoffResult {
    pub values: Vec<Rat>,
    pub policy: Vec<Option<usize>>,
    pub strategy: StrategyMachine,
}

/// Exact multichain policy iteration.
pub fn solve_mean_payoff(m: &FiniteMdp) -> MeanPayoffResult {
    let mut policy: Vec<Option<usize>> = m
        .state_ids()
        .map(|s| {
            if m.is_controllable(s) {
                Some(m.out(s)[0])
            } else {
                None
            }
        })
        .collect();
    let mut iterations = 0usize;
    loop {
        iterations += 1;
        if std::env::var("EMDP_PI_DEBUG").is_ok() {
            eprintln!("PI iteration {iterations}: policy {policy:?}");
        }
        assert!(
            iterations <= 1 << 20,
            "policy iteration failed to terminate"
        );
        let (rows, rewards) = m.induced_chain(&policy);
        let gb = chain::gain_bias(&rows, &rewards);
        let mut improved = false;
        // Gain improvement pass.
        for s in m.state_ids() {
            if !m.is_controllable(s) {
                continue;
            }
            let current = policy[s.0].unwrap();
            let current_gain = &gb.gain[m.transition(current).dst.0];
            let best = m
                .out(s)
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    gb.gain[m.transition(a).dst.0].cmp(&gb.gain[m.transition(b).dst.0])
                })
                .unwrap();
            if &gb.gain[m.transition(best).dst.0] > current_gain {
                // Lowest-index argmax keeps the iteration deterministic.
                let target = gb.gain[m.transition(best).dst.0].clone();
                let pick = m
                    .out(s)
                    .iter()
                    .copied()
                    .find(|&t| gb.gain[m.transition(t).dst.0] == target)
                    .unwrap();
                policy[s.0] = Some(pick);
                improved = true;
            }
        }
        if improved {
            continue;
        }
        // Bias improvement among gain-tight actions.
        for s in m.state_ids() {
            if !m.is_controllable(s) {
                continue;
            }
            let current = policy[s.0].unwrap();
            let value = |t: usize| -> Rat {
                let tr = m.transition(t);
                &tr.reward + &gb.bias[tr.dst.0]
            };
            let current_value = value(current);
            let gain_here = &gb.gain[s.0];
            let mut best_t = current;
            let mut best_value = current_value;
            for &t in m.out(s) {
                if &gb.gain[m.transition(t).dst.0] != gain_here {
                    continue;
                }
                let v = value(t);
                if v > best_value {
                    best_value = v;
                    best_t = t;
                }
            }
            if best_t != current {
                policy[s.0] = Some(best_t);
                improved = true;
            }
        }
        if !improved {
            return MeanPayoffResult {
                values: gb.gain,
                strategy: StrategyMachine::Memoryless(MemorylessTable::deterministic(
                    policy.iter().map(|c| c.map(crate::model::TransId)).collect(),
                )),
                policy,
            };
        }
    }
}

/// The classical multichain gain/bias linear program: minimize Σ g subject to
/// `g(s) >= Σ p(a) g` and `g(s) + h(s) >= r(a) + Σ p(a) h` for every action.
/// Unconstrained variables are split into positive parts. Returns the program
/// and the per-state optimal gains.
pub fn mean_payoff_lp(m: &FiniteMdp) -> LinearProgram {
    let n = m.state_count();
    // Variable layout: g+ | g- | h+ | h-.
    let mut variables = Vec::with_capacity(4 * n);
    for prefix in ["gp", "gm", "hp", "hm"] {
        for s in m.state_ids() {
            variables.push(format!("{prefix}_{}", m.name(s)));
        }
    }
    let gp = |s: usize| s;
    let gm = |s: usize| n + s;
    let hp = |s: usize| 2 * n + s;
    let hm = |s: usize| 3 * n + s;
    let mut constraints = Vec::new();
    let mut actions: Vec<(usize, Vec<(usize, Rat)>, Rat)> = Vec::new();
    for s in m.state_ids() {
        match m.kind(s) {
            StateKind::Controllable => {
                for &t in m.out(s) {
                    let tr = m.transition(t);
                    actions.push((s.0, vec![(tr.dst.0, Rat::one())], tr.reward.clone()));
                }
            }
            StateKind::Stochastic => {
                let mut dist = Vec::new();
                let mut reward = Rat::zero();
                for &t in m.out(s) {
                    let tr = m.transition(t);
                    let p = tr.prob.clone().unwrap();
                    reward += &p * &tr.reward;
                    dist.push((tr.dst.0, p));
                }
                actions.push((s.0, dist, reward));
            }
        }
    }
    for (s, dist, reward) in &actions {
        // g(s) - Σ p g(t) >= 0
        let mut row = vec![Rat::zero(); 4 * n];
        row[gp(*s)] += Rat::one();
        row[gm(*s)] -= Rat::one();
        for (t, p) in dist {
            row[gp(*t)] -= p;
            row[gm(*t)] += p;
        }
        constraints.push(Constraint {
            coeffs: row,
            rel: Rel::Ge,
            rhs: Rat::zero(),
        });
        // g(s) + h(s) - Σ p h(t) >= r
        let mut row = vec![Rat::zero(); 4 * n];
        row[gp(*s)] += Rat::one();
        row[gm(*s)] -= Rat::one();
        row[hp(*s)] += Rat::one();
        row[hm(*s)] -= Rat::one();
        for (t, p) in dist {
            row[hp(*t)] -= p;
            row[hm(*t)] += p;
        }
        constraints.push(Constraint {
            coeffs: row,
            rel: Rel::Ge,
            rhs: reward.clone(),
        });
    }
    let mut objective = vec![Rat::zero(); 4 * n];
    for s in 0..n {
        objective[gp(s)] = Rat::one();
        objective[gm(s)] = -Rat::one();
    }
    LinearProgram::new(variables, Sense::Min, objective, constraints).expect("well formed")
}

/// Optimal gains via the linear program; the test-suite oracle for
/// [`solve_mean_payoff`].
pub fn gains_via_lp(m: &FiniteMdp) -> Vec<Rat> {
    let lp = mean_payoff_lp(m);
    match crate::ratlp::solve_lp(&lp) {
        LpOutcome::Optimal { assignment, .. } => {
            let n = m.state_count();
            (0..n).map(|s| &assignment[s] - &assignment[n + s]).collect()
        }
        other => panic!("gain/bias program must be solvable, got {other:?}"),
    }
}

/// Mapping between configurations of an energy model and states of its
/// counter-bounded unfolding.
#[derive(Debug, Clone)]
pub struct UnfoldMap {
    pub low: Int,
    pub high: Int,
    pub sink: StateId,
    width: usize,
    states: usize,
}

impl UnfoldMap {
    pub fn state_of(&self, s: StateId, counter: &Int) -> Option<StateId> {
        if counter < &self.low || counter > &self.high {
            return None;
        }
        let offset = usize::try_from(&(counter - &self.low)).ok()?;
        Some(StateId(s.0 * self.width + offset))
    }

    pub fn config_of(&self, product: StateId) -> Option<(StateId, Int)> {
        if product == self.sink || product.0 >= self.states {
            return None;
        }
        let s = product.0 / self.width;
        let offset = product.0 % self.width;
        Some((StateId(s), &self.low + Int::from(offset as u64)))
    }
}

/// Product MDP over configurations with counters in `[low, high]`; transitions
/// crossing either bound lead to an absorbing sink whose self-loop reward must
/// undercut every model reward.
pub fn unfold(
    e: &Emdp,
    low: &Int,
    high: &Int,
    sink_reward: &Rat,
) -> Result<(FiniteMdp, UnfoldMap), FinError> {
    if low > high {
        return Err(FinError::BadBounds(format!("low {low} exceeds high {high}")));
    }
    if sink_reward >= &e.min_reward() {
        return Err(FinError::BadBounds(format!(
            "sink reward {sink_reward} must undercut the minimal reward {}",
            e.min_reward()
        )));
    }
    let width = usize::try_from(&(high - low + Int::one()))
        .map_err(|_| FinError::BadBounds("counter window too large".into()))?;
    let n = e.state_count();
    let mut states: Vec<(String, StateKind)> = Vec::with_capacity(n * width + 1);
    for s in e.state_ids() {
        for k in 0..width {
            states.push((format!("{}_l{}", e.name(s), k), e.kind(s)));
        }
    }
    let sink = StateId(states.len());
    states.push(("sink".into(), StateKind::Controllable));
    let map = UnfoldMap {
        low: low.clone(),
        high: high.clone(),
        sink,
        width,
        states: n * width,
    };
    let mut transitions = Vec::new();
    for s in e.state_ids() {
        for k in 0..width {
            let src = StateId(s.0 * width + k);
            let level = low + Int::from(k as u64);
            for &t in e.out(s) {
                let tr = e.transition(t);
                let next = &level + &tr.update;
                let dst = map.state_of(tr.dst, &next).unwrap_or(sink);
                transitions.push(FiniteTransition {
                    src,
                    dst,
                    reward: tr.reward.clone(),
                    prob: tr.prob.clone(),
                });
            }
        }
    }
    transitions.push(FiniteTransition {
        src: sink,
        dst: sink,
        reward: sink_reward.clone(),
        prob: None,
    });
    let mdp = FiniteMdp::new(states, transitions)?;
    Ok((mdp, map))
}

/// Result of the end-component condensation.
pub struct Condensation {
    pub mdp: FiniteMdp,
    /// `ŝ`: model state -> condensation state.
    pub hat: Vec<StateId>,
    /// Fresh controllable state per end component.
    pub mec_state: Vec<StateId>,
    pub components: Vec<Mec>,
    /// Per condensation transition, the model transition it abstracts (None
    /// on the component self-loops).
    pub origin: Vec<Option<TransId>>,
}

/// End-component condensation: non-component states survive, each maximal end
/// component collapses to a fresh controllable state whose self-loop pays the
/// supplied limit value. Rewards of all other transitions are immaterial for
/// the mean payoff; the minimum supplied value is used so outputs are
/// deterministic.
pub fn condensation(e: &Emdp, mec_values: &[Rat]) -> Condensation {
    let components = mecs(e);
    assert_eq!(
        components.len(),
        mec_values.len(),
        "one limit value per end component"
    );
    let mut mec_of: Vec<Option<usize>> = vec![None; e.state_count()];
    for (i, mec) in components.iter().enumerate() {
        for &s in &mec.states {
            mec_of[s.0] = Some(i);
        }
    }
    let mut names: std::collections::BTreeSet<String> =
        e.state_ids().map(|s| e.name(s).to_string()).collect();
    let mut states: Vec<(String, StateKind)> = Vec::new();
    let mut hat: Vec<StateId> = vec![StateId(usize::MAX); e.state_count()];
    let mut mec_state: Vec<StateId> = Vec::new();
    for s in e.state_ids() {
        if mec_of[s.0].is_none() {
            hat[s.0] = StateId(states.len());
            states.push((e.name(s).to_string(), e.kind(s)));
        }
    }
    for (i, mec) in components.iter().enumerate() {
        let mut name = format!("mec_{i}");
        while names.contains(&name) {
            name.insert(0, '_');
        }
        names.insert(name.clone());
        let id = StateId(states.len());
        states.push((name, StateKind::Controllable));
        mec_state.push(id);
        for &s in &mec.states {
            hat[s.0] = id;
        }
    }
    let filler = mec_values.iter().min().cloned().unwrap_or_else(Rat::zero);
    let mut transitions = Vec::new();
    let mut origin: Vec<Option<TransId>> = Vec::new();
    for (i, _) in components.iter().enumerate() {
        transitions.push(FiniteTransition {
            src: mec_state[i],
            dst: mec_state[i],
            reward: mec_values[i].clone(),
            prob: None,
        });
        origin.push(None);
    }
    for t in e.trans_ids() {
        let tr = e.transition(t);
        let same_mec = match (mec_of[tr.src.0], mec_of[tr.dst.0]) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        };
        if same_mec {
            continue;
        }
        // Probabilities survive only on stochastic states that are kept as
        // themselves; component states become controllable choices.
        let src_in_mec = mec_of[tr.src.0].is_some();
        transitions.push(FiniteTransition {
            src: hat[tr.src.0],
            dst: hat[tr.dst.0],
            reward: filler.clone(),
            prob: if src_in_mec { None } else { tr.prob.clone() },
        });
        origin.push(Some(t));
    }
    let mdp = FiniteMdp::new(states, transitions).expect("condensation is well formed");
    Condensation {
        mdp,
        hat,
        mec_state,
        components,
        origin,
    }
}

/// Enumerates every memoryless deterministic policy; the brute-force oracle
/// for small instances.
pub fn enumerate_policies(m: &FiniteMdp) -> Option<PolicyIter<'_>> {
    let slots: Vec<StateId> = m.state_ids().filter(|&s| m.is_controllable(s)).collect();
    let mut count = 1u128;
    for &s in &slots {
        count = count.checked_mul(m.out(s).len() as u128)?;
        if count > 2_000_000 {
            return None;
        }
    }
    Some(PolicyIter {
        mdp: m,
        slots,
        cursor: Some(Vec::new()),
    })
}

pub struct PolicyIter<'a> {
    mdp: &'a FiniteMdp,
    slots: Vec<StateId>,
    cursor: Option<Vec<usize>>,
}

impl Iterator for PolicyIter<'_> {
    type Item = Vec<Option<usize>>;

    fn next(&mut self) -> Option<Self::Item> {
        let cursor = self.cursor.as_mut()?;
        if cursor.is_empty() {
            *cursor = vec![0; self.slots.len()];
        } else {
            // Mixed-radix increment over choice indices.
            let mut i = 0;
            loop {
                if i == self.slots.len() {
                    self.cursor = None;
                    return None;
                }
                cursor[i] += 1;
                if cursor[i] < self.mdp.out(self.slots[i]).len() {
                    break;
                }
                cursor[i] = 0;
                i += 1;
            }
        }
        let mut policy = vec![None; self.mdp.state_count()];
        for (slot, &choice) in self.slots.iter().zip(self.cursor.as_ref().unwrap()) {
            policy[slot.0] = Some(self.mdp.out(*slot)[choice]);
        }
        Some(policy)
    }
}

/// Exact mean payoff of a fixed policy from a start state.
pub fn policy_value(m: &FiniteMdp, policy: &[Option<usize>], start: StateId) -> Rat {
    let (rows, rewards) = m.induced_chain(policy);
    chain::gain_bias(&rows, &rewards).gain[start.0].clone()
}

/// Best mean payoff over all memoryless deterministic policies, per start
/// state — exponential, for cross-checks only.
pub fn brute_force_values(m: &FiniteMdp) -> Option<Vec<Rat>> {
    let iter = enumerate_policies(m)?;
    let mut best: Option<Vec<Rat>> = None;
    for policy in iter {
        let (rows, rewards) = m.induced_chain(&policy);
        let gains = chain::gain_bias(&rows, &rewards).gain;
        best = Some(match best {
            None => gains,
            Some(acc) => acc
                .into_iter()
                .zip(gains)
                .map(|(a, b)| if b > a { b } else { a })
                .collect(),
        });
    }
    best
}

/// Convenience: FiniteMdp view of an energy model with updates dropped.
pub fn forget_counter(e: &Emdp) -> FiniteMdp {
    let states = e
        .state_ids()
        .map(|s| (e.name(s).to_string(), e.kind(s)))
        .collect();
    let transitions = e
        .transitions()
        .iter()
        .map(|t| FiniteTransition {
            src: t.src,
            dst: t.dst,
            reward: t.reward.clone(),
            prob: t.prob.clone(),
        })
        .collect();
    FiniteMdp::new(states, transitions).expect("energy model is already validated")
}

/// Checks that the recorded policy achieves the recorded values exactly.
pub fn verify_result(m: &FiniteMdp, result: &MeanPayoffResult) -> Result<(), String> {
    let (rows, rewards) = m.induced_chain(&result.policy);
    let gains = chain::gain_bias(&rows, &rewards).gain;
    if gains != result.values {
        return Err("policy does not achieve the recorded values".into());
    }
    Ok(())
}

#[allow(dead_code)]
fn _used_types(_: BTreeMap<(), ()>) {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::parse_emdp;
    use crate::numeric::{int, rat, rat_int};

    fn single_loop(reward: i64) -> FiniteMdp {
        FiniteMdp::new(
            vec![("a".into(), StateKind::Controllable)],
            vec![FiniteTransition {
                src: StateId(0),
                dst: StateId(0),
                reward: rat_int(reward),
                prob: None,
            }],
        )
        .unwrap()
    }

    #[test]
    fn single_loop_gain() {
        let m = single_loop(3);
        let r = solve_mean_payoff(&m);
        assert_eq!(r.values, vec![rat_int(3)]);
        verify_result(&m, &r).unwrap();
        assert_eq!(gains_via_lp(&m), r.values);
    }

    #[test]
    fn two_loops_pick_the_better() {
        // Controllable states a, b with loops 1 and 4 and free travel.
        let m = FiniteMdp::new(
            vec![
                ("a".into(), StateKind::Controllable),
                ("b".into(), StateKind::Controllable),
            ],
            vec![
                FiniteTransition { src: StateId(0), dst: StateId(0), reward: rat_int(1), prob: None },
                FiniteTransition { src: StateId(0), dst: StateId(1), reward: rat_int(0), prob: None },
                FiniteTransition { src: StateId(1), dst: StateId(1), reward: rat_int(4), prob: None },
                FiniteTransition { src: StateId(1), dst: StateId(0), reward: rat_int(0), prob: None },
            ],
        )
        .unwrap();
        let r = solve_mean_payoff(&m);
        assert_eq!(r.values, vec![rat_int(4), rat_int(4)]);
        verify_result(&m, &r).unwrap();
        assert_eq!(brute_force_values(&m).unwrap(), r.values);
        assert_eq!(gains_via_lp(&m), r.values);
    }

    #[test]
    fn stochastic_cycle_average() {
        // s loops for 0 or enters t; t returns with rewards ±10 at 1/2 each:
        // the s->t->s cycle averages (0 + 0)/1... rewards live on t's exits, so
        // cycle average = (0 + 10·1/2 - 10·1/2) / 2 = 0; both options tie at 0.
        let m = FiniteMdp::new(
            vec![
                ("s".into(), StateKind::Controllable),
                ("t".into(), StateKind::Stochastic),
            ],
            vec![
                FiniteTransition { src: StateId(0), dst: StateId(0), reward: rat_int(0), prob: None },
                FiniteTransition { src: StateId(0), dst: StateId(1), reward: rat_int(0), prob: None },
                FiniteTransition { src: StateId(1), dst: StateId(0), reward: rat_int(10), prob: Some(rat(1, 2)) },
                FiniteTransition { src: StateId(1), dst: StateId(0), reward: rat_int(-10), prob: Some(rat(1, 2)) },
            ],
        )
        .unwrap();
        let r = solve_mean_payoff(&m);
        assert_eq!(r.values, vec![rat_int(0), rat_int(0)]);
        assert_eq!(brute_force_values(&m).unwrap(), r.values);
        assert_eq!(gains_via_lp(&m), r.values);
    }

    #[test]
    fn unfold_fig3_has_seven_states_and_value_zero() {
        let e = fixtures::fig3();
        let s = e.state_id("s").unwrap();
        let t = e.state_id("t").unwrap();
        let (m, map) = unfold(&e, &int(0), &int(2), &rat_int(-1)).unwrap();
        assert_eq!(m.state_count(), 7);
        let r = solve_mean_payoff(&m);
        // Looping at s is risk-free at every level; t on the boundary loses
        // half its mass to the sink, t(1) stays interior.
        for k in 0..=2 {
            let p = map.state_of(s, &int(k)).unwrap();
            assert_eq!(r.values[p.0], rat_int(0), "state {}", m.name(p));
        }
        assert_eq!(r.values[map.state_of(t, &int(1)).unwrap().0], rat_int(0));
        assert_eq!(r.values[map.state_of(t, &int(0)).unwrap().0], rat(-1, 2));
        assert_eq!(r.values[map.state_of(t, &int(2)).unwrap().0], rat(-1, 2));
        assert_eq!(r.values[map.sink.0], rat_int(-1));
        // The best value over non-sink states — what the balanced case reads
        // off — is exactly 0.
        let best = m
            .state_ids()
            .filter(|&p| p != map.sink)
            .map(|p| r.values[p.0].clone())
            .max()
            .unwrap();
        assert_eq!(best, rat_int(0));
    }

    #[test]
    fn unfold_rejects_bad_bounds() {
        let e = fixtures::fig3();
        assert!(matches!(
            unfold(&e, &int(3), &int(1), &rat_int(-1)),
            Err(FinError::BadBounds(_))
        ));
        // Sink reward must undercut the minimal model reward (0 here).
        assert!(matches!(
            unfold(&e, &int(0), &int(2), &rat_int(0)),
            Err(FinError::BadBounds(_))
        ));
    }

    #[test]
    fn unfold_collapsed_window_matches_counterless_mdp() {
        // All updates zero: the [0,0] window never exits to the sink.
        let text = "state a controllable\nstate b stochastic\n\
                    trans a -> b update=0 reward=2\n\
                    trans b -> a update=0 reward=1 prob=2/3\n\
                    trans b -> b update=0 reward=0 prob=1/3\n";
        let e = parse_emdp(text).unwrap();
        let (m, map) = unfold(&e, &int(0), &int(0), &rat_int(-5)).unwrap();
        let unfolded = solve_mean_payoff(&m);
        let plain = solve_mean_payoff(&forget_counter(&e));
        for s in e.state_ids() {
            let product = map.state_of(s, &int(0)).unwrap();
            assert_eq!(unfolded.values[product.0], plain.values[s.0]);
        }
    }

    #[test]
    fn unfold_fig2l_values_stay_below_five() {
        let e = fixtures::fig2l();
        let bound = int(4);
        let (m, map) = unfold(&e, &int(0), &bound, &rat_int(-1)).unwrap();
        assert_eq!(m.state_count(), 21);
        let r = solve_mean_payoff(&m);
        for s in e.state_ids() {
            for k in 0..=4 {
                let product = map.state_of(s, &int(k)).unwrap();
                assert!(
                    r.values[product.0] < rat_int(5),
                    "value at {}({k}) is {}",
                    e.name(s),
                    r.values[product.0]
                );
            }
        }
    }

    #[test]
    fn condensation_of_fig2r_routes_to_the_best_component() {
        let e = fixtures::fig2r();
        // Limit values: {a} -> 0, {d} -> 5, {e} -> 0 (per-component models).
        let values = vec![rat_int(0), rat_int(5), rat_int(0)];
        let cond = condensation(&e, &values);
        let (m, hat, comps) = (&cond.mdp, &cond.hat, &cond.components);
        assert_eq!(comps.len(), 3);
        // b, c survive; three fresh component states: 5 states total.
        assert_eq!(m.state_count(), 5);
        let r = solve_mean_payoff(m);
        let a_hat = hat[e.state_id("a").unwrap().0];
        assert_eq!(r.values[a_hat.0], rat_int(5));
        verify_result(m, &r).unwrap();
    }

    #[test]
    fn condensation_of_strongly_connected_model_is_one_loop() {
        let e = fixtures::fig2l();
        let cond = condensation(&e, &[rat(7, 2)]);
        let (m, hat, comps) = (&cond.mdp, &cond.hat, &cond.components);
        assert_eq!(comps.len(), 1);
        assert_eq!(m.state_count(), 1);
        let r = solve_mean_payoff(m);
        assert_eq!(r.values[hat[0].0], rat(7, 2));
    }

    #[test]
    fn condensation_keeps_unreachable_components_apart() {
        let text = "state a controllable\nstate b controllable\n\
                    trans a -> a update=0 reward=1\ntrans b -> b update=0 reward=7\n";
        let e = parse_emdp(text).unwrap();
        let cond = condensation(&e, &[rat_int(1), rat_int(7)]);
        let (m, hat) = (&cond.mdp, &cond.hat);
        let r = solve_mean_payoff(m);
        assert_eq!(r.values[hat[0].0], rat_int(1));
        assert_eq!(r.values[hat[1].0], rat_int(7));
    }

    #[test]
    fn policy_iteration_matches_brute_force_on_fixture_unfolds() {
        for e in [fixtures::fig3(), fixtures::pump2()] {
            let (m, _) = unfold(&e, &int(0), &int(2), &rat_int(-1)).unwrap();
            let fast = solve_mean_payoff(&m);
            verify_result(&m, &fast).unwrap();
            if let Some(best) = brute_force_values(&m) {
                assert_eq!(fast.values, best);
            }
        }
    }
}
