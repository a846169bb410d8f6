//! The two flow programs over long-run transition frequencies, decomposition
//! of optimal flows into strongly connected components, and core extraction.
//!
//! Both programs share the flow polytope: total mass 1, conservation at
//! controllable states, the fixed stochastic split, and a non-negative
//! long-run counter trend. The payoff program maximizes expected reward per
//! step, the trend program the expected counter change per step.

use crate::model::{Emdp, StateId, StateKind, TransId};
use crate::numeric::Rat;
use crate::ratlp::{self, Constraint, LinearProgram, LpOutcome, Rel, Sense};
use crate::strategy::{Dist, DistEntry, MemorylessTable, StrategyMachine};
use num_traits::{One, Signed, Zero};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProgramKind {
    Payoff,
    Trend,
}

/// An optimal solution of one of the flow programs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowSolution {
    pub kind: ProgramKind,
    /// Long-run frequency per transition, aligned with the model's ids.
    pub flow: Vec<Rat>,
    pub objective_value: Rat,
}

/// A strongly connected piece of the flow graph with its aggregate quantities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub states: BTreeSet<StateId>,
    pub transitions: Vec<TransId>,
    /// Flow carried by each listed transition.
    pub share: Vec<Rat>,
    pub freq: Rat,
    pub trend: Rat,
    pub mp: Rat,
}

/// Extracted core of an optimal payoff flow. Type II pairs may repeat a single
/// balanced component; the weighted payoff inequality is stated against
/// `f* · (freq₁ + freq₂)` so that it expresses exactly the mean payoff of the
/// induced time-sharing strategy (for pairs covering all flow this is the
/// plain `≥ f*`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Core {
    TypeI(Component),
    TypeII(Component, Component),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum FlowError {
    #[error("flow program is infeasible: no safe strategy exists in any configuration")]
    InfeasibleFlow,
    #[error("no core found in an optimal flow; this indicates a solver bug")]
    NoCore,
}

fn flow_constraints(e: &Emdp) -> Vec<Constraint> {
    let n = e.trans_count();
    let mut constraints = Vec::new();
    // Total mass.
    constraints.push(Constraint {
        coeffs: vec![Rat::one(); n],
        rel: Rel::Eq,
        rhs: Rat::one(),
    });
    // Conservation at controllable states: inflow = outflow.
    for s in e.state_ids() {
        if e.kind(s) != StateKind::Controllable {
            continue;
        }
        let mut row = vec![Rat::zero(); n];
        for t in e.trans_ids() {
            let tr = e.transition(t);
            if tr.dst == s {
                row[t.0] += Rat::one();
            }
            if tr.src == s {
                row[t.0] -= Rat::one();
            }
        }
        constraints.push(Constraint {
            coeffs: row,
            rel: Rel::Eq,
            rhs: Rat::zero(),
        });
    }
    // Stochastic split: each branch carries its fixed share of the inflow.
    for s in e.state_ids() {
        if e.kind(s) != StateKind::Stochastic {
            continue;
        }
        for &branch in e.out(s) {
            let p = e.transition(branch).prob.clone().expect("stochastic");
            let mut row = vec![Rat::zero(); n];
            row[branch.0] += Rat::one();
            for t in e.trans_ids() {
                if e.transition(t).dst == s {
                    row[t.0] -= &p;
                }
            }
            constraints.push(Constraint {
                coeffs: row,
                rel: Rel::Eq,
                rhs: Rat::zero(),
            });
        }
    }
    // Non-negative counter trend.
    constraints.push(Constraint {
        coeffs: e
            .transitions()
            .iter()
            .map(|t| Rat::from_integer(t.update.clone()))
            .collect(),
        rel: Rel::Ge,
        rhs: Rat::zero(),
    });
    constraints
}

fn flow_variables(e: &Emdp) -> Vec<String> {
    e.trans_ids().map(|t| format!("f{}", t.0)).collect()
}

/// The payoff program: maximize expected reward per step over the flow
/// polytope.
pub fn build_payoff_lp(e: &Emdp) -> LinearProgram {
    LinearProgram::new(
        flow_variables(e),
        Sense::Max,
        e.transitions().iter().map(|t| t.reward.clone()).collect(),
        flow_constraints(e),
    )
    .expect("flow program is well formed")
}

/// The trend program: maximize expected counter change per step over the same
/// polytope (the trend row is retained).
pub fn build_trend_lp(e: &Emdp) -> LinearProgram {
    LinearProgram::new(
        flow_variables(e),
        Sense::Max,
        e.transitions()
            .iter()
            .map(|t| Rat::from_integer(t.update.clone()))
            .collect(),
        flow_constraints(e),
    )
    .expect("flow program is well formed")
}

/// Solves the chosen program. Infeasibility means no strategy with
/// non-negative trend exists, hence no safe strategy in any configuration of a
/// strongly connected model.
pub fn solve_flow(e: &Emdp, kind: ProgramKind) -> Result<FlowSolution, FlowError> {
    let lp = match kind {
        ProgramKind::Payoff => build_payoff_lp(e),
        ProgramKind::Trend => build_trend_lp(e),
    };
    match ratlp::solve_lp(&lp) {
        LpOutcome::Optimal {
            assignment, value, ..
        } => Ok(FlowSolution {
            kind,
            flow: assignment,
            objective_value: value,
        }),
        LpOutcome::Infeasible { .. } => Err(FlowError::InfeasibleFlow),
        LpOutcome::Unbounded { .. } => unreachable!("flow polytope is bounded by the mass row"),
    }
}

/// Exact re-check of the four constraint families outside the solver.
pub fn verify_flow(e: &Emdp, fs: &FlowSolution) -> Result<(), String> {
    let lp = build_payoff_lp(e);
    ratlp::check_feasible(&lp, &fs.flow)
}

/// Strongly connected components of the flow graph, each with its frequency,
/// trend, and mean payoff. States without throughput are excluded. Ordered by
/// smallest member state.
pub fn components(e: &Emdp, fs: &FlowSolution) -> Vec<Component> {
    let edges: Vec<(usize, usize)> = e
        .trans_ids()
        .filter(|t| fs.flow[t.0].is_positive())
        .map(|t| (e.transition(t).src.0, e.transition(t).dst.0))
        .collect();
    let mut result = Vec::new();
    for comp in crate::graphs::sccs(e.state_count(), &edges) {
        let states: BTreeSet<StateId> = comp.iter().map(|&s| StateId(s)).collect();
        let transitions: Vec<TransId> = e
            .trans_ids()
            .filter(|&t| fs.flow[t.0].is_positive() && states.contains(&e.transition(t).src))
            .collect();
        if transitions.is_empty() {
            continue;
        }
        // Conservation confines positive flow to its component.
        debug_assert!(transitions
            .iter()
            .all(|&t| states.contains(&e.transition(t).dst)));
        let share: Vec<Rat> = transitions.iter().map(|&t| fs.flow[t.0].clone()).collect();
        let freq: Rat = share.iter().cloned().sum();
        let trend: Rat = transitions
            .iter()
            .map(|&t| &fs.flow[t.0] * Rat::from_integer(e.transition(t).update.clone()))
            .sum::<Rat>()
            / &freq;
        let mp: Rat = transitions
            .iter()
            .map(|&t| &fs.flow[t.0] * &e.transition(t).reward)
            .sum::<Rat>()
            / &freq;
        result.push(Component {
            states,
            transitions,
            share,
            freq,
            trend,
            mp,
        });
    }
    result.sort_by_key(|c| *c.states.iter().next().unwrap());
    result
}

impl Core {
    /// The defining inequalities, exactly.
    pub fn check(&self, f_star: &Rat) -> Result<(), String> {
        match self {
            Core::TypeI(c) => {
                if !c.trend.is_positive() {
                    return Err(format!("type I trend {} is not positive", c.trend));
                }
                if &c.mp < f_star {
                    return Err(format!("type I payoff {} is below f* = {f_star}", c.mp));
                }
                Ok(())
            }
            Core::TypeII(c1, c2) => {
                if c1.trend.is_negative() {
                    return Err(format!("type II first trend {} is negative", c1.trend));
                }
                if c2.trend.is_positive() {
                    return Err(format!("type II second trend {} is positive", c2.trend));
                }
                let wt = &c1.freq * &c1.trend + &c2.freq * &c2.trend;
                if wt.is_negative() {
                    return Err(format!("weighted trend {wt} is negative"));
                }
                let wmp = &c1.freq * &c1.mp + &c2.freq * &c2.mp;
                let scale = &c1.freq + &c2.freq;
                if wmp < f_star * &scale {
                    return Err(format!(
                        "weighted payoff {wmp} is below f* scaled by the pair mass {scale}"
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Extracts a type I or type II core from an optimal payoff flow. Scan order
/// is deterministic: single components first, then ordered pairs
/// (non-negative-trend, non-positive-trend) including repeated components.
pub fn find_core(e: &Emdp, fs: &FlowSolution) -> Result<Core, FlowError> {
    assert!(
        matches!(fs.kind, ProgramKind::Payoff),
        "cores are extracted from payoff optima"
    );
    let f_star = &fs.objective_value;
    let comps = components(e, fs);
    for c in &comps {
        let candidate = Core::TypeI(c.clone());
        if candidate.check(f_star).is_ok() {
            return Ok(candidate);
        }
    }
    for c1 in &comps {
        for c2 in &comps {
            let candidate = Core::TypeII(c1.clone(), c2.clone());
            if candidate.check(f_star).is_ok() {
                return Ok(candidate);
            }
        }
    }
    Err(FlowError::NoCore)
}

/// Memoryless table playing flow proportions inside the component and an
/// almost-sure reach strategy toward it outside.
pub fn mu_table(e: &Emdp, c: &Component) -> Result<MemorylessTable, crate::graphs::ReachError> {
    let reach = crate::graphs::reach_strategy(e, &c.states)?;
    let mut choices: Vec<Option<Dist>> = vec![None; e.state_count()];
    for s in e.state_ids() {
        if !e.is_controllable(s) {
            continue;
        }
        if c.states.contains(&s) {
            let local: Vec<(TransId, Rat)> = c
                .transitions
                .iter()
                .zip(&c.share)
                .filter(|(&t, _)| e.transition(t).src == s)
                .map(|(&t, f)| (t, f.clone()))
                .collect();
            let through: Rat = local.iter().map(|(_, f)| f.clone()).sum();
            if through.is_positive() {
                let entries: Vec<DistEntry> = local
                    .into_iter()
                    .map(|(trans, f)| DistEntry {
                        trans,
                        prob: f / &through,
                    })
                    .collect();
                choices[s.0] = Some(Dist(entries));
                continue;
            }
        }
        choices[s.0] = reach.choices[s.0].map(Dist::dirac);
    }
    Ok(MemorylessTable { choices })
}

/// Memoryless randomized strategy for a component of an optimal flow.
pub fn mu_strategy(e: &Emdp, c: &Component) -> Result<StrategyMachine, crate::graphs::ReachError> {
    Ok(StrategyMachine::Memoryless(mu_table(e, c)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::parse_emdp;
    use crate::numeric::{rat, rat_int};
    use crate::ratlp::check_outcome;

    #[test]
    fn fig1_program_shape_and_uniform_feasibility() {
        let e = fixtures::fig1();
        let lp = build_payoff_lp(&e);
        assert_eq!(lp.variables.len(), 4);
        // mass + 0 conservation + 4 split rows + trend
        assert_eq!(lp.constraints.len(), 6);
        let uniform = vec![rat(1, 4); 4];
        ratlp::check_feasible(&lp, &uniform).unwrap();
        // The split constraints pin the flow: solving returns the same point.
        let fs = solve_flow(&e, ProgramKind::Payoff).unwrap();
        assert_eq!(fs.flow, uniform);
        assert_eq!(fs.objective_value, rat_int(0));
        let trend = solve_flow(&e, ProgramKind::Trend).unwrap();
        assert_eq!(trend.objective_value, rat(1, 4));
    }

    #[test]
    fn single_loop_program() {
        let e = parse_emdp("state a controllable\ntrans a -> a update=1 reward=3\n").unwrap();
        let lp = build_payoff_lp(&e);
        assert_eq!(lp.variables.len(), 1);
        let fs = solve_flow(&e, ProgramKind::Payoff).unwrap();
        assert_eq!(fs.objective_value, rat_int(3));
        assert_eq!(fs.flow, vec![rat_int(1)]);
        let trend = solve_flow(&e, ProgramKind::Trend).unwrap();
        assert_eq!(trend.objective_value, rat_int(1));
    }

    #[test]
    fn fig3_shape_and_optima() {
        let e = fixtures::fig3();
        let lp = build_payoff_lp(&e);
        assert_eq!(lp.variables.len(), 4);
        // mass + conservation at s + 2 split rows at t + trend
        assert_eq!(lp.constraints.len(), 5);
        let fs = solve_flow(&e, ProgramKind::Payoff).unwrap();
        assert_eq!(fs.objective_value, rat_int(5));
        verify_flow(&e, &fs).unwrap();
        let trend = solve_flow(&e, ProgramKind::Trend).unwrap();
        assert_eq!(trend.objective_value, rat_int(0));
    }

    #[test]
    fn fig2l_optima_and_components() {
        let e = fixtures::fig2l();
        let fs = solve_flow(&e, ProgramKind::Payoff).unwrap();
        assert_eq!(fs.objective_value, rat_int(5));
        verify_flow(&e, &fs).unwrap();
        let trend = solve_flow(&e, ProgramKind::Trend).unwrap();
        assert_eq!(trend.objective_value, rat_int(1));
        // The unique optimum: mass 1/2 on s's +1 loop, 1/2 on v's -1;10 loop.
        let comps = components(&e, &fs);
        assert_eq!(comps.len(), 2);
        let s = e.state_id("s").unwrap();
        let v = e.state_id("v").unwrap();
        assert_eq!(comps[0].states, [s].into());
        assert_eq!(comps[0].freq, rat(1, 2));
        assert_eq!(comps[0].trend, rat_int(1));
        assert_eq!(comps[0].mp, rat_int(0));
        assert_eq!(comps[1].states, [v].into());
        assert_eq!(comps[1].freq, rat(1, 2));
        assert_eq!(comps[1].trend, rat_int(-1));
        assert_eq!(comps[1].mp, rat_int(10));
        // Core: the balanced pair with weighted payoff 5 >= f*.
        let core = find_core(&e, &fs).unwrap();
        core.check(&fs.objective_value).unwrap();
        match &core {
            Core::TypeII(c1, c2) => {
                assert_eq!(c1.states, [s].into());
                assert_eq!(c2.states, [v].into());
                assert_eq!(&c1.freq * &c1.trend + &c2.freq * &c2.trend, rat_int(0));
                assert_eq!(&c1.freq * &c1.mp + &c2.freq * &c2.mp, rat_int(5));
            }
            other => panic!("expected a type II core, got {other:?}"),
        }
    }

    #[test]
    fn fig1_uniform_flow_is_one_balanced_component() {
        let e = fixtures::fig1();
        let fs = solve_flow(&e, ProgramKind::Payoff).unwrap();
        let comps = components(&e, &fs);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].states.len(), 2);
        assert_eq!(comps[0].freq, rat_int(1));
        assert_eq!(comps[0].trend, rat(1, 4));
        assert_eq!(comps[0].mp, rat_int(0));
    }

    #[test]
    fn component_frequencies_sum_to_all_mass() {
        for e in [
            fixtures::fig1(),
            fixtures::fig2l(),
            fixtures::fig3(),
            fixtures::pump2_reward(),
        ] {
            let fs = solve_flow(&e, ProgramKind::Payoff).unwrap();
            let total: Rat = components(&e, &fs).iter().map(|c| c.freq.clone()).sum();
            assert_eq!(total, rat_int(1));
        }
    }

    #[test]
    fn single_loop_core_is_type_one() {
        let e = parse_emdp("state a controllable\ntrans a -> a update=1 reward=3\n").unwrap();
        let fs = solve_flow(&e, ProgramKind::Payoff).unwrap();
        match find_core(&e, &fs).unwrap() {
            Core::TypeI(c) => {
                assert_eq!(c.trend, rat_int(1));
                assert_eq!(c.mp, rat_int(3));
            }
            other => panic!("expected type I, got {other:?}"),
        }
    }

    #[test]
    fn pump2_reward_core_is_type_one() {
        let e = fixtures::pump2_reward();
        let fs = solve_flow(&e, ProgramKind::Payoff).unwrap();
        assert_eq!(fs.objective_value, rat_int(1));
        assert!(matches!(find_core(&e, &fs).unwrap(), Core::TypeI(_)));
    }

    #[test]
    fn balanced_negative_payoff_core_uses_the_scaled_inequality() {
        // Single zero-trend loop with negative reward: the literal pairwise
        // sum 2·f* < f* would reject the only candidate; the time-share
        // reading accepts it.
        let e = parse_emdp("state a controllable\ntrans a -> a update=0 reward=-1\n").unwrap();
        let fs = solve_flow(&e, ProgramKind::Payoff).unwrap();
        assert_eq!(fs.objective_value, rat_int(-1));
        let core = find_core(&e, &fs).unwrap();
        core.check(&fs.objective_value).unwrap();
        assert!(matches!(core, Core::TypeII(_, _)));
    }

    #[test]
    fn downward_model_is_infeasible() {
        let e = parse_emdp("state a controllable\ntrans a -> a update=-1 reward=0\n").unwrap();
        assert_eq!(
            solve_flow(&e, ProgramKind::Payoff).unwrap_err(),
            FlowError::InfeasibleFlow
        );
        // The raw program reports a checkable certificate.
        let outcome = ratlp::solve_lp(&build_payoff_lp(&e));
        check_outcome(&build_payoff_lp(&e), &outcome).unwrap();
    }

    #[test]
    fn mu_strategy_mixes_flow_proportions() {
        let e = fixtures::fig2l();
        let fs = solve_flow(&e, ProgramKind::Payoff).unwrap();
        let comps = components(&e, &fs);
        // Component {v}: inside, the v-loop carries all throughput.
        let v = e.state_id("v").unwrap();
        let machine = mu_strategy(&e, &comps[1]).unwrap();
        machine.check(&e).unwrap();
        let mem = machine.init(&crate::model::Configuration::new(v, 0));
        let dist = machine.next(v, &mem).unwrap();
        assert!(dist.is_dirac());
        assert_eq!(e.transition(dist.0[0].trans).dst, v);
        // Outside: s steers toward v via t.
        let s = e.state_id("s").unwrap();
        let dist = machine.next(s, &mem).unwrap();
        assert_eq!(e.name(e.transition(dist.0[0].trans).dst), "t");
    }

    #[test]
    fn mu_strategy_on_fig1_has_empty_table() {
        let e = fixtures::fig1();
        let fs = solve_flow(&e, ProgramKind::Payoff).unwrap();
        let comps = components(&e, &fs);
        let machine = mu_strategy(&e, &comps[0]).unwrap();
        let s = e.state_id("s").unwrap();
        let mem = machine.init(&crate::model::Configuration::new(s, 0));
        assert!(machine.next(s, &mem).is_err());
    }
}
