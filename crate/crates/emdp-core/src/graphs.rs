//! Structural analysis: strong connectivity, maximal end components, and
//! almost-sure reachability strategies.

use crate::chain;
use crate::model::{Emdp, StateId, TransId};
use crate::numeric::Rat;
use crate::strategy::{MemorylessTable, StrategyMachine};
use std::collections::BTreeSet;
use thiserror::Error;

/// An end component: a stochastically closed, strongly connected sub-MDP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mec {
    pub states: BTreeSet<StateId>,
    pub transitions: BTreeSet<TransId>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ReachError {
    #[error("target is not almost-surely reachable from states {0:?}")]
    NotAlmostSurelyReachable(Vec<String>),
}

/// Strongly connected components of the sub-graph spanned by `edges`,
/// returned in an order deterministic in the input. Iterative Tarjan.
pub fn sccs(num_states: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); num_states];
    for &(u, v) in edges {
        adj[u].push(v);
    }
    let mut index = vec![usize::MAX; num_states];
    let mut low = vec![0usize; num_states];
    let mut on_stack = vec![false; num_states];
    let mut stack = Vec::new();
    let mut next_index = 0;
    let mut components = Vec::new();
    // Explicit DFS stack: (node, next child position).
    let mut work: Vec<(usize, usize)> = Vec::new();
    for root in 0..num_states {
        if index[root] != usize::MAX {
            continue;
        }
        work.push((root, 0));
        index[root] = next_index;
        low[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut child)) = work.last_mut() {
            if *child < adj[v].len() {
                let w = adj[v][*child];
                *child += 1;
                if index[w] == usize::MAX {
                    index[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    work.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                work.pop();
                if let Some(&(parent, _)) = work.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().unwrap();
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    components.push(comp);
                }
            }
        }
    }
    components.sort_by_key(|c| c[0]);
    components
}

pub fn is_strongly_connected(e: &Emdp) -> bool {
    let edges: Vec<(usize, usize)> = e
        .transitions()
        .iter()
        .map(|t| (t.src.0, t.dst.0))
        .collect();
    sccs(e.state_count(), &edges).len() == 1
}

/// Maximal end components, via iterative SCC refinement: split at stochastic
/// states with escaping transitions and repeat to a fixpoint. The result is
/// ordered by smallest member state and pairwise disjoint.
pub fn mecs(e: &Emdp) -> Vec<Mec> {
    // Candidate state sets to refine; start from the whole space.
    let mut pending: Vec<BTreeSet<StateId>> = vec![e.state_ids().collect()];
    let mut result = Vec::new();
    while let Some(candidate) = pending.pop() {
        // Transitions usable inside the candidate: controllable edges staying
        // inside; stochastic states must lie fully inside, else they are cut.
        let mut usable: Vec<TransId> = Vec::new();
        let mut cut: BTreeSet<StateId> = BTreeSet::new();
        for &s in &candidate {
            if e.is_controllable(s) {
                for &t in e.out(s) {
                    if candidate.contains(&e.transition(t).dst) {
                        usable.push(t);
                    }
                }
            } else {
                let closed = e
                    .out(s)
                    .iter()
                    .all(|&t| candidate.contains(&e.transition(t).dst));
                if closed {
                    usable.extend(e.out(s).iter().copied());
                } else {
                    cut.insert(s);
                }
            }
        }
        let members: Vec<StateId> = candidate
            .iter()
            .copied()
            .filter(|s| !cut.contains(s))
            .collect();
        let edges: Vec<(usize, usize)> = usable
            .iter()
            .map(|&t| (e.transition(t).src.0, e.transition(t).dst.0))
            .filter(|(u, v)| !cut.contains(&StateId(*u)) && !cut.contains(&StateId(*v)))
            .collect();
        // Index compression for the SCC run.
        let pos: std::collections::BTreeMap<usize, usize> =
            members.iter().enumerate().map(|(i, s)| (s.0, i)).collect();
        let local_edges: Vec<(usize, usize)> = edges
            .iter()
            .map(|&(u, v)| (pos[&u], pos[&v]))
            .collect();
        let comps = sccs(members.len(), &local_edges);
        let stable = comps.len() == 1 && cut.is_empty() && comps[0].len() == candidate.len();
        for comp in comps {
            let states: BTreeSet<StateId> = comp.iter().map(|&i| members[i]).collect();
            // A singleton without an internal transition is no end component.
            let internal: BTreeSet<TransId> = usable
                .iter()
                .copied()
                .filter(|&t| {
                    states.contains(&e.transition(t).src) && states.contains(&e.transition(t).dst)
                })
                .collect();
            let total = states
                .iter()
                .all(|&s| internal.iter().any(|&t| e.transition(t).src == s));
            if !total {
                // Refine further only if the set can still shrink usefully.
                if states.len() > 1 {
                    pending.push(states);
                }
                continue;
            }
            if stable {
                result.push(Mec {
                    states,
                    transitions: internal,
                });
            } else {
                pending.push(states);
            }
        }
    }
    result.sort_by_key(|m| *m.states.iter().next().unwrap());
    result
}

/// States from which the controller can reach `target` with probability 1,
/// staying within `allowed`. Standard nested fixpoint: the outer loop shrinks
/// the candidate set, the inner loop grows backward reachability where
/// stochastic states are required to stay inside the candidate set.
pub fn almost_sure_reach_set(
    e: &Emdp,
    target: &BTreeSet<StateId>,
    allowed: impl Fn(StateId) -> bool,
) -> BTreeSet<StateId> {
    let mut good: BTreeSet<StateId> = e.state_ids().filter(|&s| allowed(s)).collect();
    loop {
        let mut reach: BTreeSet<StateId> = target
            .iter()
            .copied()
            .filter(|s| good.contains(s))
            .collect();
        loop {
            let mut grew = false;
            for &s in &good {
                if reach.contains(&s) {
                    continue;
                }
                let ok = if e.is_controllable(s) {
                    e.out(s)
                        .iter()
                        .any(|&t| reach.contains(&e.transition(t).dst))
                } else {
                    e.out(s)
                        .iter()
                        .all(|&t| good.contains(&e.transition(t).dst))
                        && e.out(s)
                            .iter()
                            .any(|&t| reach.contains(&e.transition(t).dst))
                };
                if ok {
                    reach.insert(s);
                    grew = true;
                }
            }
            if !grew {
                break;
            }
        }
        if reach == good {
            return good;
        }
        good = reach;
    }
}

/// Memoryless deterministic strategy reaching `target` with probability 1 from
/// every state, with exact expected hitting times under that strategy.
#[derive(Debug)]
pub struct ReachStrategy {
    pub machine: StrategyMachine,
    pub choices: Vec<Option<TransId>>,
    /// Expected number of steps to hit the target from each state (0 inside).
    pub expected_steps: Vec<Rat>,
}

pub fn reach_strategy(e: &Emdp, target: &BTreeSet<StateId>) -> Result<ReachStrategy, ReachError> {
    let winning = almost_sure_reach_set(e, target, |_| true);
    let losers: Vec<String> = e
        .state_ids()
        .filter(|s| !winning.contains(s))
        .map(|s| e.name(s).to_string())
        .collect();
    if !losers.is_empty() {
        return Err(ReachError::NotAlmostSurelyReachable(losers));
    }
    // Attractor ranking: repeatedly add states that can step into the current
    // set; controllable states record the first such transition (BFS-style,
    // deterministic in declaration order).
    let mut choices: Vec<Option<TransId>> = vec![None; e.state_count()];
    let mut rank: Vec<Option<usize>> = vec![None; e.state_count()];
    for &s in target {
        rank[s.0] = Some(0);
    }
    let mut frontier_rank = 0;
    loop {
        let mut grew = false;
        for s in e.state_ids() {
            if rank[s.0].is_some() {
                continue;
            }
            if e.is_controllable(s) {
                let step = e.out(s).iter().copied().find(|&t| {
                    rank[e.transition(t).dst.0].is_some_and(|r| r <= frontier_rank)
                });
                if let Some(t) = step {
                    rank[s.0] = Some(frontier_rank + 1);
                    choices[s.0] = Some(t);
                    grew = true;
                }
            } else {
                // Stochastic states join once some successor is ranked; all
                // successors are winning, so progress happens with positive
                // probability and recurs otherwise.
                let any = e
                    .out(s)
                    .iter()
                    .any(|&t| rank[e.transition(t).dst.0].is_some_and(|r| r <= frontier_rank));
                if any {
                    rank[s.0] = Some(frontier_rank + 1);
                    grew = true;
                }
            }
        }
        if !grew {
            break;
        }
        frontier_rank += 1;
    }
    // Controllable target states still need a choice for the machine to be
    // total on the states it may be queried at; pick the attractor step too
    // (re-entering the target region) or the first transition.
    for &s in target {
        if e.is_controllable(s) && choices[s.0].is_none() {
            let preferred = e
                .out(s)
                .iter()
                .copied()
                .find(|&t| rank[e.transition(t).dst.0].is_some());
            choices[s.0] = preferred.or(Some(e.out(s)[0]));
        }
    }
    let expected_steps = hitting_times(e, &choices, target);
    Ok(ReachStrategy {
        machine: StrategyMachine::Memoryless(MemorylessTable::deterministic(
            choices
                .iter()
                .enumerate()
                .map(|(i, c)| if e.is_controllable(StateId(i)) { *c } else { None })
                .collect(),
        )),
        choices: choices.clone(),
        expected_steps,
    })
}

/// Exact expected hitting times of `target` in the chain induced by the given
/// deterministic choices.
fn hitting_times(e: &Emdp, choices: &[Option<TransId>], target: &BTreeSet<StateId>) -> Vec<Rat> {
    let rows = e
        .state_ids()
        .map(|s| {
            if target.contains(&s) {
                Vec::new()
            } else if e.is_controllable(s) {
                let t = choices[s.0].expect("winning controllable state has a choice");
                vec![(e.transition(t).dst.0, Rat::from_integer(1.into()))]
            } else {
                e.out(s)
                    .iter()
                    .map(|&t| {
                        let tr = e.transition(t);
                        (tr.dst.0, tr.prob.clone().expect("stochastic"))
                    })
                    .collect()
            }
        })
        .collect::<Vec<_>>();
    chain::expected_hits(&rows, |s| target.contains(&StateId(s)))
        .expect("hitting times solvable for an almost-sure strategy")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::numeric::rat_int;

    fn names(e: &Emdp, set: &BTreeSet<StateId>) -> Vec<String> {
        set.iter().map(|&s| e.name(s).to_string()).collect()
    }

    #[test]
    fn fig2r_mecs_are_the_three_loops() {
        let e = fixtures::fig2r();
        let found = mecs(&e);
        let sets: Vec<Vec<String>> = found.iter().map(|m| names(&e, &m.states)).collect();
        assert_eq!(sets, vec![vec!["a"], vec!["d"], vec!["e"]]);
        // {b, c} is not closed: c's transition to d escapes.
        assert!(!sets.iter().any(|s| s.len() == 2));
    }

    #[test]
    fn single_loop_is_a_mec() {
        let e = crate::model::parse_emdp("state a controllable\ntrans a -> a update=1 reward=0\n")
            .unwrap();
        let found = mecs(&e);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].states.len(), 1);
        assert_eq!(found[0].transitions.len(), 1);
    }

    #[test]
    fn fig2l_is_one_mec() {
        let e = fixtures::fig2l();
        let found = mecs(&e);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].states.len(), 4);
    }

    /// Brute-force end-component enumeration over all state subsets.
    fn mecs_oracle(e: &Emdp) -> Vec<BTreeSet<StateId>> {
        let n = e.state_count();
        let mut ecs: Vec<BTreeSet<StateId>> = Vec::new();
        for mask in 1u32..(1 << n) {
            let states: BTreeSet<StateId> = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(StateId)
                .collect();
            // Largest transition set satisfying both closure conditions.
            let mut trans: Vec<TransId> = Vec::new();
            let mut ok = true;
            for &s in &states {
                let inside: Vec<TransId> = e
                    .out(s)
                    .iter()
                    .copied()
                    .filter(|&t| states.contains(&e.transition(t).dst))
                    .collect();
                if e.is_controllable(s) {
                    if inside.is_empty() {
                        ok = false;
                        break;
                    }
                    trans.extend(inside);
                } else {
                    if inside.len() != e.out(s).len() {
                        ok = false;
                        break;
                    }
                    trans.extend(inside);
                }
            }
            if !ok {
                continue;
            }
            let edges: Vec<(usize, usize)> = trans
                .iter()
                .map(|&t| (e.transition(t).src.0, e.transition(t).dst.0))
                .collect();
            let local: Vec<StateId> = states.iter().copied().collect();
            let pos: std::collections::BTreeMap<usize, usize> =
                local.iter().enumerate().map(|(i, s)| (s.0, i)).collect();
            let le: Vec<(usize, usize)> = edges.iter().map(|&(u, v)| (pos[&u], pos[&v])).collect();
            if sccs(states.len(), &le).len() == 1 {
                ecs.push(states);
            }
        }
        // Keep only the inclusion-maximal ones.
        let mut maximal: Vec<BTreeSet<StateId>> = Vec::new();
        for ec in &ecs {
            if !ecs.iter().any(|other| other != ec && ec.is_subset(other)) {
                if !maximal.contains(ec) {
                    maximal.push(ec.clone());
                }
            }
        }
        maximal.sort_by_key(|m| *m.iter().next().unwrap());
        maximal
    }

    #[test]
    fn mecs_match_subset_oracle_on_fixtures() {
        for e in [
            fixtures::fig1(),
            fixtures::fig2l(),
            fixtures::fig2r(),
            fixtures::fig3(),
            fixtures::pump2(),
        ] {
            let fast: Vec<BTreeSet<StateId>> = mecs(&e).into_iter().map(|m| m.states).collect();
            assert_eq!(fast, mecs_oracle(&e), "mismatch on model\n{e}");
        }
    }

    #[test]
    fn strong_connectivity() {
        assert!(is_strongly_connected(&fixtures::fig2l()));
        assert!(!is_strongly_connected(&fixtures::fig2r()));
        assert!(is_strongly_connected(&fixtures::fig1()));
        let single =
            crate::model::parse_emdp("state a controllable\ntrans a -> a update=0 reward=0\n")
                .unwrap();
        assert!(is_strongly_connected(&single));
    }

    #[test]
    fn fig2l_reach_strategy_targets_s() {
        let e = fixtures::fig2l();
        let s = e.state_id("s").unwrap();
        let t = e.state_id("t").unwrap();
        let v = e.state_id("v").unwrap();
        let target: BTreeSet<StateId> = [s].into();
        let rs = reach_strategy(&e, &target).unwrap();
        // t chooses t->u (the only way forward), v chooses v->s.
        let t_choice = rs.choices[t.0].unwrap();
        assert_eq!(e.name(e.transition(t_choice).dst), "u");
        let v_choice = rs.choices[v.0].unwrap();
        assert_eq!(e.name(e.transition(v_choice).dst), "s");
        assert_eq!(rs.expected_steps[s.0], rat_int(0));
        // From v it is one deterministic step.
        assert_eq!(rs.expected_steps[v.0], rat_int(1));
        // From u: half the mass goes v -> s (2 more), half goes t -> u (retry).
        // E[u] = 1 + (E[v] + E[t]) / 2, E[t] = 1 + E[u]  =>  E[u] = 4, E[t] = 5.
        assert_eq!(rs.expected_steps[u_index(&e)], rat_int(4));
        assert_eq!(rs.expected_steps[t.0], rat_int(5));
    }

    fn u_index(e: &Emdp) -> usize {
        e.state_id("u").unwrap().0
    }

    #[test]
    fn reach_whole_space_is_trivial() {
        let e = fixtures::fig2r();
        let target: BTreeSet<StateId> = e.state_ids().collect();
        let rs = reach_strategy(&e, &target).unwrap();
        for s in e.state_ids() {
            assert_eq!(rs.expected_steps[s.0], rat_int(0));
        }
    }

    #[test]
    fn fig3_one_step_reach() {
        let e = fixtures::fig3();
        let s = e.state_id("s").unwrap();
        let t = e.state_id("t").unwrap();
        let rs = reach_strategy(&e, &[t].into()).unwrap();
        let choice = rs.choices[s.0].unwrap();
        assert_eq!(e.transition(choice).dst, t);
        assert_eq!(rs.expected_steps[s.0], rat_int(1));
    }

    #[test]
    fn unreachable_targets_are_reported() {
        let e = fixtures::fig2r();
        let a = e.state_id("a").unwrap();
        // From d or e the rest of the graph is unreachable.
        let err = reach_strategy(&e, &[a].into()).unwrap_err();
        let ReachError::NotAlmostSurelyReachable(states) = err;
        assert!(states.contains(&"d".to_string()));
        assert!(states.contains(&"e".to_string()));
    }
}
