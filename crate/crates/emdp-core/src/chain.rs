//! Exact analysis of finite Markov chains: bottom components, stationary
//! distributions, gains and biases, absorption and hitting times.
//!
//! Chains are given as dense-indexed sparse rows: `rows[s]` lists
//! `(successor, probability)` pairs summing to 1, or is empty when `s` is
//! treated as absorbing for the query at hand.

use crate::graphs::sccs;
use crate::linalg;
use crate::numeric::Rat;
use num_traits::{One, Zero};

pub type ChainRows = Vec<Vec<(usize, Rat)>>;

/// Bottom strongly connected components (no edge leaves the component),
/// ignoring absorbing (empty-row) states.
pub fn bsccs(rows: &ChainRows) -> Vec<Vec<usize>> {
    let n = rows.len();
    let edges: Vec<(usize, usize)> = rows
        .iter()
        .enumerate()
        .flat_map(|(s, row)| row.iter().map(move |(t, _)| (s, *t)))
        .collect();
    sccs(n, &edges)
        .into_iter()
        .filter(|comp| {
            !comp.is_empty()
                && comp.iter().all(|&s| !rows[s].is_empty())
                && comp
                    .iter()
                    .all(|&s| rows[s].iter().all(|(t, _)| comp.binary_search(t).is_ok()))
        })
        .collect()
}

/// Stationary distribution of one bottom component, indexed like the chain
/// (zero outside the component).
pub fn stationary(rows: &ChainRows, component: &[usize]) -> Vec<Rat> {
    let k = component.len();
    let pos = |s: usize| component.binary_search(&s).ok();
    // Balance equations for all but one state, plus normalization.
    let mut sys: Vec<linalg::Row> = Vec::with_capacity(k);
    let mut rhs = Vec::with_capacity(k);
    for (eq, &j) in component.iter().enumerate().take(k - 1) {
        let mut row = linalg::Row::new();
        row.insert(eq, -Rat::one());
        let _ = j;
        for (ip, &i) in component.iter().enumerate() {
            for (t, p) in &rows[i] {
                if *t == component[eq] {
                    let entry = row.entry(ip).or_insert_with(Rat::zero);
                    *entry += p;
                }
            }
        }
        // The -1 and +P(j,j) contributions may cancel; drop zeros.
        row.retain(|_, v| !v.is_zero());
        sys.push(row);
        rhs.push(Rat::zero());
    }
    sys.push((0..k).map(|i| (i, Rat::one())).collect());
    rhs.push(Rat::one());
    let pi = linalg::solve(k, sys, rhs).expect("irreducible component has a stationary law");
    let mut full = vec![Rat::zero(); rows.len()];
    for (ip, &i) in component.iter().enumerate() {
        full[i] = pi[ip].clone();
    }
    let _ = pos;
    full
}

/// Long-run average reward (gain) and bias of every state of a chain, given
/// per-state expected one-step rewards. The bias is normalized per bottom
/// component by `π · h = 0`, with transient biases induced by absorption.
pub struct GainBias {
    pub gain: Vec<Rat>,
    pub bias: Vec<Rat>,
}

pub fn gain_bias(rows: &ChainRows, reward: &[Rat]) -> GainBias {
    let n = rows.len();
    assert!(rows.iter().all(|r| !r.is_empty()), "chain must be total");
    let bottoms = bsccs(rows);
    let mut gain = vec![Rat::zero(); n];
    let mut bias = vec![Rat::zero(); n];
    let mut recurrent = vec![false; n];
    for comp in &bottoms {
        let pi = stationary(rows, comp);
        let g: Rat = comp.iter().map(|&s| &pi[s] * &reward[s]).sum();
        // (I - P) h = r - g on the component, pinned by π·h = 0.
        let k = comp.len();
        let mut sys: Vec<linalg::Row> = Vec::with_capacity(k);
        let mut rhs = Vec::with_capacity(k);
        for (eq, &s) in comp.iter().enumerate().take(k - 1) {
            let mut row = linalg::Row::new();
            row.insert(eq, Rat::one());
            for (t, p) in &rows[s] {
                let tp = comp.binary_search(t).expect("bottom component is closed");
                let entry = row.entry(tp).or_insert_with(Rat::zero);
                *entry -= p;
            }
            row.retain(|_, v| !v.is_zero());
            sys.push(row);
            rhs.push(&reward[s] - &g);
        }
        sys.push(
            comp.iter()
                .enumerate()
                .map(|(ip, &s)| (ip, pi[s].clone()))
                .filter(|(_, v)| !v.is_zero())
                .collect(),
        );
        rhs.push(Rat::zero());
        let h = linalg::solve(k, sys, rhs).expect("bias system is regular");
        for (ip, &s) in comp.iter().enumerate() {
            gain[s] = g.clone();
            bias[s] = h[ip].clone();
            recurrent[s] = true;
        }
    }
    let transient: Vec<usize> = (0..n).filter(|&s| !recurrent[s]).collect();
    if transient.is_empty() {
        return GainBias { gain, bias };
    }
    let pos = |s: usize| transient.binary_search(&s).ok();
    let k = transient.len();
    // Gains are harmonic on transient states: (I - Q) g_T = P_rec · g_rec.
    let mut sys: Vec<linalg::Row> = Vec::with_capacity(k);
    let mut rhs = vec![Rat::zero(); k];
    for (eq, &s) in transient.iter().enumerate() {
        let mut row = linalg::Row::new();
        row.insert(eq, Rat::one());
        for (t, p) in &rows[s] {
            match pos(*t) {
                Some(tp) => {
                    let entry = row.entry(tp).or_insert_with(Rat::zero);
                    *entry -= p;
                }
                None => rhs[eq] += p * &gain[*t],
            }
        }
        row.retain(|_, v| !v.is_zero());
        sys.push(row);
    }
    let gt = linalg::solve(k, sys, rhs).expect("transient gain system is regular");
    for (ip, &s) in transient.iter().enumerate() {
        gain[s] = gt[ip].clone();
    }
    // Biases: (I - Q) h_T = r_T - g_T + P_rec · h_rec.
    let mut sys: Vec<linalg::Row> = Vec::with_capacity(k);
    let mut rhs = Vec::with_capacity(k);
    for (eq, &s) in transient.iter().enumerate() {
        let mut row = linalg::Row::new();
        row.insert(eq, Rat::one());
        let mut acc = &reward[s] - &gain[s];
        for (t, p) in &rows[s] {
            match pos(*t) {
                Some(tp) => {
                    let entry = row.entry(tp).or_insert_with(Rat::zero);
                    *entry -= p;
                }
                None => acc += p * &bias[*t],
            }
        }
        row.retain(|_, v| !v.is_zero());
        sys.push(row);
        rhs.push(acc);
    }
    let ht = linalg::solve(k, sys, rhs).expect("transient bias system is regular");
    for (ip, &s) in transient.iter().enumerate() {
        bias[s] = ht[ip].clone();
    }
    GainBias { gain, bias }
}

/// Expected number of steps to reach the target set, `None` when some state
/// misses it with positive probability. Target rows may be arbitrary; they are
/// treated as absorbing.
pub fn expected_hits(rows: &ChainRows, is_target: impl Fn(usize) -> bool) -> Option<Vec<Rat>> {
    let n = rows.len();
    let inner: Vec<usize> = (0..n).filter(|&s| !is_target(s)).collect();
    let pos = |s: usize| inner.binary_search(&s).ok();
    let k = inner.len();
    let mut sys: Vec<linalg::Row> = Vec::with_capacity(k);
    let mut rhs = vec![Rat::one(); k];
    for (eq, &s) in inner.iter().enumerate() {
        if rows[s].is_empty() {
            // Absorbing non-target state never reaches the target.
            return None;
        }
        let mut row = linalg::Row::new();
        row.insert(eq, Rat::one());
        for (t, p) in &rows[s] {
            if let Some(tp) = pos(*t) {
                let entry = row.entry(tp).or_insert_with(Rat::zero);
                *entry -= p;
            }
        }
        row.retain(|_, v| !v.is_zero());
        sys.push(row);
    }
    let h = linalg::solve(k, sys, rhs.drain(..).collect())?;
    if h.iter().any(|v| v < &Rat::zero()) {
        return None;
    }
    let mut full = vec![Rat::zero(); n];
    for (ip, &s) in inner.iter().enumerate() {
        full[s] = h[ip].clone();
    }
    Some(full)
}

/// Probability, per state, of ever visiting a target state.
pub fn reach_probability(rows: &ChainRows, is_target: impl Fn(usize) -> bool) -> Vec<Rat> {
    let n = rows.len();
    // States that cannot reach the target at all have probability 0; solving
    // only on the rest keeps the system regular.
    let mut can = vec![false; n];
    for s in 0..n {
        can[s] = is_target(s);
    }
    loop {
        let mut grew = false;
        for s in 0..n {
            if !can[s] && rows[s].iter().any(|(t, _)| can[*t]) {
                can[s] = true;
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }
    let inner: Vec<usize> = (0..n).filter(|&s| can[s] && !is_target(s)).collect();
    let pos = |s: usize| inner.binary_search(&s).ok();
    let k = inner.len();
    let mut sys: Vec<linalg::Row> = Vec::with_capacity(k);
    let mut rhs = vec![Rat::zero(); k];
    for (eq, &s) in inner.iter().enumerate() {
        let mut row = linalg::Row::new();
        row.insert(eq, Rat::one());
        for (t, p) in &rows[s] {
            if is_target(*t) {
                rhs[eq] += p;
            } else if let Some(tp) = pos(*t) {
                let entry = row.entry(tp).or_insert_with(Rat::zero);
                *entry -= p;
            }
        }
        row.retain(|_, v| !v.is_zero());
        sys.push(row);
    }
    let x = linalg::solve(k, sys, rhs).expect("reachability system is regular");
    let mut full = vec![Rat::zero(); n];
    for s in 0..n {
        if is_target(s) {
            full[s] = Rat::one();
        }
    }
    for (ip, &s) in inner.iter().enumerate() {
        full[s] = x[ip].clone();
    }
    full
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{rat, rat_int};

    fn two_state_flip() -> ChainRows {
        vec![
            vec![(0, rat(1, 2)), (1, rat(1, 2))],
            vec![(0, rat(1, 2)), (1, rat(1, 2))],
        ]
    }

    #[test]
    fn stationary_of_symmetric_chain() {
        let rows = two_state_flip();
        let comps = bsccs(&rows);
        assert_eq!(comps, vec![vec![0, 1]]);
        let pi = stationary(&rows, &comps[0]);
        assert_eq!(pi, vec![rat(1, 2), rat(1, 2)]);
    }

    #[test]
    fn gain_of_deterministic_cycle() {
        // 0 -> 1 -> 0 with rewards 4 and 0: gain 2 everywhere.
        let rows: ChainRows = vec![vec![(1, rat_int(1))], vec![(0, rat_int(1))]];
        let gb = gain_bias(&rows, &[rat_int(4), rat_int(0)]);
        assert_eq!(gb.gain, vec![rat_int(2), rat_int(2)]);
        // Bias difference reflects the phase: h(0) - h(1) = r(0) - g = 2.
        assert_eq!(&gb.bias[0] - &gb.bias[1], rat_int(2));
    }

    #[test]
    fn transient_gain_mixes_absorption() {
        // 0 flips a coin into loop 1 (reward 6) or loop 2 (reward 0).
        let rows: ChainRows = vec![
            vec![(1, rat(1, 2)), (2, rat(1, 2))],
            vec![(1, rat_int(1))],
            vec![(2, rat_int(1))],
        ];
        let gb = gain_bias(&rows, &[rat_int(0), rat_int(6), rat_int(0)]);
        assert_eq!(gb.gain, vec![rat_int(3), rat_int(6), rat_int(0)]);
    }

    #[test]
    fn hitting_times_of_retry_loop() {
        // 0 retries itself with prob 1/2, otherwise hits 1: E = 2 steps.
        let rows: ChainRows = vec![vec![(0, rat(1, 2)), (1, rat(1, 2))], vec![]];
        let h = expected_hits(&rows, |s| s == 1).unwrap();
        assert_eq!(h[0], rat_int(2));
    }

    #[test]
    fn unreachable_targets_return_none() {
        let rows: ChainRows = vec![vec![(0, rat_int(1))], vec![]];
        assert!(expected_hits(&rows, |s| s == 1).is_none());
    }

    #[test]
    fn reach_probability_gambler() {
        // 1 -> {0, 2} fair; 0 and 2 absorbing. P(hit 2 | from 1) = 1/2.
        let rows: ChainRows = vec![vec![], vec![(0, rat(1, 2)), (2, rat(1, 2))], vec![]];
        let p = reach_probability(&rows, |s| s == 2);
        assert_eq!(p, vec![rat_int(0), rat(1, 2), rat_int(1)]);
    }
}
