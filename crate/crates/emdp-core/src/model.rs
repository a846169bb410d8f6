//! Domain types for energy MDPs plus the `.emdp` text format.
//!
//! A model is a finite set of controllable and stochastic states and a total
//! transition relation. Every transition carries an integer counter update and
//! a rational reward; transitions leaving a stochastic state additionally carry
//! a positive probability, and the probabilities per stochastic state sum to
//! exactly 1. Parallel transitions between the same pair of states are allowed
//! and are distinguished by their index.
//!
//! The text format is line oriented with `#` comments:
//!
//! ```text
//! state s controllable
//! state t stochastic
//! trans s -> t update=-1 reward=3/2
//! trans t -> s update=0 reward=0 prob=1/2
//! trans t -> t update=2 reward=0 prob=1/2
//! ```

use crate::numeric::{format_rat, parse_rat, Int, Rat};
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    Controllable,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub src: StateId,
    pub dst: StateId,
    pub update: Int,
    pub reward: Rat,
    /// Present exactly when `src` is stochastic.
    pub prob: Option<Rat>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct State {
    name: String,
    kind: StateKind,
}

/// A validated energy MDP. Immutable after construction and safe to share
/// across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emdp {
    states: Vec<State>,
    transitions: Vec<Transition>,
    out: Vec<Vec<TransId>>,
    by_name: BTreeMap<String, StateId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationRule {
    Totality,
    ProbSum,
    ProbPresence,
    ProbPositive,
    DuplicateState,
    UnknownState,
    BadName,
}

impl fmt::Display for ValidationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = match self {
            ValidationRule::Totality => "totality",
            ValidationRule::ProbSum => "prob-sum",
            ValidationRule::ProbPresence => "prob-presence",
            ValidationRule::ProbPositive => "prob-positive",
            ValidationRule::DuplicateState => "duplicate-state",
            ValidationRule::UnknownState => "unknown-state",
            ValidationRule::BadName => "bad-name",
        };
        f.write_str(text)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("syntax error at {line}:{col}: {message}")]
    Syntax {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("validation error [{rule}] at `{element}`: {detail}")]
    Validation {
        rule: ValidationRule,
        element: String,
        detail: String,
    },
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PathError {
    #[error("step {index}: no transition from `{from}` to `{to}`")]
    NoTransition {
        index: usize,
        from: String,
        to: String,
    },
    #[error("step {index}: transition {trans:?} does not continue the path")]
    Discontinuous { index: usize, trans: TransId },
    #[error("step {index}: multiple transitions from `{from}` to `{to}`; pass explicit transition ids")]
    Ambiguous {
        index: usize,
        from: String,
        to: String,
    },
}

impl Emdp {
    /// Builds and validates a model from raw parts.
    pub fn new(
        states: Vec<(String, StateKind)>,
        transitions: Vec<Transition>,
    ) -> Result<Self, ModelError> {
        let mut by_name = BTreeMap::new();
        for (i, (name, _)) in states.iter().enumerate() {
            if by_name.insert(name.clone(), StateId(i)).is_some() {
                return Err(ModelError::Validation {
                    rule: ValidationRule::DuplicateState,
                    element: name.clone(),
                    detail: "state declared twice".into(),
                });
            }
        }
        let mut out = vec![Vec::new(); states.len()];
        for (i, t) in transitions.iter().enumerate() {
            for endpoint in [t.src, t.dst] {
                if endpoint.0 >= states.len() {
                    return Err(ModelError::Validation {
                        rule: ValidationRule::UnknownState,
                        element: format!("transition {i}"),
                        detail: "endpoint names no declared state".into(),
                    });
                }
            }
            out[t.src.0].push(TransId(i));
        }
        let emdp = Emdp {
            states: states
                .into_iter()
                .map(|(name, kind)| State { name, kind })
                .collect(),
            transitions,
            out,
            by_name,
        };
        emdp.validate()?;
        Ok(emdp)
    }

    /// Checks every structural invariant; [`Emdp::new`] already runs this.
    pub fn validate(&self) -> Result<(), ModelError> {
        for (i, state) in self.states.iter().enumerate() {
            let sid = StateId(i);
            if self.out[i].is_empty() {
                return Err(ModelError::Validation {
                    rule: ValidationRule::Totality,
                    element: state.name.clone(),
                    detail: "state has no outgoing transition".into(),
                });
            }
            match state.kind {
                StateKind::Controllable => {
                    for &tid in &self.out[i] {
                        if self.transition(tid).prob.is_some() {
                            return Err(ModelError::Validation {
                                rule: ValidationRule::ProbPresence,
                                element: state.name.clone(),
                                detail: "controllable state has a transition probability".into(),
                            });
                        }
                    }
                }
                StateKind::Stochastic => {
                    let mut sum = Rat::zero();
                    for &tid in &self.out[i] {
                        match &self.transition(tid).prob {
                            None => {
                                return Err(ModelError::Validation {
                                    rule: ValidationRule::ProbPresence,
                                    element: state.name.clone(),
                                    detail: "stochastic transition lacks a probability".into(),
                                })
                            }
                            Some(p) => {
                                if !p.is_positive() {
                                    return Err(ModelError::Validation {
                                        rule: ValidationRule::ProbPositive,
                                        element: state.name.clone(),
                                        detail: format!("probability {} is not positive", format_rat(p)),
                                    });
                                }
                                sum += p;
                            }
                        }
                    }
                    if !sum.is_one() {
                        return Err(ModelError::Validation {
                            rule: ValidationRule::ProbSum,
                            element: state.name.clone(),
                            detail: format!("probabilities sum to {}", format_rat(&sum)),
                        });
                    }
                    let _ = sid;
                }
            }
        }
        Ok(())
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn trans_count(&self) -> usize {
        self.transitions.len()
    }

    pub fn state_ids(&self) -> impl Iterator<Item = StateId> {
        (0..self.states.len()).map(StateId)
    }

    pub fn trans_ids(&self) -> impl Iterator<Item = TransId> {
        (0..self.transitions.len()).map(TransId)
    }

    pub fn kind(&self, s: StateId) -> StateKind {
        self.states[s.0].kind
    }

    pub fn is_controllable(&self, s: StateId) -> bool {
        self.kind(s) == StateKind::Controllable
    }

    pub fn name(&self, s: StateId) -> &str {
        &self.states[s.0].name
    }

    pub fn out(&self, s: StateId) -> &[TransId] {
        &self.out[s.0]
    }

    pub fn transition(&self, t: TransId) -> &Transition {
        &self.transitions[t.0]
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn state_id(&self, name: &str) -> Option<StateId> {
        self.by_name.get(name).copied()
    }

    /// `M_E`: the largest absolute counter update.
    pub fn max_update(&self) -> Int {
        self.transitions
            .iter()
            .map(|t| t.update.abs())
            .max()
            .unwrap_or_else(Int::zero)
    }

    pub fn min_reward(&self) -> Rat {
        self.transitions
            .iter()
            .map(|t| t.reward.clone())
            .min()
            .expect("total model has transitions")
    }

    pub fn max_reward(&self) -> Rat {
        self.transitions
            .iter()
            .map(|t| t.reward.clone())
            .max()
            .expect("total model has transitions")
    }

    /// Restriction to a subset of states and transitions. Every kept stochastic
    /// state must keep all its outgoing transitions, otherwise the result fails
    /// validation. Returns the restricted model together with the old-to-new
    /// state map and the new-to-old transition map.
    pub fn restrict(
        &self,
        keep_state: impl Fn(StateId) -> bool,
        keep_trans: impl Fn(TransId) -> bool,
    ) -> Result<(Emdp, Vec<Option<StateId>>, Vec<TransId>), ModelError> {
        let mut old_to_new = vec![None; self.states.len()];
        let mut states = Vec::new();
        for s in self.state_ids() {
            if keep_state(s) {
                old_to_new[s.0] = Some(StateId(states.len()));
                states.push((self.name(s).to_string(), self.kind(s)));
            }
        }
        let mut transitions = Vec::new();
        let mut trans_back = Vec::new();
        for t in self.trans_ids() {
            let tr = self.transition(t);
            let (Some(src), Some(dst)) = (old_to_new[tr.src.0], old_to_new[tr.dst.0]) else {
                continue;
            };
            if !keep_trans(t) {
                continue;
            }
            transitions.push(Transition {
                src,
                dst,
                update: tr.update.clone(),
                reward: tr.reward.clone(),
                prob: tr.prob.clone(),
            });
            trans_back.push(t);
        }
        let restricted = Emdp::new(states, transitions)?;
        Ok((restricted, old_to_new, trans_back))
    }
}

impl fmt::Display for Emdp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for state in &self.states {
            let kind = match state.kind {
                StateKind::Controllable => "controllable",
                StateKind::Stochastic => "stochastic",
            };
            writeln!(f, "state {} {}", state.name, kind)?;
        }
        for t in &self.transitions {
            write!(
                f,
                "trans {} -> {} update={} reward={}",
                self.name(t.src),
                self.name(t.dst),
                t.update,
                format_rat(&t.reward)
            )?;
            if let Some(p) = &t.prob {
                write!(f, " prob={}", format_rat(p))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// A control state together with the current energy level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration {
    pub state: StateId,
    pub counter: Int,
}

impl Configuration {
    pub fn new(state: StateId, counter: impl Into<Int>) -> Self {
        Configuration {
            state,
            counter: counter.into(),
        }
    }

    /// Parses the CLI notation `state(counter)`.
    pub fn parse(text: &str, e: &Emdp) -> Result<Self, String> {
        let open = text.find('(').ok_or("expected `state(counter)`")?;
        if !text.ends_with(')') {
            return Err("expected `state(counter)`".into());
        }
        let name = &text[..open];
        let counter_text = &text[open + 1..text.len() - 1];
        let state = e
            .state_id(name)
            .ok_or_else(|| format!("unknown state `{name}`"))?;
        let counter: Int = counter_text
            .parse()
            .map_err(|_| format!("invalid counter `{counter_text}`"))?;
        Ok(Configuration { state, counter })
    }

    pub fn display<'a>(&'a self, e: &'a Emdp) -> impl fmt::Display + 'a {
        struct D<'a>(&'a Configuration, &'a Emdp);
        impl fmt::Display for D<'_> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", self.1.name(self.0.state), self.0.counter)
            }
        }
        D(self, e)
    }
}

/// Energy levels along a path of transitions starting at level `n0`:
/// level 0 is `n0`, level `i+1` adds the update of the `i`-th transition.
pub fn energy_level(e: &Emdp, path: &[TransId], n0: &Int) -> Result<Vec<Int>, PathError> {
    let mut levels = Vec::with_capacity(path.len() + 1);
    levels.push(n0.clone());
    let mut here: Option<StateId> = None;
    for (index, &tid) in path.iter().enumerate() {
        let t = e.transition(tid);
        if let Some(prev) = here {
            if t.src != prev {
                return Err(PathError::Discontinuous { index, trans: tid });
            }
        }
        here = Some(t.dst);
        levels.push(levels.last().unwrap() + &t.update);
    }
    Ok(levels)
}

/// Resolves a path given by state names into transition ids, requiring each
/// consecutive pair to be connected by exactly one transition.
pub fn resolve_state_path(e: &Emdp, states: &[StateId]) -> Result<Vec<TransId>, PathError> {
    let mut path = Vec::new();
    for (index, pair) in states.windows(2).enumerate() {
        let (from, to) = (pair[0], pair[1]);
        let mut candidates = e
            .out(from)
            .iter()
            .copied()
            .filter(|&t| e.transition(t).dst == to);
        match (candidates.next(), candidates.next()) {
            (None, _) => {
                return Err(PathError::NoTransition {
                    index,
                    from: e.name(from).to_string(),
                    to: e.name(to).to_string(),
                })
            }
            (Some(t), None) => path.push(t),
            (Some(_), Some(_)) => {
                return Err(PathError::Ambiguous {
                    index,
                    from: e.name(from).to_string(),
                    to: e.name(to).to_string(),
                })
            }
        }
    }
    Ok(path)
}

/// Parses the `.emdp` text format: parsing first, then validation.
pub fn parse_emdp(text: &str) -> Result<Emdp, ModelError> {
    let mut states = Vec::new();
    let mut names = BTreeMap::new();
    let mut raw_transitions: Vec<(String, String, Int, Rat, Option<Rat>, usize, usize)> = Vec::new();
    for (line_index, raw_line) in text.lines().enumerate() {
        let line_no = line_index + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        };
        let tokens = tokenize(line);
        if tokens.is_empty() {
            continue;
        }
        let syntax = |col: usize, message: String| ModelError::Syntax {
            line: line_no,
            col,
            message,
        };
        match tokens[0].text {
            "state" => {
                if tokens.len() != 3 {
                    return Err(syntax(
                        tokens[0].col,
                        "expected `state <id> controllable|stochastic`".into(),
                    ));
                }
                let name = tokens[1].text;
                if !valid_name(name) {
                    return Err(syntax(tokens[1].col, format!("invalid state id `{name}`")));
                }
                let kind = match tokens[2].text {
                    "controllable" => StateKind::Controllable,
                    "stochastic" => StateKind::Stochastic,
                    other => {
                        return Err(syntax(
                            tokens[2].col,
                            format!("expected `controllable` or `stochastic`, found `{other}`"),
                        ))
                    }
                };
                // Duplicates are a validation concern, not a syntax one.
                names.entry(name.to_string()).or_insert(states.len());
                states.push((name.to_string(), kind));
            }
            "trans" => {
                if tokens.len() < 6 || tokens[2].text != "->" {
                    return Err(syntax(
                        tokens[0].col,
                        "expected `trans <src> -> <dst> update=<int> reward=<rational> [prob=<rational>]`"
                            .into(),
                    ));
                }
                let src = tokens[1].text.to_string();
                let dst = tokens[3].text.to_string();
                let mut update: Option<Int> = None;
                let mut reward: Option<Rat> = None;
                let mut prob: Option<Rat> = None;
                for token in &tokens[4..] {
                    let (key, value) = token
                        .text
                        .split_once('=')
                        .ok_or_else(|| syntax(token.col, format!("expected `key=value`, found `{}`", token.text)))?;
                    match key {
                        "update" => {
                            let v: Int = value.parse().map_err(|_| {
                                syntax(token.col, format!("invalid integer `{value}`"))
                            })?;
                            update = Some(v);
                        }
                        "reward" => {
                            let v = parse_rat(value)
                                .map_err(|m| syntax(token.col, format!("invalid reward: {m}")))?;
                            reward = Some(v);
                        }
                        "prob" => {
                            let v = parse_rat(value)
                                .map_err(|m| syntax(token.col, format!("invalid probability: {m}")))?;
                            prob = Some(v);
                        }
                        other => {
                            return Err(syntax(token.col, format!("unknown attribute `{other}`")))
                        }
                    }
                }
                let update = update
                    .ok_or_else(|| syntax(tokens[0].col, "missing `update=`".into()))?;
                let reward = reward
                    .ok_or_else(|| syntax(tokens[0].col, "missing `reward=`".into()))?;
                raw_transitions.push((src, dst, update, reward, prob, line_no, tokens[1].col));
            }
            other => {
                return Err(syntax(
                    tokens[0].col,
                    format!("expected `state` or `trans`, found `{other}`"),
                ))
            }
        }
    }
    if states.is_empty() {
        return Err(ModelError::Syntax {
            line: 1,
            col: 1,
            message: "empty model: no state declarations".into(),
        });
    }
    let mut transitions = Vec::new();
    for (src, dst, update, reward, prob, line, col) in raw_transitions {
        let lookup = |name: &str| {
            names.get(name).copied().map(StateId).ok_or(ModelError::Syntax {
                line,
                col,
                message: format!("unknown state `{name}` in transition"),
            })
        };
        transitions.push(Transition {
            src: lookup(&src)?,
            dst: lookup(&dst)?,
            update,
            reward,
            prob,
        });
    }
    Emdp::new(states, transitions)
}

fn valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

struct Token<'a> {
    text: &'a str,
    col: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let mut col = 1;
    let mut start = None;
    for (i, c) in line.char_indices().chain([(line.len(), ' ')]) {
        if c.is_whitespace() {
            if let Some((s, c0)) = start.take() {
                tokens.push(Token {
                    text: &line[s..i],
                    col: c0,
                });
            }
        } else if start.is_none() {
            start = Some((i, col));
        }
        col += 1;
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::numeric::{int, rat_int};

    #[test]
    fn parses_fig1() {
        let e = fixtures::fig1();
        assert_eq!(e.state_count(), 2);
        assert_eq!(e.trans_count(), 4);
        assert_eq!(e.max_update(), int(2));
        let s = e.state_id("s").unwrap();
        assert_eq!(e.kind(s), StateKind::Stochastic);
    }

    #[test]
    fn parses_minimal_total_model() {
        let e = parse_emdp("state a controllable\ntrans a -> a update=1 reward=3\n").unwrap();
        assert_eq!(e.state_count(), 1);
        assert_eq!(e.trans_count(), 1);
        assert_eq!(e.transition(TransId(0)).reward, rat_int(3));
    }

    #[test]
    fn parses_fig2l() {
        let e = fixtures::fig2l();
        assert_eq!(e.state_count(), 4);
        assert_eq!(e.trans_count(), 8);
        assert_eq!(e.max_update(), int(1));
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse_emdp("state s controllable\nstate t wobbly\n").unwrap_err();
        assert_eq!(
            err,
            ModelError::Syntax {
                line: 2,
                col: 9,
                message: "expected `controllable` or `stochastic`, found `wobbly`".into()
            }
        );
        let err = parse_emdp("").unwrap_err();
        assert!(matches!(err, ModelError::Syntax { .. }));
    }

    #[test]
    fn rejects_bad_probability_sum() {
        let text = "state s stochastic\n\
                    trans s -> s update=0 reward=0 prob=1/2\n\
                    trans s -> s update=1 reward=0 prob=1/4\n";
        let err = parse_emdp(text).unwrap_err();
        match err {
            ModelError::Validation { rule, element, detail } => {
                assert_eq!(rule, ValidationRule::ProbSum);
                assert_eq!(element, "s");
                assert!(detail.contains("3/4"), "{detail}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_totality_violation() {
        let text = "state s controllable\nstate t controllable\ntrans s -> t update=0 reward=0\n";
        let err = parse_emdp(text).unwrap_err();
        assert!(matches!(
            err,
            ModelError::Validation {
                rule: ValidationRule::Totality,
                ..
            }
        ));
    }

    #[test]
    fn rejects_prob_on_controllable_and_missing_prob() {
        let bad1 = "state s controllable\ntrans s -> s update=0 reward=0 prob=1\n";
        assert!(matches!(
            parse_emdp(bad1).unwrap_err(),
            ModelError::Validation {
                rule: ValidationRule::ProbPresence,
                ..
            }
        ));
        let bad2 = "state s stochastic\ntrans s -> s update=0 reward=0\n";
        assert!(matches!(
            parse_emdp(bad2).unwrap_err(),
            ModelError::Validation {
                rule: ValidationRule::ProbPresence,
                ..
            }
        ));
    }

    #[test]
    fn print_parse_round_trip() {
        for e in [
            fixtures::fig1(),
            fixtures::fig2l(),
            fixtures::fig2r(),
            fixtures::fig3(),
            fixtures::pump2(),
        ] {
            let reparsed = parse_emdp(&e.to_string()).unwrap();
            assert_eq!(e, reparsed);
        }
    }

    #[test]
    fn energy_levels_follow_updates() {
        let e = fixtures::fig1();
        let s = e.state_id("s").unwrap();
        let t = e.state_id("t").unwrap();
        let path = resolve_state_path(&e, &[s, s, t]).unwrap();
        assert_eq!(
            energy_level(&e, &path, &int(0)).unwrap(),
            vec![int(0), int(2), int(2)]
        );

        let e = fixtures::fig2l();
        let ids: Vec<_> = ["s", "t", "u", "t"]
            .iter()
            .map(|n| e.state_id(n).unwrap())
            .collect();
        let path = resolve_state_path(&e, &ids).unwrap();
        assert_eq!(
            energy_level(&e, &path, &int(3)).unwrap(),
            vec![int(3), int(3), int(2), int(1)]
        );
    }

    #[test]
    fn energy_level_rejects_broken_paths() {
        let e = fixtures::fig2l();
        let s = e.state_id("s").unwrap();
        let v = e.state_id("v").unwrap();
        assert!(matches!(
            resolve_state_path(&e, &[s, v]),
            Err(PathError::NoTransition { .. })
        ));
        // Discontinuous transition ids: s->s loop followed by a t transition.
        let s_loop = e.out(s)[0];
        let t = e.state_id("t").unwrap();
        let t_out = e.out(t)[0];
        assert!(matches!(
            energy_level(&e, &[s_loop, t_out], &int(0)),
            Err(PathError::Discontinuous { .. })
        ));
    }

    #[test]
    fn configuration_parsing() {
        let e = fixtures::fig1();
        let cfg = Configuration::parse("s(-3)", &e).unwrap();
        assert_eq!(cfg.state, e.state_id("s").unwrap());
        assert_eq!(cfg.counter, int(-3));
        assert_eq!(cfg.display(&e).to_string(), "s(-3)");
        assert!(Configuration::parse("nope(1)", &e).is_err());
        assert!(Configuration::parse("s", &e).is_err());
    }

    #[test]
    fn energy_level_additivity() {
        // Splitting a path and chaining with the intermediate level matches.
        let e = fixtures::fig2l();
        let ids: Vec<_> = ["s", "s", "t", "u", "t", "t"]
            .iter()
            .map(|n| e.state_id(n).unwrap())
            .collect();
        let path = resolve_state_path(&e, &ids).unwrap();
        let full = energy_level(&e, &path, &int(5)).unwrap();
        for cut in 0..=path.len() {
            let head = energy_level(&e, &path[..cut], &int(5)).unwrap();
            let tail = energy_level(&e, &path[cut..], head.last().unwrap()).unwrap();
            assert_eq!(&full[cut..], &tail[..]);
        }
    }
}
