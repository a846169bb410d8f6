//! Executable strategy machines.
//!
//! A machine is a tuple of initial memory, a memory update observing the
//! configuration after every step, and a `next` function mapping a
//! controllable state and the current memory to a distribution over its
//! outgoing transitions. Machines observe the energy counter: the switching
//! strategies of the synthesis layer are functions of the running level
//! sequence, which the memory tracks incrementally.
//!
//! Identical observation sequences yield identical memory sequences; the
//! simulator relies on this for reproducible traces, and the replay tests
//! assert it directly.

use crate::model::{Configuration, Emdp, StateId, TransId};
use crate::numeric::{ceil_pow_three_quarters, int_serde, rat_serde, Int, Rat};
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistEntry {
    pub trans: TransId,
    #[serde(with = "rat_serde")]
    pub prob: Rat,
}

/// Probability distribution over outgoing transitions of one state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dist(pub Vec<DistEntry>);

impl Dist {
    pub fn dirac(trans: TransId) -> Self {
        Dist(vec![DistEntry {
            trans,
            prob: Rat::one(),
        }])
    }

    pub fn from_entries(entries: Vec<(TransId, Rat)>) -> Self {
        Dist(
            entries
                .into_iter()
                .map(|(trans, prob)| DistEntry { trans, prob })
                .collect(),
        )
    }

    pub fn is_dirac(&self) -> bool {
        self.0.len() == 1
    }

    /// Sums to one, every weight positive, every transition leaves `state`.
    pub fn check(&self, e: &Emdp, state: StateId) -> Result<(), String> {
        let mut sum = Rat::zero();
        for entry in &self.0 {
            if !entry.prob.is_positive() {
                return Err(format!("non-positive weight on transition {:?}", entry.trans));
            }
            if e.transition(entry.trans).src != state {
                return Err(format!(
                    "transition {:?} does not originate at `{}`",
                    entry.trans,
                    e.name(state)
                ));
            }
            sum += &entry.prob;
        }
        if !sum.is_one() {
            return Err(format!("weights sum to {} instead of 1", sum));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum StrategyError {
    #[error("strategy defines no distribution for state index {0}")]
    NoDistribution(usize),
}

/// Memoryless table: one distribution per state the machine can be queried at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorylessTable {
    pub choices: Vec<Option<Dist>>,
}

impl MemorylessTable {
    pub fn empty(states: usize) -> Self {
        MemorylessTable {
            choices: vec![None; states],
        }
    }

    pub fn deterministic(choices: Vec<Option<TransId>>) -> Self {
        MemorylessTable {
            choices: choices.into_iter().map(|c| c.map(Dist::dirac)).collect(),
        }
    }

    pub fn next(&self, state: StateId) -> Result<&Dist, StrategyError> {
        self.choices
            .get(state.0)
            .and_then(|c| c.as_ref())
            .ok_or(StrategyError::NoDistribution(state.0))
    }

    pub fn is_deterministic(&self) -> bool {
        self.choices
            .iter()
            .flatten()
            .all(Dist::is_dirac)
    }
}

/// Finite policy over counter-bounded configurations. The memory tracks a
/// level coordinate following the clamped dynamics of the unfolding the policy
/// was solved on: `coord' = min(coord + update, cap)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelPolicyMachine {
    /// Real counter value corresponding to coordinate 0.
    #[serde(with = "int_serde")]
    pub base: Int,
    pub cap: u64,
    /// Indexed `[coordinate][state]`.
    pub choices: Vec<Vec<Option<Dist>>>,
}

/// Optimal switching machine from a type I core: plays the flow strategy while
/// the level is healthy and latches into the pumping strategy on the low test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Type1Machine {
    /// Latch threshold `L`.
    #[serde(with = "int_serde")]
    pub low: Int,
    /// Release threshold `H`.
    #[serde(with = "int_serde")]
    pub high: Int,
    pub mu: MemorylessTable,
    pub pump: MemorylessTable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Type2Phase {
    Mu1 { left: u64 },
    Mu2 { left: u64 },
    Kappa,
    Pump {
        #[serde(with = "int_serde")]
        target: Int,
    },
}

/// Staged machine from a type II core: stage `i` plays the two component
/// strategies for `p1·N·i` and `p2·N·i` steps, returns to the anchor, then
/// pumps to the progressive target before starting stage `i+1`. Dropping below
/// the threshold aborts the stage straight into the pumping phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Type2Machine {
    pub mu1: MemorylessTable,
    pub mu2: MemorylessTable,
    pub kappa: MemorylessTable,
    pub pump: MemorylessTable,
    pub anchor: StateId,
    /// `p1 · N` and `p2 · N`.
    pub steps1: u64,
    pub steps2: u64,
    /// `N`.
    pub block: u64,
    /// `TH`.
    #[serde(with = "int_serde")]
    pub threshold: Int,
    /// Freeze the stage index here for a finite-memory machine.
    pub stage_cap: Option<u64>,
}

impl Type2Machine {
    pub fn pump_target(&self, stage: u64) -> Int {
        let k = Int::from(stage) * Int::from(self.block);
        &self.threshold + ceil_pow_three_quarters(&k)
    }

    fn next_stage(&self, stage: u64) -> u64 {
        match self.stage_cap {
            Some(cap) => (stage + 1).min(cap),
            None => stage + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseAPhase {
    pub idx: usize,
    pub left: u64,
}

/// Mixing machine for strongly connected models with positive trend optimum:
/// cycles through the weighted memoryless strategies in fixed-length blocks
/// (each block strategy steers itself back into its component), and
/// permanently switches to the safe strategy when the level reaches the danger
/// threshold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseAMachine {
    pub blocks: Vec<(MemorylessTable, u64)>,
    #[serde(with = "int_serde")]
    pub danger: Int,
    pub safe: MemorylessTable,
    /// Counter height above which the machine is ε-optimal.
    #[serde(with = "int_serde")]
    pub safe_start_level: Int,
}

/// Low-counter machine: follows a finite window policy while the level stays
/// at or below the window cap and permanently hands over to the high-region
/// machine on the first crossing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowedMachine {
    pub cap: u64,
    /// Indexed `[level][state]`; the level is the real counter inside the
    /// window.
    pub policy: Vec<Vec<Option<Dist>>>,
    pub handover: Box<StrategyMachine>,
}

/// Balanced-case machine: travels to the anchor state, then locks onto a
/// finite level-indexed stable policy around the anchor level; the safe
/// strategy takes over permanently if the level reaches the danger threshold
/// before anchoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchoredMachine {
    pub travel: MemorylessTable,
    pub anchor: StateId,
    /// Anchoring requires meeting the anchor at at least this level.
    #[serde(with = "int_serde")]
    pub anchor_level: Int,
    /// Coordinate assigned at anchoring time.
    pub anchor_coord: u64,
    pub cap: u64,
    /// Indexed `[coordinate][state]`, clamped dynamics as in level policies.
    pub policy: Vec<Vec<Option<Dist>>>,
    #[serde(with = "int_serde")]
    pub danger: Int,
    pub safe: MemorylessTable,
}

/// Composite machine for general models: mimics the condensation-optimal
/// strategy through transient states, permanently hands over to a per-MEC
/// machine on settlement, and latches to the safe strategy on danger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeMachine {
    /// Transit choices: condensation mimicry plus reach phases, memoryless.
    pub transient: MemorylessTable,
    /// Per state: index of its end component, if any.
    pub mec_of: Vec<Option<usize>>,
    /// Per end component: inner machine when the condensation strategy settles there.
    pub settle: Vec<Option<Box<StrategyMachine>>>,
    #[serde(with = "int_serde")]
    pub danger: Int,
    pub safe: MemorylessTable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyMachine {
    Memoryless(MemorylessTable),
    LevelPolicy(LevelPolicyMachine),
    Type1(Type1Machine),
    Type2(Type2Machine),
    CaseA(CaseAMachine),
    Anchored(AnchoredMachine),
    Windowed(WindowedMachine),
    Composite(CompositeMachine),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Memory {
    Unit,
    Level {
        coord: u64,
        prev: Int,
    },
    Type1 {
        low: bool,
    },
    Type2 {
        stage: u64,
        phase: Type2Phase,
    },
    CaseA {
        danger: bool,
        phase: CaseAPhase,
    },
    Anchored {
        danger: bool,
        /// Level coordinate once anchored, with the previous counter for the
        /// clamped coordinate recursion.
        coord: Option<u64>,
        prev: Int,
    },
    Windowed {
        coord: u64,
        inner: Option<Box<Memory>>,
    },
    Composite {
        danger: bool,
        inner: Option<Box<Memory>>,
    },
}

impl StrategyMachine {
    pub fn memoryless_deterministic(choices: Vec<Option<TransId>>) -> Self {
        StrategyMachine::Memoryless(MemorylessTable::deterministic(choices))
    }

    pub fn init(&self, cfg: &Configuration) -> Memory {
        match self {
            StrategyMachine::Memoryless(_) => Memory::Unit,
            StrategyMachine::LevelPolicy(m) => {
                let offset = (&cfg.counter - &m.base).max(Int::zero());
                let coord = offset.min(Int::from(m.cap));
                Memory::Level {
                    coord: u64::try_from(&coord).expect("coordinate fits"),
                    prev: cfg.counter.clone(),
                }
            }
            StrategyMachine::Type1(m) => Memory::Type1 {
                low: cfg.counter <= m.low,
            },
            StrategyMachine::Type2(m) => {
                let phase = if cfg.counter < m.threshold {
                    Type2Phase::Pump {
                        target: m.pump_target(1),
                    }
                } else {
                    Type2Phase::Mu1 { left: m.steps1 }
                };
                Memory::Type2 { stage: 1, phase }
            }
            StrategyMachine::CaseA(m) => Memory::CaseA {
                danger: cfg.counter <= m.danger,
                phase: CaseAPhase {
                    idx: 0,
                    left: m.blocks[0].1,
                },
            },
            StrategyMachine::Anchored(m) => {
                let anchored = cfg.state == m.anchor && cfg.counter >= m.anchor_level;
                Memory::Anchored {
                    danger: !anchored && cfg.counter <= m.danger,
                    coord: anchored.then_some(m.anchor_coord),
                    prev: cfg.counter.clone(),
                }
            }
            StrategyMachine::Windowed(m) => {
                if cfg.counter > Int::from(m.cap) {
                    Memory::Windowed {
                        coord: 0,
                        inner: Some(Box::new(m.handover.init(cfg))),
                    }
                } else {
                    let coord = cfg.counter.clone().max(Int::zero());
                    Memory::Windowed {
                        coord: u64::try_from(&coord).expect("window coordinate fits"),
                        inner: None,
                    }
                }
            }
            StrategyMachine::Composite(m) => {
                if cfg.counter <= m.danger {
                    return Memory::Composite {
                        danger: true,
                        inner: None,
                    };
                }
                let inner = m.mec_of[cfg.state.0]
                    .and_then(|mec| m.settle[mec].as_ref())
                    .map(|inner| Box::new(inner.init(cfg)));
                Memory::Composite {
                    danger: false,
                    inner,
                }
            }
        }
    }

    pub fn update(&self, mem: &Memory, state: StateId, counter: &Int) -> Memory {
        match (self, mem) {
            (StrategyMachine::Memoryless(_), Memory::Unit) => Memory::Unit,
            (StrategyMachine::LevelPolicy(m), Memory::Level { coord, prev }) => {
                let step = counter - prev;
                let next = (Int::from(*coord) + step)
                    .max(Int::zero())
                    .min(Int::from(m.cap));
                Memory::Level {
                    coord: u64::try_from(&next).expect("coordinate fits"),
                    prev: counter.clone(),
                }
            }
            (StrategyMachine::Type1(m), Memory::Type1 { low }) => {
                let low = if *counter <= m.low {
                    true
                } else if *counter > m.high {
                    false
                } else {
                    *low
                };
                Memory::Type1 { low }
            }
            (StrategyMachine::Type2(m), Memory::Type2 { stage, phase }) => {
                type2_update(m, *stage, phase, state, counter)
            }
            (StrategyMachine::CaseA(m), Memory::CaseA { danger, phase }) => {
                if *danger {
                    return mem.clone();
                }
                if *counter <= m.danger {
                    return Memory::CaseA {
                        danger: true,
                        phase: phase.clone(),
                    };
                }
                let _ = state;
                let phase = if phase.left > 1 {
                    CaseAPhase {
                        idx: phase.idx,
                        left: phase.left - 1,
                    }
                } else {
                    let idx = (phase.idx + 1) % m.blocks.len();
                    CaseAPhase {
                        idx,
                        left: m.blocks[idx].1,
                    }
                };
                Memory::CaseA {
                    danger: false,
                    phase,
                }
            }
            (StrategyMachine::Anchored(m), Memory::Anchored { danger, coord, prev }) => {
                if *danger {
                    return mem.clone();
                }
                if let Some(c) = coord {
                    let step = counter - prev;
                    let next = (Int::from(*c) + step)
                        .max(Int::zero())
                        .min(Int::from(m.cap));
                    return Memory::Anchored {
                        danger: false,
                        coord: Some(u64::try_from(&next).expect("coordinate fits")),
                        prev: counter.clone(),
                    };
                }
                if state == m.anchor && *counter >= m.anchor_level {
                    return Memory::Anchored {
                        danger: false,
                        coord: Some(m.anchor_coord),
                        prev: counter.clone(),
                    };
                }
                Memory::Anchored {
                    danger: *counter <= m.danger,
                    coord: None,
                    prev: counter.clone(),
                }
            }
            (StrategyMachine::Windowed(m), Memory::Windowed { coord, inner }) => {
                if let Some(mem) = inner {
                    return Memory::Windowed {
                        coord: *coord,
                        inner: Some(Box::new(m.handover.update(mem, state, counter))),
                    };
                }
                if counter > &Int::from(m.cap) {
                    let cfg = Configuration {
                        state,
                        counter: counter.clone(),
                    };
                    return Memory::Windowed {
                        coord: *coord,
                        inner: Some(Box::new(m.handover.init(&cfg))),
                    };
                }
                let clamped = counter.clone().max(Int::zero());
                Memory::Windowed {
                    coord: u64::try_from(&clamped).expect("window coordinate fits"),
                    inner: None,
                }
            }
            (StrategyMachine::Composite(m), Memory::Composite { danger, inner }) => {
                if *danger {
                    return mem.clone();
                }
                if let Some(inner_mem) = inner {
                    let mec = m.mec_of[state.0].expect("settled runs stay inside their component");
                    let machine = m.settle[mec].as_ref().expect("settled component has a machine");
                    return Memory::Composite {
                        danger: false,
                        inner: Some(Box::new(machine.update(inner_mem, state, counter))),
                    };
                }
                if *counter <= m.danger {
                    return Memory::Composite {
                        danger: true,
                        inner: None,
                    };
                }
                let inner = m.mec_of[state.0]
                    .and_then(|mec| m.settle[mec].as_ref())
                    .map(|machine| {
                        Box::new(machine.init(&Configuration {
                            state,
                            counter: counter.clone(),
                        }))
                    });
                Memory::Composite {
                    danger: false,
                    inner,
                }
            }
            _ => panic!("memory does not belong to this machine"),
        }
    }

    pub fn next<'a>(&'a self, state: StateId, mem: &'a Memory) -> Result<&'a Dist, StrategyError> {
        match (self, mem) {
            (StrategyMachine::Memoryless(t), Memory::Unit) => t.next(state),
            (StrategyMachine::LevelPolicy(m), Memory::Level { coord, .. }) => m
                .choices
                .get(*coord as usize)
                .and_then(|row| row.get(state.0))
                .and_then(|c| c.as_ref())
                .ok_or(StrategyError::NoDistribution(state.0)),
            (StrategyMachine::Type1(m), Memory::Type1 { low }) => {
                if *low {
                    m.pump.next(state)
                } else {
                    m.mu.next(state)
                }
            }
            (StrategyMachine::Type2(m), Memory::Type2 { phase, .. }) => match phase {
                Type2Phase::Mu1 { .. } => m.mu1.next(state),
                Type2Phase::Mu2 { .. } => m.mu2.next(state),
                Type2Phase::Kappa => m.kappa.next(state),
                Type2Phase::Pump { .. } => m.pump.next(state),
            },
            (StrategyMachine::CaseA(m), Memory::CaseA { danger, phase }) => {
                if *danger {
                    m.safe.next(state)
                } else {
                    m.blocks[phase.idx].0.next(state)
                }
            }
            (StrategyMachine::Anchored(m), Memory::Anchored { danger, coord, .. }) => {
                if *danger {
                    m.safe.next(state)
                } else if let Some(c) = coord {
                    m.policy
                        .get(*c as usize)
                        .and_then(|row| row.get(state.0))
                        .and_then(|choice| choice.as_ref())
                        .ok_or(StrategyError::NoDistribution(state.0))
                } else {
                    m.travel.next(state)
                }
            }
            (StrategyMachine::Windowed(m), Memory::Windowed { coord, inner }) => {
                if let Some(mem) = inner {
                    m.handover.next(state, mem)
                } else {
                    m.policy
                        .get(*coord as usize)
                        .and_then(|row| row.get(state.0))
                        .and_then(|choice| choice.as_ref())
                        .ok_or(StrategyError::NoDistribution(state.0))
                }
            }
            (StrategyMachine::Composite(m), Memory::Composite { danger, inner }) => {
                if *danger {
                    m.safe.next(state)
                } else if let Some(inner_mem) = inner {
                    let mec = m.mec_of[state.0].ok_or(StrategyError::NoDistribution(state.0))?;
                    let machine = m.settle[mec]
                        .as_ref()
                        .ok_or(StrategyError::NoDistribution(state.0))?;
                    machine.next(state, inner_mem)
                } else {
                    m.transient.next(state)
                }
            }
            _ => panic!("memory does not belong to this machine"),
        }
    }

    /// Checks that every distribution the machine can ever produce is a
    /// well-formed distribution over outgoing transitions of its state.
    pub fn check(&self, e: &Emdp) -> Result<(), String> {
        fn check_table(t: &MemorylessTable, e: &Emdp) -> Result<(), String> {
            for (i, choice) in t.choices.iter().enumerate() {
                if let Some(dist) = choice {
                    dist.check(e, StateId(i))?;
                }
            }
            Ok(())
        }
        match self {
            StrategyMachine::Memoryless(t) => check_table(t, e),
            StrategyMachine::LevelPolicy(m) => {
                for row in &m.choices {
                    for (i, choice) in row.iter().enumerate() {
                        if let Some(dist) = choice {
                            dist.check(e, StateId(i))?;
                        }
                    }
                }
                Ok(())
            }
            StrategyMachine::Type1(m) => {
                check_table(&m.mu, e)?;
                check_table(&m.pump, e)
            }
            StrategyMachine::Type2(m) => {
                check_table(&m.mu1, e)?;
                check_table(&m.mu2, e)?;
                check_table(&m.kappa, e)?;
                check_table(&m.pump, e)
            }
            StrategyMachine::CaseA(m) => {
                if m.blocks.is_empty() {
                    return Err("mixing machine without blocks".into());
                }
                for (table, steps) in &m.blocks {
                    if *steps == 0 {
                        return Err("zero-length mixing block".into());
                    }
                    check_table(table, e)?;
                }
                check_table(&m.safe, e)
            }
            StrategyMachine::Windowed(m) => {
                for row in &m.policy {
                    for (i, choice) in row.iter().enumerate() {
                        if let Some(dist) = choice {
                            dist.check(e, StateId(i))?;
                        }
                    }
                }
                m.handover.check(e)
            }
            StrategyMachine::Anchored(m) => {
                check_table(&m.travel, e)?;
                check_table(&m.safe, e)?;
                for row in &m.policy {
                    for (i, choice) in row.iter().enumerate() {
                        if let Some(dist) = choice {
                            dist.check(e, StateId(i))?;
                        }
                    }
                }
                if m.anchor_coord > m.cap {
                    return Err("anchor coordinate outside the window".into());
                }
                Ok(())
            }
            StrategyMachine::Composite(m) => {
                check_table(&m.transient, e)?;
                check_table(&m.safe, e)?;
                for inner in m.settle.iter().flatten() {
                    inner.check(e)?;
                }
                Ok(())
            }
        }
    }

    /// Re-indexes a machine built for a restricted model into the parent
    /// model's ids. `state_map[i]` and `trans_map[i]` give the parent id of
    /// restricted state/transition `i`.
    pub fn lift(
        &self,
        state_map: &[StateId],
        trans_map: &[TransId],
        parent_states: usize,
    ) -> StrategyMachine {
        let dist = |d: &Dist| {
            Dist(
                d.0.iter()
                    .map(|en| DistEntry {
                        trans: trans_map[en.trans.0],
                        prob: en.prob.clone(),
                    })
                    .collect(),
            )
        };
        let table = |t: &MemorylessTable| {
            let mut choices = vec![None; parent_states];
            for (i, choice) in t.choices.iter().enumerate() {
                choices[state_map[i].0] = choice.as_ref().map(&dist);
            }
            MemorylessTable { choices }
        };
        let rows = |rows: &[Vec<Option<Dist>>]| {
            rows.iter()
                .map(|row| {
                    let mut out = vec![None; parent_states];
                    for (i, choice) in row.iter().enumerate() {
                        out[state_map[i].0] = choice.as_ref().map(&dist);
                    }
                    out
                })
                .collect::<Vec<_>>()
        };
        match self {
            StrategyMachine::Memoryless(t) => StrategyMachine::Memoryless(table(t)),
            StrategyMachine::LevelPolicy(m) => StrategyMachine::LevelPolicy(LevelPolicyMachine {
                base: m.base.clone(),
                cap: m.cap,
                choices: rows(&m.choices),
            }),
            StrategyMachine::Type1(m) => StrategyMachine::Type1(Type1Machine {
                low: m.low.clone(),
                high: m.high.clone(),
                mu: table(&m.mu),
                pump: table(&m.pump),
            }),
            StrategyMachine::Type2(m) => StrategyMachine::Type2(Type2Machine {
                mu1: table(&m.mu1),
                mu2: table(&m.mu2),
                kappa: table(&m.kappa),
                pump: table(&m.pump),
                anchor: state_map[m.anchor.0],
                steps1: m.steps1,
                steps2: m.steps2,
                block: m.block,
                threshold: m.threshold.clone(),
                stage_cap: m.stage_cap,
            }),
            StrategyMachine::CaseA(m) => StrategyMachine::CaseA(CaseAMachine {
                blocks: m.blocks.iter().map(|(t, len)| (table(t), *len)).collect(),
                danger: m.danger.clone(),
                safe: table(&m.safe),
                safe_start_level: m.safe_start_level.clone(),
            }),
            StrategyMachine::Windowed(m) => StrategyMachine::Windowed(WindowedMachine {
                cap: m.cap,
                policy: rows(&m.policy),
                handover: Box::new(m.handover.lift(state_map, trans_map, parent_states)),
            }),
            StrategyMachine::Anchored(m) => StrategyMachine::Anchored(AnchoredMachine {
                travel: table(&m.travel),
                anchor: state_map[m.anchor.0],
                anchor_level: m.anchor_level.clone(),
                anchor_coord: m.anchor_coord,
                cap: m.cap,
                policy: rows(&m.policy),
                danger: m.danger.clone(),
                safe: table(&m.safe),
            }),
            StrategyMachine::Composite(m) => {
                let mut mec_of = vec![None; parent_states];
                for (i, mec) in m.mec_of.iter().enumerate() {
                    mec_of[state_map[i].0] = *mec;
                }
                StrategyMachine::Composite(CompositeMachine {
                    transient: table(&m.transient),
                    mec_of,
                    settle: m
                        .settle
                        .iter()
                        .map(|inner| {
                            inner
                                .as_ref()
                                .map(|b| Box::new(b.lift(state_map, trans_map, parent_states)))
                        })
                        .collect(),
                    danger: m.danger.clone(),
                    safe: table(&m.safe),
                })
            }
        }
    }

    pub fn is_memoryless(&self) -> bool {
        matches!(self, StrategyMachine::Memoryless(_))
    }

    pub fn is_deterministic(&self) -> bool {
        match self {
            StrategyMachine::Memoryless(t) => t.is_deterministic(),
            StrategyMachine::LevelPolicy(m) => m
                .choices
                .iter()
                .flatten()
                .flatten()
                .all(Dist::is_dirac),
            _ => false,
        }
    }
}

fn type2_update(
    m: &Type2Machine,
    stage: u64,
    phase: &Type2Phase,
    state: StateId,
    counter: &Int,
) -> Memory {
    let mut stage = stage;
    // Step accounting for the phase that chose the action just taken.
    let mut phase = match phase {
        Type2Phase::Mu1 { left } => {
            if *left > 1 {
                Type2Phase::Mu1 { left: left - 1 }
            } else {
                Type2Phase::Mu2 {
                    left: m.steps2 * stage,
                }
            }
        }
        Type2Phase::Mu2 { left } => {
            if *left > 1 {
                Type2Phase::Mu2 { left: left - 1 }
            } else {
                Type2Phase::Kappa
            }
        }
        Type2Phase::Kappa => Type2Phase::Kappa,
        Type2Phase::Pump { target } => Type2Phase::Pump {
            target: target.clone(),
        },
    };
    // Failure short-circuit: a level below the threshold aborts the stage.
    if *counter < m.threshold {
        if !matches!(phase, Type2Phase::Pump { .. }) {
            phase = Type2Phase::Pump {
                target: m.pump_target(stage),
            };
        }
    }
    // Phase-entry normalization; each round either stabilizes or advances the
    // stage with a strictly larger pump target, so this terminates.
    loop {
        match &phase {
            Type2Phase::Kappa if state == m.anchor => {
                phase = Type2Phase::Pump {
                    target: m.pump_target(stage),
                };
            }
            Type2Phase::Pump { target } if counter >= target => {
                let next = m.next_stage(stage);
                if next == stage {
                    // Frozen stage: replay the same stage schedule forever.
                    phase = Type2Phase::Mu1 {
                        left: m.steps1 * stage,
                    };
                    if *counter < m.threshold {
                        phase = Type2Phase::Pump {
                            target: m.pump_target(stage),
                        };
                        break;
                    }
                    break;
                }
                stage = next;
                phase = Type2Phase::Mu1 {
                    left: m.steps1 * stage,
                };
                if *counter < m.threshold {
                    phase = Type2Phase::Pump {
                        target: m.pump_target(stage),
                    };
                }
            }
            _ => break,
        }
    }
    Memory::Type2 { stage, phase }
}

/// On-disk form of a synthesized strategy: the machine plus the state list of
/// the model it was built for, letting the simulator reject mismatched pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyFile {
    pub states: Vec<String>,
    pub machine: StrategyMachine,
}

impl StrategyFile {
    pub fn new(e: &Emdp, machine: StrategyMachine) -> Self {
        StrategyFile {
            states: e.state_ids().map(|s| e.name(s).to_string()).collect(),
            machine,
        }
    }

    pub fn validate(&self, e: &Emdp) -> Result<(), String> {
        let names: Vec<String> = e.state_ids().map(|s| e.name(s).to_string()).collect();
        if names != self.states {
            return Err("strategy was synthesized for a different model".into());
        }
        self.machine.check(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::numeric::int;

    fn dirac_machine(e: &Emdp) -> StrategyMachine {
        let choices = e
            .state_ids()
            .map(|s| {
                if e.is_controllable(s) {
                    Some(e.out(s)[0])
                } else {
                    None
                }
            })
            .collect();
        StrategyMachine::memoryless_deterministic(choices)
    }

    #[test]
    fn memoryless_machine_checks_out() {
        let e = fixtures::fig2l();
        let m = dirac_machine(&e);
        m.check(&e).unwrap();
        assert!(m.is_deterministic());
        let s = e.state_id("s").unwrap();
        let mem = m.init(&Configuration::new(s, 0));
        let dist = m.next(s, &mem).unwrap();
        assert_eq!(dist.0[0].trans, e.out(s)[0]);
        let u = e.state_id("u").unwrap();
        assert!(m.next(u, &mem).is_err());
    }

    #[test]
    fn type1_latch_sets_and_clears() {
        let e = fixtures::pump2();
        let table = match dirac_machine(&e) {
            StrategyMachine::Memoryless(t) => t,
            _ => unreachable!(),
        };
        let m = StrategyMachine::Type1(Type1Machine {
            low: int(2),
            high: int(5),
            mu: table.clone(),
            pump: table,
        });
        let s = e.state_id("s").unwrap();
        let mem = m.init(&Configuration::new(s, 10));
        assert_eq!(mem, Memory::Type1 { low: false });
        // Dropping to the latch threshold sets low mode.
        let mem = m.update(&mem, s, &int(2));
        assert_eq!(mem, Memory::Type1 { low: true });
        // Climbing inside the window keeps it latched.
        let mem = m.update(&mem, s, &int(4));
        assert_eq!(mem, Memory::Type1 { low: true });
        // Mode clears exactly when the level first exceeds the release bound.
        let mem = m.update(&mem, s, &int(6));
        assert_eq!(mem, Memory::Type1 { low: false });
        // Starting at or below the latch threshold starts low.
        assert_eq!(
            m.init(&Configuration::new(s, 2)),
            Memory::Type1 { low: true }
        );
    }

    #[test]
    fn type2_schedule_runs_stages() {
        let e = fixtures::pump2();
        let table = match dirac_machine(&e) {
            StrategyMachine::Memoryless(t) => t,
            _ => unreachable!(),
        };
        let s = e.state_id("s").unwrap();
        let t = e.state_id("t").unwrap();
        let m = StrategyMachine::Type2(Type2Machine {
            mu1: table.clone(),
            mu2: table.clone(),
            kappa: table.clone(),
            pump: table,
            anchor: s,
            steps1: 2,
            steps2: 1,
            block: 3,
            threshold: int(1),
            stage_cap: None,
        });
        // Stage 1 from a healthy level: exactly 2 steps of mu1, 1 of mu2.
        let mem = m.init(&Configuration::new(s, 10));
        assert_eq!(
            mem,
            Memory::Type2 {
                stage: 1,
                phase: Type2Phase::Mu1 { left: 2 }
            }
        );
        let mem = m.update(&mem, t, &int(10));
        assert_eq!(
            mem,
            Memory::Type2 {
                stage: 1,
                phase: Type2Phase::Mu1 { left: 1 }
            }
        );
        let mem = m.update(&mem, t, &int(10));
        assert_eq!(
            mem,
            Memory::Type2 {
                stage: 1,
                phase: Type2Phase::Mu2 { left: 1 }
            }
        );
        // Mu2 finishes; observation is at the anchor, so kappa is skipped and
        // the pump target for stage 1 applies: TH + ceil(3^(3/4)) = 1 + 3.
        let mem = m.update(&mem, s, &int(10));
        assert_eq!(
            mem,
            Memory::Type2 {
                stage: 2,
                phase: Type2Phase::Mu1 { left: 4 }
            },
            "level 10 already exceeds the stage-1 pump target"
        );
    }

    #[test]
    fn type2_failure_short_circuits_to_pump() {
        let e = fixtures::pump2();
        let table = match dirac_machine(&e) {
            StrategyMachine::Memoryless(t) => t,
            _ => unreachable!(),
        };
        let s = e.state_id("s").unwrap();
        let t = e.state_id("t").unwrap();
        let m = StrategyMachine::Type2(Type2Machine {
            mu1: table.clone(),
            mu2: table.clone(),
            kappa: table.clone(),
            pump: table,
            anchor: s,
            steps1: 5,
            steps2: 5,
            block: 2,
            threshold: int(3),
            stage_cap: None,
        });
        let mem = m.init(&Configuration::new(s, 4));
        // Scripted drop below TH=3 mid-phase at stage 3 equivalent: reach stage
        // 1 mu1 and fail immediately; exit threshold = TH + ceil(2^(3/4)) = 3+2.
        let mem = m.update(&mem, t, &int(2));
        assert_eq!(
            mem,
            Memory::Type2 {
                stage: 1,
                phase: Type2Phase::Pump { target: int(5) }
            }
        );
        // Pump keeps playing until the target is passed, then stage 2 begins.
        let mem = m.update(&mem, s, &int(4));
        assert!(matches!(
            mem,
            Memory::Type2 {
                stage: 1,
                phase: Type2Phase::Pump { .. }
            }
        ));
        let mem = m.update(&mem, s, &int(5));
        assert_eq!(
            mem,
            Memory::Type2 {
                stage: 2,
                phase: Type2Phase::Mu1 { left: 10 }
            }
        );
    }

    #[test]
    fn strategy_file_round_trip() {
        let e = fixtures::fig2l();
        let m = dirac_machine(&e);
        let file = StrategyFile::new(&e, m.clone());
        let json = serde_json::to_string(&file).unwrap();
        let back: StrategyFile = serde_json::from_str(&json).unwrap();
        back.validate(&e).unwrap();
        assert_eq!(back.machine, m);
        // A different model is rejected.
        let other = fixtures::fig1();
        assert!(back.validate(&other).is_err());
    }
}
