//! Exact analysis and strategy synthesis for energy Markov decision processes.
//!
//! An energy MDP is a finite Markov decision process whose transitions carry an
//! integer counter update and a rational reward. The library computes, over exact
//! rational arithmetic throughout:
//!
//! * minimal safe and minimal pumping energy levels per state ([`energy`]),
//! * the flow linear programs bounding the achievable mean payoff under a
//!   non-negative counter trend, their components and cores ([`flows`]),
//! * optimal and ε-optimal safe strategies, limit values, and value
//!   approximation for arbitrary configurations ([`synth`]),
//! * finite mean-payoff MDP solving used by the counter-bounded unfoldings and
//!   the end-component condensation ([`finmdp`]),
//! * a deterministic seeded simulator and small-instance brute-force oracles
//!   ([`sim`]).
//!
//! Models are written in the line-oriented `.emdp` text format parsed by
//! [`model::parse_emdp`].

pub mod chain;
pub mod energy;
pub mod finmdp;
pub mod fixtures;
pub mod flows;
pub mod graphs;
pub mod linalg;
pub mod model;
pub mod numeric;
pub mod ratlp;
pub mod sim;
pub mod strategy;
pub mod synth;

pub use model::{Configuration, Emdp, StateId, StateKind, TransId, Transition};
pub use numeric::{Int, Rat};
pub use strategy::StrategyMachine;
