//! Small reference models used throughout the test suite and the bundled
//! example files.

use crate::model::{parse_emdp, Emdp};

/// Two stochastic states; the uniform flow has positive trend but no strategy
/// is safe anywhere (the decrementing loop on `t` can fire arbitrarily often).
pub const FIG1: &str = "\
# two stochastic states, no controller choices
state s stochastic
state t stochastic
trans s -> s update=2 reward=0 prob=1/2
trans s -> t update=0 reward=0 prob=1/2
trans t -> t update=-1 reward=0 prob=1/2
trans t -> s update=0 reward=0 prob=1/2
";

/// Strongly connected but not pumpable: `t(0)` is safe (its zero-update
/// self-loop) yet cannot pump, so no optimal strategy exists although the
/// limit value of every state is 5.
pub const FIG2L: &str = "\
state s controllable
state t controllable
state u stochastic
state v controllable
trans s -> s update=1 reward=0
trans s -> t update=0 reward=0
trans t -> u update=-1 reward=10
trans t -> t update=0 reward=0
trans u -> v update=-1 reward=10 prob=1/2
trans u -> t update=-1 reward=10 prob=1/2
trans v -> s update=0 reward=0
trans v -> v update=-1 reward=10
";

/// Pumpable but not strongly connected: from `a` the reward-5 loop on `d` is
/// reachable only through the stochastic retry at `c`, so `Val(a(0)) = 5` has
/// no optimal witness.
pub const FIG2R: &str = "\
state a controllable
state b controllable
state c stochastic
state d controllable
state e controllable
trans a -> a update=1 reward=0
trans a -> b update=0 reward=0
trans b -> c update=0 reward=0
trans b -> e update=0 reward=0
trans c -> d update=0 reward=0 prob=1/2
trans c -> b update=-1 reward=0 prob=1/2
trans d -> d update=1 reward=5
trans e -> e update=1 reward=0
";

/// Balanced model where the payoff program is irrelevant: the trend optimum is
/// zero and every safe strategy ends up level-stable with value 0.
pub const FIG3: &str = "\
state s controllable
state t stochastic
trans s -> s update=0 reward=0
trans s -> t update=0 reward=0
trans t -> s update=-1 reward=10 prob=1/2
trans t -> s update=1 reward=10 prob=1/2
";

/// Strongly connected and pumpable: the controllable self-loop pumps, and the
/// stochastic detour through `t` is harmless from level 1 up.
pub const PUMP2: &str = "\
state s controllable
state t stochastic
trans s -> s update=1 reward=0
trans s -> t update=0 reward=0
trans t -> s update=1 reward=0 prob=1/2
trans t -> s update=-1 reward=0 prob=1/2
";

/// [`PUMP2`] with reward 1 on the pumping self-loop; its payoff optimum puts
/// all mass there, yielding a type I core.
pub const PUMP2_REWARD: &str = "\
state s controllable
state t stochastic
trans s -> s update=1 reward=1
trans s -> t update=0 reward=0
trans t -> s update=1 reward=0 prob=1/2
trans t -> s update=-1 reward=0 prob=1/2
";

pub fn fig1() -> Emdp {
    parse_emdp(FIG1).expect("fixture parses")
}

pub fn fig2l() -> Emdp {
    parse_emdp(FIG2L).expect("fixture parses")
}

pub fn fig2r() -> Emdp {
    parse_emdp(FIG2R).expect("fixture parses")
}

pub fn fig3() -> Emdp {
    parse_emdp(FIG3).expect("fixture parses")
}

pub fn pump2() -> Emdp {
    parse_emdp(PUMP2).expect("fixture parses")
}

pub fn pump2_reward() -> Emdp {
    parse_emdp(PUMP2_REWARD).expect("fixture parses")
}
