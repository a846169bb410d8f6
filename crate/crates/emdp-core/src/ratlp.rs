//! Exact linear programming over rationals.
//!
//! Two-phase primal simplex with Bland's pivoting rule on a dense tableau.
//! Instances here are small (one variable per model transition), so the
//! guaranteed-terminating rule wins over anything clever. Every outcome is
//! certified: optima carry the dual solution of the final basis, infeasible
//! programs a Farkas row, unbounded ones an improving ray; [`check_outcome`]
//! re-verifies any of them constraint by constraint in exact arithmetic.

use crate::numeric::Rat;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rel {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coeffs: Vec<Rat>,
    pub rel: Rel,
    pub rhs: Rat,
}

/// `sense (objective · x)` subject to the constraints; all variables are
/// implicitly non-negative.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub variables: Vec<String>,
    pub sense: Sense,
    pub objective: Vec<Rat>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LpError {
    #[error("program must have at least one variable")]
    NoVariables,
    #[error("coefficient vector length {found} does not match variable count {expected}")]
    BadArity { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LpOutcome {
    Optimal {
        assignment: Vec<Rat>,
        value: Rat,
        /// Dual values per constraint, for the maximization form of the program.
        dual: Vec<Rat>,
    },
    /// Farkas certificate `y`: combining rows with these multipliers yields a
    /// contradiction `0 > 0` against any non-negative solution.
    Infeasible { farkas: Vec<Rat> },
    /// Improving feasible ray.
    Unbounded { ray: Vec<Rat> },
}

impl LinearProgram {
    pub fn new(
        variables: Vec<String>,
        sense: Sense,
        objective: Vec<Rat>,
        constraints: Vec<Constraint>,
    ) -> Result<Self, LpError> {
        if variables.is_empty() {
            return Err(LpError::NoVariables);
        }
        if objective.len() != variables.len() {
            return Err(LpError::BadArity {
                expected: variables.len(),
                found: objective.len(),
            });
        }
        for c in &constraints {
            if c.coeffs.len() != variables.len() {
                return Err(LpError::BadArity {
                    expected: variables.len(),
                    found: c.coeffs.len(),
                });
            }
        }
        Ok(LinearProgram {
            variables,
            sense,
            objective,
            constraints,
        })
    }

    fn max_objective(&self) -> Vec<Rat> {
        match self.sense {
            Sense::Max => self.objective.clone(),
            Sense::Min => self.objective.iter().map(|c| -c).collect(),
        }
    }
}

struct Tableau {
    /// `rows[i][j]`, `j < total` are coefficients, `j == total` is the rhs.
    rows: Vec<Vec<Rat>>,
    basis: Vec<usize>,
    total: usize,
    structural: usize,
    artificial_start: usize,
    /// Sign applied to each input row to make its rhs non-negative.
    row_sign: Vec<bool>,
    /// Relation of each input row after sign normalization.
    rel: Vec<Rel>,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Tableau {
        let n = lp.variables.len();
        let m = lp.constraints.len();
        let mut rel = Vec::with_capacity(m);
        let mut row_sign = Vec::with_capacity(m);
        let mut rows: Vec<Vec<Rat>> = Vec::with_capacity(m);
        for c in &lp.constraints {
            let negate = c.rhs.is_negative();
            row_sign.push(negate);
            let flipped = match (negate, c.rel) {
                (false, r) => r,
                (true, Rel::Le) => Rel::Ge,
                (true, Rel::Ge) => Rel::Le,
                (true, Rel::Eq) => Rel::Eq,
            };
            rel.push(flipped);
            let mut row: Vec<Rat> = c.coeffs.iter().map(|v| if negate { -v } else { v.clone() }).collect();
            row.push(if negate { -&c.rhs } else { c.rhs.clone() });
            rows.push(row);
        }
        // Column layout: structural | slack or surplus per row | artificials.
        let slack_count = m;
        let artificial_count = rel.iter().filter(|r| !matches!(r, Rel::Le)).count();
        let total = n + slack_count + artificial_count;
        let mut basis = Vec::with_capacity(m);
        let mut art = n + slack_count;
        for (i, row) in rows.iter_mut().enumerate() {
            let rhs = row.pop().unwrap();
            row.resize(total, Rat::zero());
            row.push(rhs);
            match rel[i] {
                Rel::Le => {
                    row[n + i] = Rat::from_integer(1.into());
                    basis.push(n + i);
                }
                Rel::Ge => {
                    row[n + i] = Rat::from_integer((-1).into());
                    row[art] = Rat::from_integer(1.into());
                    basis.push(art);
                    art += 1;
                }
                Rel::Eq => {
                    row[art] = Rat::from_integer(1.into());
                    basis.push(art);
                    art += 1;
                }
            }
        }
        Tableau {
            rows,
            basis,
            total,
            structural: n,
            artificial_start: n + slack_count,
            row_sign,
            rel,
        }
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let pivot = self.rows[row][col].clone();
        for v in self.rows[row].iter_mut() {
            *v /= &pivot;
        }
        for r in 0..self.rows.len() {
            if r == row {
                continue;
            }
            let factor = self.rows[r][col].clone();
            if factor.is_zero() {
                continue;
            }
            for j in 0..=self.total {
                let delta = &self.rows[row][j] * &factor;
                self.rows[r][j] -= delta;
            }
        }
        self.basis[row] = col;
    }

    /// Reduced costs `z_j - c_j` and objective value for cost vector `c`
    /// (length `total`), given the current basis.
    fn reduced(&self, cost: &[Rat]) -> (Vec<Rat>, Rat) {
        let m = self.rows.len();
        let mut reduced = vec![Rat::zero(); self.total];
        let mut value = Rat::zero();
        for j in 0..self.total {
            let mut z = Rat::zero();
            for i in 0..m {
                if !cost[self.basis[i]].is_zero() {
                    z += &cost[self.basis[i]] * &self.rows[i][j];
                }
            }
            reduced[j] = z - &cost[j];
        }
        for i in 0..m {
            if !cost[self.basis[i]].is_zero() {
                value += &cost[self.basis[i]] * &self.rows[i][self.total];
            }
        }
        (reduced, value)
    }

    /// Runs Bland-rule simplex for `maximize cost·x`. Returns the entering
    /// column on unboundedness. `allow` filters columns eligible to enter.
    fn optimize(&mut self, cost: &[Rat], allow: impl Fn(usize) -> bool) -> Option<usize> {
        loop {
            let (reduced, _) = self.reduced(cost);
            let entering = (0..self.total)
                .find(|&j| allow(j) && !self.basis.contains(&j) && reduced[j].is_negative());
            let Some(col) = entering else {
                return None;
            };
            let mut leaving: Option<(usize, Rat)> = None;
            for i in 0..self.rows.len() {
                let coeff = &self.rows[i][col];
                if coeff.is_positive() {
                    let ratio = &self.rows[i][self.total] / coeff;
                    let better = match &leaving {
                        None => true,
                        Some((best_row, best)) => {
                            ratio < *best
                                || (ratio == *best && self.basis[i] < self.basis[*best_row])
                        }
                    };
                    if better {
                        leaving = Some((i, ratio));
                    }
                }
            }
            match leaving {
                Some((row, _)) => self.pivot(row, col),
                None => return Some(col),
            }
        }
    }
}

/// Solves the program. The optimum, when reported, is certified by the dual
/// solution of the final basis; infeasibility and unboundedness carry checkable
/// certificates.
pub fn solve_lp(lp: &LinearProgram) -> LpOutcome {
    let n = lp.variables.len();
    let mut t = Tableau::build(lp);
    let m = t.rows.len();

    // Phase 1: drive the artificial variables to zero.
    if t.artificial_start < t.total {
        let mut cost = vec![Rat::zero(); t.total];
        for c in cost.iter_mut().skip(t.artificial_start) {
            *c = -Rat::from_integer(1.into());
        }
        let unbounded = t.optimize(&cost, |_| true);
        assert!(unbounded.is_none(), "phase 1 is bounded by construction");
        let (_, value) = t.reduced(&cost);
        if value.is_negative() {
            // Farkas certificate from the phase-1 duals.
            let y = basis_duals(&t, &cost);
            let farkas: Vec<Rat> = (0..m)
                .map(|i| if t.row_sign[i] { -&y[i] } else { y[i].clone() })
                .collect();
            return LpOutcome::Infeasible { farkas };
        }
        // Pivot any basic artificial out on a non-artificial column; rows
        // where that is impossible are redundant and stay at zero.
        for row in 0..m {
            if t.basis[row] >= t.artificial_start {
                let col = (0..t.artificial_start).find(|&j| !t.rows[row][j].is_zero());
                if let Some(col) = col {
                    t.pivot(row, col);
                }
            }
        }
    }

    // Phase 2 on the real objective; artificials may not re-enter.
    let mut cost = vec![Rat::zero(); t.total];
    cost[..n].clone_from_slice(&lp.max_objective());
    let art_start = t.artificial_start;
    if let Some(col) = t.optimize(&cost, |j| j < art_start) {
        // Improving ray: entering column direction with basic compensation.
        let mut ray = vec![Rat::zero(); n];
        if col < n {
            ray[col] = Rat::from_integer(1.into());
        }
        for i in 0..m {
            if t.basis[i] < n {
                ray[t.basis[i]] = -&t.rows[i][col];
            }
        }
        return LpOutcome::Unbounded { ray };
    }

    let mut assignment = vec![Rat::zero(); n];
    for i in 0..m {
        if t.basis[i] < n {
            assignment[t.basis[i]] = t.rows[i][t.total].clone();
        }
    }
    let value: Rat = lp
        .objective
        .iter()
        .zip(&assignment)
        .map(|(c, x)| c * x)
        .sum();
    let y = basis_duals(&t, &cost);
    let dual: Vec<Rat> = (0..m)
        .map(|i| if t.row_sign[i] { -&y[i] } else { y[i].clone() })
        .collect();
    LpOutcome::Optimal {
        assignment,
        value,
        dual,
    }
}

/// Solves `yᵀ B = c_B` for the current basis over the original column data.
fn basis_duals(t: &Tableau, cost: &[Rat]) -> Vec<Rat> {
    // The tableau rows are B⁻¹ applied to the original columns, so reduced
    // costs of the slack/artificial unit columns directly encode y. Using the
    // original unit columns: for row i the column `slack_or_art(i)` had a ±1
    // entry only in row i, hence z_j = ±y_i there. Rebuild B from scratch is
    // avoided by reading y off those columns.
    let m = t.rows.len();
    let (reduced, _) = t.reduced(cost);
    let mut y = vec![Rat::zero(); m];
    let mut art = t.artificial_start;
    for i in 0..m {
        match t.rel[i] {
            Rel::Le => {
                // slack column n+i has +1 in row i: z = y_i, c = 0.
                y[i] = reduced[t.structural + i].clone();
            }
            Rel::Ge => {
                // artificial column has +1 in row i; its cost in phase 2 is 0,
                // in phase 1 it is -1: z_j - c_j = y_i - c_j.
                y[i] = &reduced[art] + &cost[art];
                art += 1;
            }
            Rel::Eq => {
                y[i] = &reduced[art] + &cost[art];
                art += 1;
            }
        }
    }
    y
}

/// Exhaustive exact verification of an outcome against the program:
/// feasibility and zero duality gap for optima, the contradiction for Farkas
/// rows, feasibility-direction and improvement for rays.
pub fn check_outcome(lp: &LinearProgram, outcome: &LpOutcome) -> Result<(), String> {
    let cmax = lp.max_objective();
    match outcome {
        LpOutcome::Optimal {
            assignment,
            value,
            dual,
        } => {
            check_feasible(lp, assignment)?;
            let direct: Rat = lp
                .objective
                .iter()
                .zip(assignment)
                .map(|(c, x)| c * x)
                .sum();
            if &direct != value {
                return Err("stored value does not match assignment".into());
            }
            // Dual feasibility for the maximization form.
            for (i, c) in lp.constraints.iter().enumerate() {
                match c.rel {
                    Rel::Le => {
                        if dual[i].is_negative() {
                            return Err(format!("dual {i} negative on a <= row"));
                        }
                    }
                    Rel::Ge => {
                        if dual[i].is_positive() {
                            return Err(format!("dual {i} positive on a >= row"));
                        }
                    }
                    Rel::Eq => {}
                }
            }
            for j in 0..lp.variables.len() {
                let mut lhs = Rat::zero();
                for (i, c) in lp.constraints.iter().enumerate() {
                    lhs += &dual[i] * &c.coeffs[j];
                }
                if lhs < cmax[j] {
                    return Err(format!("dual infeasible at variable {j}"));
                }
            }
            let dual_value: Rat = lp
                .constraints
                .iter()
                .zip(dual)
                .map(|(c, y)| &c.rhs * y)
                .sum();
            let primal_value: Rat = cmax
                .iter()
                .zip(assignment)
                .map(|(c, x)| c * x)
                .sum();
            if dual_value != primal_value {
                return Err(format!(
                    "duality gap {} is nonzero",
                    dual_value - primal_value
                ));
            }
            Ok(())
        }
        LpOutcome::Infeasible { farkas } => {
            // With y >= 0 on <= rows and y <= 0 on >= rows, any feasible x >= 0
            // gives 0 <= (yᵀA)x <= y·b, so y·b < 0 refutes feasibility.
            for (i, c) in lp.constraints.iter().enumerate() {
                match c.rel {
                    Rel::Le => {
                        if farkas[i].is_negative() {
                            return Err("farkas sign on <= row".into());
                        }
                    }
                    Rel::Ge => {
                        if farkas[i].is_positive() {
                            return Err("farkas sign on >= row".into());
                        }
                    }
                    Rel::Eq => {}
                }
            }
            for j in 0..lp.variables.len() {
                let mut lhs = Rat::zero();
                for (i, c) in lp.constraints.iter().enumerate() {
                    lhs += &farkas[i] * &c.coeffs[j];
                }
                if lhs.is_negative() {
                    return Err(format!("farkas combination negative at variable {j}"));
                }
            }
            let rhs: Rat = lp
                .constraints
                .iter()
                .zip(farkas)
                .map(|(c, y)| &c.rhs * y)
                .sum();
            if !rhs.is_negative() {
                return Err("farkas combination does not contradict".into());
            }
            Ok(())
        }
        LpOutcome::Unbounded { ray } => {
            if ray.iter().any(|v| v.is_negative()) {
                return Err("ray has a negative component".into());
            }
            for (i, c) in lp.constraints.iter().enumerate() {
                let dot: Rat = c.coeffs.iter().zip(ray).map(|(a, d)| a * d).sum();
                let ok = match c.rel {
                    Rel::Le => !dot.is_positive(),
                    Rel::Ge => !dot.is_negative(),
                    Rel::Eq => dot.is_zero(),
                };
                if !ok {
                    return Err(format!("ray violates recession direction of row {i}"));
                }
            }
            let gain: Rat = cmax.iter().zip(ray).map(|(c, d)| c * d).sum();
            if !gain.is_positive() {
                return Err("ray does not improve the objective".into());
            }
            Ok(())
        }
    }
}

/// Exact feasibility of an assignment.
pub fn check_feasible(lp: &LinearProgram, x: &[Rat]) -> Result<(), String> {
    if x.len() != lp.variables.len() {
        return Err("assignment arity mismatch".into());
    }
    if let Some(j) = x.iter().position(|v| v.is_negative()) {
        return Err(format!("variable {} is negative", lp.variables[j]));
    }
    for (i, c) in lp.constraints.iter().enumerate() {
        let lhs: Rat = c.coeffs.iter().zip(x).map(|(a, v)| a * v).sum();
        let ok = match c.rel {
            Rel::Le => lhs <= c.rhs,
            Rel::Eq => lhs == c.rhs,
            Rel::Ge => lhs >= c.rhs,
        };
        if !ok {
            return Err(format!("constraint {i} violated: lhs {lhs}, rhs {}", c.rhs));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{rat, rat_int};

    fn lp(
        n: usize,
        sense: Sense,
        objective: Vec<Rat>,
        constraints: Vec<(Vec<Rat>, Rel, Rat)>,
    ) -> LinearProgram {
        LinearProgram::new(
            (0..n).map(|i| format!("x{i}")).collect(),
            sense,
            objective,
            constraints
                .into_iter()
                .map(|(coeffs, rel, rhs)| Constraint { coeffs, rel, rhs })
                .collect(),
        )
        .unwrap()
    }

    fn expect_optimal(lp: &LinearProgram) -> (Vec<Rat>, Rat) {
        let outcome = solve_lp(lp);
        check_outcome(lp, &outcome).unwrap();
        match outcome {
            LpOutcome::Optimal {
                assignment, value, ..
            } => (assignment, value),
            other => panic!("expected optimum, got {other:?}"),
        }
    }

    #[test]
    fn trivial_bound() {
        // maximize x subject to x <= 0
        let p = lp(
            1,
            Sense::Max,
            vec![rat_int(1)],
            vec![(vec![rat_int(1)], Rel::Le, rat_int(0))],
        );
        let (x, v) = expect_optimal(&p);
        assert_eq!(x, vec![rat_int(0)]);
        assert_eq!(v, rat_int(0));
    }

    #[test]
    fn two_variable_polytope() {
        // maximize x+y s.t. x+y <= 3/2, x <= 1; vertices (0,3/2), (1,1/2), (1,0), origin.
        let p = lp(
            2,
            Sense::Max,
            vec![rat_int(1), rat_int(1)],
            vec![
                (vec![rat_int(1), rat_int(1)], Rel::Le, rat(3, 2)),
                (vec![rat_int(1), rat_int(0)], Rel::Le, rat_int(1)),
            ],
        );
        let (_, v) = expect_optimal(&p);
        assert_eq!(v, rat(3, 2));
    }

    #[test]
    fn equality_and_ge_rows() {
        // minimize 2x + 3y s.t. x + y = 4, x >= 1  =>  x = 4, y = 0 gives 8.
        let p = lp(
            2,
            Sense::Min,
            vec![rat_int(2), rat_int(3)],
            vec![
                (vec![rat_int(1), rat_int(1)], Rel::Eq, rat_int(4)),
                (vec![rat_int(1), rat_int(0)], Rel::Ge, rat_int(1)),
            ],
        );
        let (x, v) = expect_optimal(&p);
        assert_eq!(v, rat_int(8));
        assert_eq!(x, vec![rat_int(4), rat_int(0)]);
    }

    #[test]
    fn detects_infeasible_with_certificate() {
        // x <= 1 and x >= 2 cannot both hold.
        let p = lp(
            1,
            Sense::Max,
            vec![rat_int(0)],
            vec![
                (vec![rat_int(1)], Rel::Le, rat_int(1)),
                (vec![rat_int(1)], Rel::Ge, rat_int(2)),
            ],
        );
        let outcome = solve_lp(&p);
        assert!(matches!(outcome, LpOutcome::Infeasible { .. }));
        check_outcome(&p, &outcome).unwrap();
    }

    #[test]
    fn detects_unbounded_with_ray() {
        let p = lp(
            2,
            Sense::Max,
            vec![rat_int(1), rat_int(0)],
            vec![(vec![rat_int(-1), rat_int(1)], Rel::Le, rat_int(1))],
        );
        let outcome = solve_lp(&p);
        assert!(matches!(outcome, LpOutcome::Unbounded { .. }));
        check_outcome(&p, &outcome).unwrap();
    }

    #[test]
    fn negative_rhs_rows_are_normalized() {
        // minimize x s.t. -x <= -3  (i.e. x >= 3)
        let p = lp(
            1,
            Sense::Min,
            vec![rat_int(1)],
            vec![(vec![rat_int(-1)], Rel::Le, rat_int(-3))],
        );
        let (x, v) = expect_optimal(&p);
        assert_eq!(x, vec![rat_int(3)]);
        assert_eq!(v, rat_int(3));
    }

    #[test]
    fn permuted_variable_order_same_value() {
        let base = lp(
            3,
            Sense::Max,
            vec![rat_int(2), rat_int(1), rat(1, 3)],
            vec![
                (vec![rat_int(1), rat_int(2), rat_int(1)], Rel::Le, rat_int(4)),
                (vec![rat_int(2), rat_int(0), rat_int(1)], Rel::Le, rat_int(3)),
                (
                    vec![rat_int(1), rat_int(1), rat_int(1)],
                    Rel::Ge,
                    rat(1, 2),
                ),
            ],
        );
        let (_, v1) = expect_optimal(&base);
        // Reverse the variable order.
        let perm = [2usize, 1, 0];
        let permuted = lp(
            3,
            Sense::Max,
            perm.iter().map(|&j| base.objective[j].clone()).collect(),
            base.constraints
                .iter()
                .map(|c| {
                    (
                        perm.iter().map(|&j| c.coeffs[j].clone()).collect(),
                        c.rel,
                        c.rhs.clone(),
                    )
                })
                .collect(),
        );
        let (_, v2) = expect_optimal(&permuted);
        assert_eq!(v1, v2);
    }

    #[test]
    fn degenerate_pivots_terminate() {
        // Classic degeneracy: multiple tight rows at the optimum.
        let p = lp(
            2,
            Sense::Max,
            vec![rat_int(1), rat_int(1)],
            vec![
                (vec![rat_int(1), rat_int(0)], Rel::Le, rat_int(1)),
                (vec![rat_int(1), rat_int(1)], Rel::Le, rat_int(1)),
                (vec![rat_int(0), rat_int(1)], Rel::Le, rat_int(1)),
            ],
        );
        let (_, v) = expect_optimal(&p);
        assert_eq!(v, rat_int(1));
    }
}
