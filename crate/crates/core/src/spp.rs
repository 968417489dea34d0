//! Static planning problem: `max v.x  s.t.  R x = lambda, x >= 0`.
//!
//! Solved with a dense two-phase revised simplex using Bland's rule. The
//! constraint matrix of a bipartite network is rank deficient (one redundant
//! row per connected component), so artificial variables that cannot be
//! driven out after phase one are left basic at level zero.

use log::warn;
use thiserror::Error;

use crate::network::{MatchingNetwork, BALANCE_TOL};
use crate::plan::{balance_residual, PlanError, StaticPlan};

const PIVOT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 32;
const MAX_PIVOTS: usize = 100_000;

#[derive(Debug, Error, PartialEq)]
pub enum SppError {
    #[error("no nonnegative activity vector balances the arrival rates (phase-one residual {0:e})")]
    Infeasible(f64),
    #[error("simplex exceeded {0} pivots")]
    PivotLimit(usize),
    #[error("basis matrix became singular")]
    Singular,
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Some nonbasic activity has zero reduced cost and can enter the basis
    /// with a positive step, so the optimum is not unique.
    pub degenerate: bool,
    pub pivots: usize,
}

struct Simplex<'a> {
    network: &'a MatchingNetwork,
    m: usize,
    n: usize,
    // basis[row] = variable index; structural 0..n, artificial n..n+m
    basis: Vec<usize>,
    binv: Vec<Vec<f64>>,
    xb: Vec<f64>,
    pivots: usize,
}

impl<'a> Simplex<'a> {
    fn new(network: &'a MatchingNetwork) -> Self {
        let m = network.num_classes();
        let n = network.num_activities();
        let mut binv = vec![vec![0.0; m]; m];
        for (i, row) in binv.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self {
            network,
            m,
            n,
            basis: (n..n + m).collect(),
            binv,
            xb: network.arrival_rates().to_vec(),
            pivots: 0,
        }
    }

    fn column(&self, var: usize) -> Vec<f64> {
        let mut col = vec![0.0; self.m];
        if var < self.n {
            let a = self.network.activity(var);
            col[a.left] = 1.0;
            col[a.right] = 1.0;
        } else {
            col[var - self.n] = 1.0;
        }
        col
    }

    fn binv_times(&self, col: &[f64]) -> Vec<f64> {
        self.binv
            .iter()
            .map(|row| row.iter().zip(col).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn duals(&self, cost: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.m];
        for (row, &var) in self.basis.iter().enumerate() {
            let cb = cost[var];
            if cb != 0.0 {
                for (yk, b) in y.iter_mut().zip(&self.binv[row]) {
                    *yk += cb * b;
                }
            }
        }
        y
    }

    fn reduced_cost(&self, var: usize, cost: &[f64], y: &[f64]) -> f64 {
        if var < self.n {
            let a = self.network.activity(var);
            cost[var] - y[a.left] - y[a.right]
        } else {
            cost[var] - y[var - self.n]
        }
    }

    fn pivot(&mut self, row: usize, var: usize, u: &[f64]) {
        let p = u[row];
        for v in self.binv[row].iter_mut() {
            *v /= p;
        }
        self.xb[row] /= p;
        let pivot_row = self.binv[row].clone();
        let pivot_x = self.xb[row];
        for i in 0..self.m {
            if i != row && u[i] != 0.0 {
                let f = u[i];
                for (a, b) in self.binv[i].iter_mut().zip(&pivot_row) {
                    *a -= f * b;
                }
                self.xb[i] -= f * pivot_x;
            }
        }
        self.basis[row] = var;
        self.pivots += 1;
        if self.pivots.is_multiple_of(REFACTOR_EVERY) {
            // keep going on the eta-updated inverse if refactoring fails; the
            // final solve re-checks
            let _ = self.refactor();
        }
    }

    /// Rebuilds `B^-1` and `x_B` from scratch with Gauss-Jordan elimination.
    fn refactor(&mut self) -> Result<(), SppError> {
        let m = self.m;
        let mut a = vec![vec![0.0; 2 * m]; m];
        for (col, &var) in self.basis.iter().enumerate() {
            for (i, v) in self.column(var).into_iter().enumerate() {
                a[i][col] = v;
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[m + i] = 1.0;
        }
        for c in 0..m {
            let p = (c..m)
                .max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))
                .ok_or(SppError::Singular)?;
            if a[p][c].abs() < 1e-12 {
                return Err(SppError::Singular);
            }
            a.swap(p, c);
            let d = a[c][c];
            for v in a[c].iter_mut() {
                *v /= d;
            }
            let pr = a[c].clone();
            for (i, row) in a.iter_mut().enumerate() {
                if i != c && row[c] != 0.0 {
                    let f = row[c];
                    for (x, y) in row.iter_mut().zip(&pr) {
                        *x -= f * y;
                    }
                }
            }
        }
        self.binv = a.into_iter().map(|row| row[m..].to_vec()).collect();
        self.xb = self.binv_times(self.network.arrival_rates());
        Ok(())
    }

    /// Runs Bland-rule iterations maximizing `cost . x` over the variables
    /// allowed by `can_enter`.
    fn optimize(&mut self, cost: &[f64], can_enter: impl Fn(usize) -> bool) -> Result<(), SppError> {
        loop {
            if self.pivots > MAX_PIVOTS {
                return Err(SppError::PivotLimit(MAX_PIVOTS));
            }
            let y = self.duals(cost);
            let mut in_basis = vec![false; self.n + self.m];
            for &b in &self.basis {
                in_basis[b] = true;
            }
            let entering = (0..self.n + self.m)
                .filter(|&k| !in_basis[k] && can_enter(k))
                .find(|&k| self.reduced_cost(k, cost, &y) > PIVOT_TOL);
            let Some(var) = entering else { return Ok(()) };
            let u = self.binv_times(&self.column(var));
            let mut leave: Option<(usize, f64)> = None;
            for (row, &ui) in u.iter().enumerate() {
                if ui > PIVOT_TOL {
                    let ratio = self.xb[row].max(0.0) / ui;
                    leave = match leave {
                        None => Some((row, ratio)),
                        Some((r, best)) => {
                            if ratio < best - PIVOT_TOL
                                || (ratio <= best + PIVOT_TOL && self.basis[row] < self.basis[r])
                            {
                                Some((row, ratio))
                            } else {
                                Some((r, best))
                            }
                        }
                    };
                }
            }
            // Rx = lambda with x >= 0 bounds every x_j, so a ray cannot exist
            let (row, _) = leave.ok_or(SppError::Singular)?;
            self.pivot(row, var, &u);
        }
    }
}

/// Solves the static planning problem for `network`.
pub fn solve_spp(network: &MatchingNetwork) -> Result<LpSolution, SppError> {
    let mut s = Simplex::new(network);
    let (n, m) = (s.n, s.m);

    // phase one: maximize -sum(artificials)
    let mut cost1 = vec![0.0; n + m];
    for c in cost1.iter_mut().skip(n) {
        *c = -1.0;
    }
    s.optimize(&cost1, |_| true)?;
    s.refactor()?;
    let infeas: f64 = s.basis.iter().zip(&s.xb).filter(|(&v, _)| v >= n).map(|(_, &x)| x).sum();
    if infeas > 1e-7 {
        return Err(SppError::Infeasible(infeas));
    }

    // drive zero-level artificials out where a structural column can replace them
    for row in 0..m {
        if s.basis[row] < n {
            continue;
        }
        let mut in_basis = vec![false; n];
        for &b in &s.basis {
            if b < n {
                in_basis[b] = true;
            }
        }
        let candidate = (0..n).filter(|&j| !in_basis[j]).find_map(|j| {
            let u = s.binv_times(&s.column(j));
            (u[row].abs() > PIVOT_TOL).then_some((j, u))
        });
        if let Some((j, u)) = candidate {
            s.pivot(row, j, &u);
        }
    }

    let mut cost2 = vec![0.0; n + m];
    cost2[..n].copy_from_slice(network.values());
    s.optimize(&cost2, |k| k < n)?;
    s.refactor()?;

    let mut x = vec![0.0; n];
    for (&var, &val) in s.basis.iter().zip(&s.xb) {
        if var < n {
            x[var] = if val.abs() < 1e-13 { 0.0 } else { val };
        }
    }
    let y = s.duals(&cost2);
    let in_basis: Vec<bool> = (0..n).map(|j| s.basis.contains(&j)).collect();
    let degenerate = (0..n).any(|j| {
        if in_basis[j] || s.reduced_cost(j, &cost2, &y).abs() > PIVOT_TOL {
            return false;
        }
        let u = s.binv_times(&s.column(j));
        let step = u
            .iter()
            .zip(&s.xb)
            .filter(|(&ui, _)| ui > PIVOT_TOL)
            .map(|(ui, xb)| xb.max(0.0) / ui)
            .fold(f64::INFINITY, f64::min);
        step > PIVOT_TOL
    });
    let objective = x.iter().zip(network.values()).map(|(a, b)| a * b).sum();
    Ok(LpSolution { x, objective, degenerate, pivots: s.pivots })
}

/// Builds the static plan from an LP solution.
pub fn to_static_plan(network: &MatchingNetwork, sol: &LpSolution) -> Result<StaticPlan, PlanError> {
    StaticPlan::from_rates(network, sol.x.clone())
}

/// Chooses the plan for an instance: the LP optimum, unless the LP is
/// degenerate and a balanced override is supplied.
pub fn resolve_plan(
    network: &MatchingNetwork,
    sol: &LpSolution,
    override_rates: Option<&[f64]>,
) -> Result<StaticPlan, SppError> {
    if let (true, Some(rates)) = (sol.degenerate, override_rates) {
        let residual = balance_residual(network, rates);
        if residual > BALANCE_TOL {
            return Err(PlanError::BalanceViolation { residual }.into());
        }
        return Ok(StaticPlan::from_rates(network, rates.to_vec())?);
    }
    if sol.degenerate {
        warn!("static planning LP is degenerate; using the Bland-rule optimum");
    }
    Ok(to_static_plan(network, sol)?)
}
