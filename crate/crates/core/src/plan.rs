//! The static plan: nominal activity rates and the basic/nonbasic split.

use ndarray::Array2;
use thiserror::Error;

use crate::network::{MatchingNetwork, BALANCE_TOL};

/// Rates above this are basic.
pub const BASIC_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("plan has {got} rates for {expected} activities")]
    Dimension { got: usize, expected: usize },
    #[error("plan rate {index} = {value} is negative")]
    NegativeRate { index: usize, value: f64 },
    #[error("class {0} has no incident basic activity")]
    UncoveredClass(usize),
    #[error("flow balance violated: max |R x - lambda| = {residual:e}")]
    BalanceViolation { residual: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticPlan {
    rates: Vec<f64>,
    basic: Vec<usize>,
    nonbasic: Vec<usize>,
    // activity -> position within `basic`
    basic_position: Vec<Option<usize>>,
    // per class: incident basic activities (activity indices, ascending)
    cover: Vec<Vec<usize>>,
    // per class: cheapest incident basic activity, ties to the lower index
    push_activity: Vec<usize>,
}

impl StaticPlan {
    /// Partitions activities by `rates > BASIC_THRESHOLD` and indexes the cover
    /// sets. Basic activities keep their relative order.
    pub fn from_rates(network: &MatchingNetwork, rates: Vec<f64>) -> Result<Self, PlanError> {
        let nj = network.num_activities();
        if rates.len() != nj {
            return Err(PlanError::Dimension { got: rates.len(), expected: nj });
        }
        if let Some(index) = rates.iter().position(|&x| x < -1e-12 || !x.is_finite()) {
            return Err(PlanError::NegativeRate { index, value: rates[index] });
        }
        let (basic, nonbasic): (Vec<usize>, Vec<usize>) =
            (0..nj).partition(|&j| rates[j] > BASIC_THRESHOLD);
        let mut basic_position = vec![None; nj];
        for (pos, &j) in basic.iter().enumerate() {
            basic_position[j] = Some(pos);
        }
        let mut cover = vec![Vec::new(); network.num_classes()];
        for &j in &basic {
            let a = network.activity(j);
            cover[a.left].push(j);
            cover[a.right].push(j);
        }
        for c in cover.iter_mut() {
            c.sort_unstable();
        }
        let values = network.values();
        let mut push_activity = Vec::with_capacity(cover.len());
        for (i, c) in cover.iter().enumerate() {
            let best = c
                .iter()
                .copied()
                .reduce(|best, j| if values[j] < values[best] { j } else { best })
                .ok_or(PlanError::UncoveredClass(i))?;
            push_activity.push(best);
        }
        // clamp tiny negative round-off
        let rates = rates.into_iter().map(|x| x.max(0.0)).collect();
        Ok(Self { rates, basic, nonbasic, basic_position, cover, push_activity })
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn basic(&self) -> &[usize] {
        &self.basic
    }

    pub fn nonbasic(&self) -> &[usize] {
        &self.nonbasic
    }

    pub fn num_basic(&self) -> usize {
        self.basic.len()
    }

    pub fn is_basic(&self, j: usize) -> bool {
        self.basic_position[j].is_some()
    }

    pub fn basic_position(&self, j: usize) -> Option<usize> {
        self.basic_position[j]
    }

    /// Basic activities incident to `class`.
    pub fn cover(&self, class: usize) -> &[usize] {
        &self.cover[class]
    }

    /// The basic activity used to push `class` off the boundary.
    pub fn push_activity(&self, class: usize) -> usize {
        self.push_activity[class]
    }

    /// `H`: the columns of `R` belonging to basic activities, in order.
    pub fn basic_matrix(&self, network: &MatchingNetwork) -> Array2<f64> {
        columns(network, &self.basic)
    }

    /// `N`: the columns of `R` belonging to nonbasic activities.
    pub fn nonbasic_matrix(&self, network: &MatchingNetwork) -> Array2<f64> {
        columns(network, &self.nonbasic)
    }

    pub fn basic_values(&self, network: &MatchingNetwork) -> Vec<f64> {
        self.basic.iter().map(|&j| network.values()[j]).collect()
    }

    pub fn nonbasic_values(&self, network: &MatchingNetwork) -> Vec<f64> {
        self.nonbasic.iter().map(|&j| network.values()[j]).collect()
    }

    /// `v . x*`, the fluid value rate.
    pub fn fluid_value(&self, network: &MatchingNetwork) -> f64 {
        self.rates.iter().zip(network.values()).map(|(x, v)| x * v).sum()
    }
}

fn columns(network: &MatchingNetwork, idx: &[usize]) -> Array2<f64> {
    let mut m = Array2::zeros((network.num_classes(), idx.len()));
    for (col, &j) in idx.iter().enumerate() {
        let a = network.activity(j);
        m[[a.left, col]] = 1.0;
        m[[a.right, col]] = 1.0;
    }
    m
}

/// Report produced by [`validate_plan`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlanDiagnostics {
    pub residual: f64,
    pub basic: Vec<usize>,
    pub nonbasic: Vec<usize>,
    pub uncovered: Vec<usize>,
}

pub fn balance_residual(network: &MatchingNetwork, rates: &[f64]) -> f64 {
    network
        .apply_matching(rates)
        .iter()
        .zip(network.arrival_rates())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Checks `R x* = lambda` and basic coverage of every class.
pub fn validate_plan(
    network: &MatchingNetwork,
    plan: &StaticPlan,
) -> Result<PlanDiagnostics, PlanError> {
    let residual = balance_residual(network, plan.rates());
    if residual > BALANCE_TOL {
        return Err(PlanError::BalanceViolation { residual });
    }
    let uncovered = (0..network.num_classes()).filter(|&i| plan.cover(i).is_empty()).collect();
    Ok(PlanDiagnostics {
        residual,
        basic: plan.basic().to_vec(),
        nonbasic: plan.nonbasic().to_vec(),
        uncovered,
    })
}
