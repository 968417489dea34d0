//! Bipartite matching network: classes, activities and their parameters.
//!
//! Classes are indexed `0..L` for the left side and `L..L+K` for the right
//! side. Activity `j` pairs left class `left(j)` with right class `right(j)`
//! and removes one job from each when executed.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when checking flow balance `R x = lambda`.
pub const BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("network needs at least one left and one right class")]
    Empty,
    #[error("activity {index} pairs ({left}, {right}), which is not a left-right pair")]
    BadActivity { index: usize, left: usize, right: usize },
    #[error("activity ({left}, {right}) is listed twice")]
    DuplicateActivity { left: usize, right: usize },
    #[error("class {0} is not served by any activity")]
    UnmatchableClass(usize),
    #[error("parameter `{name}` has length {got}, expected {expected}")]
    Length { name: &'static str, got: usize, expected: usize },
    #[error("parameter `{name}` entry {index} = {value} is out of range")]
    Range { name: &'static str, index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Activity {
    pub left: usize,
    pub right: usize,
}

impl Activity {
    pub fn touches(&self, class: usize) -> bool {
        self.left == class || self.right == class
    }
}

/// A validated matching network. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingNetwork {
    num_left: usize,
    num_right: usize,
    activities: Vec<Activity>,
    arrival_rates: Vec<f64>,
    values: Vec<f64>,
    holding_costs: Vec<f64>,
    abandonment_penalties: Vec<f64>,
    abandonment_rates: Vec<f64>,
    // activities incident to each class, ascending
    incidence: Vec<Vec<usize>>,
    // all activities and each class's incident ones, by value descending
    // with ties to the lexicographically smaller (left, right) pair
    value_order: Vec<usize>,
    incidence_by_value: Vec<Vec<usize>>,
}

/// Per-class cost rate `c_i = h_i + gamma_i * a_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveCost(pub Vec<f64>);

impl EffectiveCost {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn check_len(name: &'static str, v: &[f64], expected: usize) -> Result<(), ModelError> {
    if v.len() != expected {
        return Err(ModelError::Length { name, got: v.len(), expected });
    }
    Ok(())
}

fn check_range(
    name: &'static str,
    v: &[f64],
    ok: impl Fn(f64) -> bool,
) -> Result<(), ModelError> {
    match v.iter().position(|&x| !x.is_finite() || !ok(x)) {
        Some(index) => Err(ModelError::Range { name, index, value: v[index] }),
        None => Ok(()),
    }
}

impl MatchingNetwork {
    /// Builds a network from zero-based activity pairs.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_left: usize,
        num_right: usize,
        activities: Vec<Activity>,
        arrival_rates: Vec<f64>,
        values: Vec<f64>,
        holding_costs: Vec<f64>,
        abandonment_penalties: Vec<f64>,
        abandonment_rates: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if num_left == 0 || num_right == 0 {
            return Err(ModelError::Empty);
        }
        let num_classes = num_left + num_right;
        let mut seen = std::collections::HashSet::new();
        for (index, a) in activities.iter().enumerate() {
            if a.left >= num_left || a.right < num_left || a.right >= num_classes {
                return Err(ModelError::BadActivity { index, left: a.left, right: a.right });
            }
            if !seen.insert(*a) {
                return Err(ModelError::DuplicateActivity { left: a.left, right: a.right });
            }
        }
        check_len("lambda", &arrival_rates, num_classes)?;
        check_len("v", &values, activities.len())?;
        check_len("h", &holding_costs, num_classes)?;
        check_len("a", &abandonment_penalties, num_classes)?;
        check_len("gamma", &abandonment_rates, num_classes)?;
        check_range("lambda", &arrival_rates, |x| x > 0.0)?;
        check_range("v", &values, |x| x > 0.0)?;
        check_range("h", &holding_costs, |x| x >= 0.0)?;
        check_range("a", &abandonment_penalties, |x| x >= 0.0)?;
        check_range("gamma", &abandonment_rates, |x| x >= 0.0)?;

        let mut incidence = vec![Vec::new(); num_classes];
        for (j, a) in activities.iter().enumerate() {
            incidence[a.left].push(j);
            incidence[a.right].push(j);
        }
        if let Some(i) = incidence.iter().position(Vec::is_empty) {
            return Err(ModelError::UnmatchableClass(i));
        }
        let by_value = |set: &[usize]| {
            let mut order = set.to_vec();
            order.sort_by(|&a, &b| {
                let pair = |j: usize| (activities[j].left, activities[j].right);
                values[b].total_cmp(&values[a]).then(pair(a).cmp(&pair(b)))
            });
            order
        };
        let value_order = by_value(&(0..activities.len()).collect::<Vec<_>>());
        let incidence_by_value = incidence.iter().map(|c| by_value(c)).collect();
        Ok(Self {
            num_left,
            num_right,
            activities,
            arrival_rates,
            values,
            holding_costs,
            abandonment_penalties,
            abandonment_rates,
            incidence,
            value_order,
            incidence_by_value,
        })
    }

    pub fn num_left(&self) -> usize {
        self.num_left
    }

    pub fn num_right(&self) -> usize {
        self.num_right
    }

    pub fn num_classes(&self) -> usize {
        self.num_left + self.num_right
    }

    pub fn num_activities(&self) -> usize {
        self.activities.len()
    }

    pub fn activities(&self) -> &[Activity] {
        &self.activities
    }

    pub fn activity(&self, j: usize) -> Activity {
        self.activities[j]
    }

    pub fn arrival_rates(&self) -> &[f64] {
        &self.arrival_rates
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn holding_costs(&self) -> &[f64] {
        &self.holding_costs
    }

    pub fn abandonment_penalties(&self) -> &[f64] {
        &self.abandonment_penalties
    }

    pub fn abandonment_rates(&self) -> &[f64] {
        &self.abandonment_rates
    }

    /// Activities incident to `class`, in ascending index order.
    pub fn incident(&self, class: usize) -> &[usize] {
        &self.incidence[class]
    }

    /// All activities by value, highest first, ties to the smaller
    /// `(left, right)` class pair.
    pub fn value_order(&self) -> &[usize] {
        &self.value_order
    }

    /// Activities incident to `class` in [`value_order`](Self::value_order).
    pub fn incident_by_value(&self, class: usize) -> &[usize] {
        &self.incidence_by_value[class]
    }

    /// The `I x J` matching matrix; column `j` is `e_left(j) + e_right(j)`.
    pub fn matching_matrix(&self) -> Array2<f64> {
        let mut r = Array2::zeros((self.num_classes(), self.num_activities()));
        for (j, a) in self.activities.iter().enumerate() {
            r[[a.left, j]] = 1.0;
            r[[a.right, j]] = 1.0;
        }
        r
    }

    /// `R x` for an activity-indexed vector `x`.
    pub fn apply_matching(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes()];
        for (a, &xj) in self.activities.iter().zip(x) {
            out[a.left] += xj;
            out[a.right] += xj;
        }
        out
    }

    /// `R' g` for a class-indexed vector `g`.
    pub fn apply_matching_transpose(&self, g: &[f64]) -> Vec<f64> {
        self.activities.iter().map(|a| g[a.left] + g[a.right]).collect()
    }

    pub fn effective_cost(&self) -> EffectiveCost {
        EffectiveCost(
            self.holding_costs
                .iter()
                .zip(&self.abandonment_rates)
                .zip(&self.abandonment_penalties)
                .map(|((h, g), a)| h + g * a)
                .collect(),
        )
    }

    /// Converts to the one-based text config representation.
    pub fn to_config(&self, x_star: Option<Vec<f64>>) -> NetworkConfig {
        NetworkConfig {
            name: None,
            num_left: self.num_left,
            num_right: self.num_right,
            activities: self.activities.iter().map(|a| [a.left + 1, a.right + 1]).collect(),
            lambda: self.arrival_rates.clone(),
            v: self.values.clone(),
            h: self.holding_costs.clone(),
            a: self.abandonment_penalties.clone(),
            gamma: self.abandonment_rates.clone(),
            x_star,
        }
    }
}

/// On-disk network description. Class indices in `activities` are one-based,
/// left classes `1..=L`, right classes `L+1..=L+K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(rename = "L")]
    pub num_left: usize,
    #[serde(rename = "K")]
    pub num_right: usize,
    pub activities: Vec<[usize; 2]>,
    pub lambda: Vec<f64>,
    pub v: Vec<f64>,
    pub h: Vec<f64>,
    pub a: Vec<f64>,
    pub gamma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_star: Option<Vec<f64>>,
}

impl NetworkConfig {
    pub fn build(&self) -> Result<MatchingNetwork, ModelError> {
        let activities = self
            .activities
            .iter()
            .enumerate()
            .map(|(index, &[l, r])| {
                if l == 0 || r == 0 {
                    Err(ModelError::BadActivity { index, left: l, right: r })
                } else {
                    Ok(Activity { left: l - 1, right: r - 1 })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        MatchingNetwork::new(
            self.num_left,
            self.num_right,
            activities,
            self.lambda.clone(),
            self.v.clone(),
            self.h.clone(),
            self.a.clone(),
            self.gamma.clone(),
        )
    }
}
