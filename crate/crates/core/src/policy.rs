//! Matching policies as pure functions from the pre-decision state to a list
//! of executed matches.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsde::{shadow_from_gradient, ValueGradientModel};
use crate::network::MatchingNetwork;
use crate::plan::StaticPlan;

/// Capacity comparisons when building priority sets.
pub const CAPACITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("priority-set construction stalled with {remaining} basic activities left")]
    Stall { remaining: usize },
    #[error("updating policy exceeded {0} iterations")]
    LoopGuard(usize),
    #[error("review period must be positive, got {0}")]
    BadReviewPeriod(f64),
    #[error("decision would drive class {0} negative")]
    Infeasible(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaitingJob {
    pub id: u64,
    pub arrival: f64,
}

/// What caused the decision epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    Arrival(usize),
    Abandonment(usize),
    Review,
}

/// The state seen by a policy immediately after an event and before any
/// matches.
#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    /// Queue lengths; `q[i] == queues[i].len()`.
    pub q: &'a [usize],
    /// Waiting jobs per class, oldest first.
    pub queues: &'a [VecDeque<WaitingJob>],
    pub trigger: Trigger,
    /// Time since the previous decision epoch.
    pub elapsed: f64,
    pub time: f64,
    pub scale: f64,
    /// The state before this event admitted no match in the policy's own
    /// activity set. Exhaustive policies use it to look only at the
    /// arriving class.
    pub settled: bool,
}

impl DecisionContext<'_> {
    pub fn lengths(&self) -> Vec<usize> {
        self.q.to_vec()
    }
}

/// Queue lengths together with the jobs behind them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueueState {
    pub q: Vec<usize>,
    pub queues: Vec<VecDeque<WaitingJob>>,
}

impl QueueState {
    pub fn empty(num_classes: usize) -> Self {
        Self { q: vec![0; num_classes], queues: vec![VecDeque::new(); num_classes] }
    }

    /// `q_i` jobs in each class, all arrived at time zero.
    pub fn from_lengths(q: &[usize]) -> Self {
        let mut id = 0;
        let queues = q
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| {
                        id += 1;
                        WaitingJob { id, arrival: 0.0 }
                    })
                    .collect()
            })
            .collect();
        Self { q: q.to_vec(), queues }
    }

    pub fn from_queues(queues: Vec<VecDeque<WaitingJob>>) -> Self {
        Self { q: queues.iter().map(VecDeque::len).collect(), queues }
    }

    pub fn context(&self, trigger: Trigger, elapsed: f64, time: f64, scale: f64) -> DecisionContext<'_> {
        DecisionContext { q: &self.q, queues: &self.queues, trigger, elapsed, time, scale, settled: false }
    }
}

/// Matches to execute, in order: `(activity, count)` with `count >= 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchDecision {
    pub matches: Vec<(usize, u32)>,
}

impl MatchDecision {
    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.matches.iter().map(|m| m.1 as u64).sum()
    }

    fn push(&mut self, j: usize, count: u32) {
        if count == 0 {
            return;
        }
        match self.matches.last_mut() {
            Some(last) if last.0 == j => last.1 += count,
            _ => self.matches.push((j, count)),
        }
    }

    /// Per-activity totals.
    pub fn counts(&self, num_activities: usize) -> Vec<u64> {
        let mut c = vec![0; num_activities];
        for &(j, d) in &self.matches {
            c[j] += d as u64;
        }
        c
    }

    /// Applies the decision to queue lengths, failing if any would go
    /// negative.
    pub fn apply(&self, network: &MatchingNetwork, q: &mut [usize]) -> Result<(), PolicyError> {
        for &(j, d) in &self.matches {
            let a = network.activity(j);
            for i in [a.left, a.right] {
                q[i] = q[i].checked_sub(d as usize).ok_or(PolicyError::Infeasible(i))?;
            }
        }
        Ok(())
    }
}

fn execute(network: &MatchingNetwork, q: &mut [usize], out: &mut MatchDecision, j: usize, d: usize) {
    if d == 0 {
        return;
    }
    let a = network.activity(j);
    q[a.left] -= d;
    q[a.right] -= d;
    out.push(j, d as u32);
}

fn feasible(network: &MatchingNetwork, q: &[usize], j: usize) -> usize {
    let a = network.activity(j);
    q[a.left].min(q[a.right])
}

/// The arrival that follows a settled state, if this epoch is one.
fn settled_arrival(ctx: &DecisionContext) -> Option<usize> {
    match ctx.trigger {
        Trigger::Arrival(i) if ctx.settled => Some(i),
        _ => None,
    }
}

fn greedy_over(
    network: &MatchingNetwork,
    ctx: &DecisionContext,
    allowed: impl Fn(usize) -> bool,
) -> MatchDecision {
    let mut out = MatchDecision::default();
    if let Some(i) = settled_arrival(ctx) {
        // only the new job can be matched, and only once
        if let Some(&j) = network
            .incident_by_value(i)
            .iter()
            .find(|&&j| allowed(j) && feasible(network, ctx.q, j) > 0)
        {
            out.push(j, 1);
        }
        return out;
    }
    let mut q = ctx.lengths();
    // executing the top feasible activity to exhaustion never makes a
    // higher-valued one feasible, so one pass suffices
    for &j in network.value_order().iter().filter(|&&j| allowed(j)) {
        let d = feasible(network, &q, j);
        execute(network, &mut q, &mut out, j, d);
    }
    out
}

/// Executes the most valuable feasible match until none remains. Value ties
/// go to the smaller `(left, right)` class pair.
pub fn greedy_decide(ctx: &DecisionContext, network: &MatchingNetwork) -> MatchDecision {
    greedy_over(network, ctx, |_| true)
}

/// Greedy restricted to basic activities.
pub fn greedy_basic_decide(ctx: &DecisionContext, network: &MatchingNetwork, plan: &StaticPlan) -> MatchDecision {
    greedy_over(network, ctx, |j| plan.is_basic(j))
}

/// Classes with a waiting job that have a nonempty compatible partner.
fn partners<'a>(
    network: &'a MatchingNetwork,
    q: &'a [usize],
    class: usize,
) -> impl Iterator<Item = (usize, usize)> + 'a {
    network.incident(class).iter().filter_map(move |&j| {
        let a = network.activity(j);
        let other = if a.left == class { a.right } else { a.left };
        (q[class] > 0 && q[other] > 0).then_some((j, other))
    })
}

/// The class whose job is to be matched next: the arriving class while it
/// still has a partner, otherwise the class holding the most recent
/// head-of-line job among those with a partner.
fn focal_class(
    network: &MatchingNetwork,
    ctx: &DecisionContext,
    q: &[usize],
    heads: &[usize],
) -> Option<usize> {
    if let Trigger::Arrival(i) = ctx.trigger {
        if partners(network, q, i).next().is_some() {
            return Some(i);
        }
    }
    (0..q.len())
        .filter(|&i| partners(network, q, i).next().is_some())
        .max_by(|&a, &b| {
            let ta = ctx.queues[a][heads[a]].arrival;
            let tb = ctx.queues[b][heads[b]].arrival;
            ta.total_cmp(&tb).then(b.cmp(&a))
        })
}

fn single_match_loop(
    ctx: &DecisionContext,
    network: &MatchingNetwork,
    pick: impl Fn(&[usize], &[usize], usize) -> Option<usize>,
) -> MatchDecision {
    let mut out = MatchDecision::default();
    if let Some(i) = settled_arrival(ctx) {
        let heads = vec![0; ctx.q.len()];
        if let Some(j) = pick(ctx.q, &heads, i) {
            out.push(j, 1);
        }
        return out;
    }
    let mut q = ctx.lengths();
    let mut heads = vec![0; q.len()];
    while let Some(i) = focal_class(network, ctx, &q, &heads) {
        let Some(j) = pick(&q, &heads, i) else { break };
        let a = network.activity(j);
        heads[a.left] += 1;
        heads[a.right] += 1;
        execute(network, &mut q, &mut out, j, 1);
    }
    out
}

/// Matches the focal job with the compatible job that has waited longest.
pub fn fcfs_decide(ctx: &DecisionContext, network: &MatchingNetwork) -> MatchDecision {
    single_match_loop(ctx, network, |q, heads, i| {
        partners(network, q, i)
            .min_by(|&(ja, a), &(jb, b)| {
                let ta = ctx.queues[a][heads[a]].arrival;
                let tb = ctx.queues[b][heads[b]].arrival;
                ta.total_cmp(&tb).then(a.cmp(&b)).then(ja.cmp(&jb))
            })
            .map(|(j, _)| j)
    })
}

/// Matches the focal job against the longest compatible queue, ties to the
/// lower class index.
pub fn lqfs_decide(ctx: &DecisionContext, network: &MatchingNetwork) -> MatchDecision {
    single_match_loop(ctx, network, |q, _, i| {
        partners(network, q, i)
            .min_by(|&(ja, a), &(jb, b)| q[b].cmp(&q[a]).then(a.cmp(&b)).then(ja.cmp(&jb)))
            .map(|(j, _)| j)
    })
}

/// Ordered basic priority sets followed by the nonbasic activities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrioritySets {
    pub basic: Vec<Vec<usize>>,
    pub nonbasic: Vec<usize>,
}

impl fmt::Display for PrioritySets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |s: &[usize]| s.iter().map(|j| (j + 1).to_string()).collect::<Vec<_>>().join(", ");
        for (h, set) in self.basic.iter().enumerate() {
            writeln!(f, "P{h}: {{{}}}", show(set))?;
        }
        write!(f, "P{} (nonbasic): {{{}}}", self.basic.len(), show(&self.nonbasic))
    }
}

/// Tree pruning: each round collects the edges whose rate saturates the
/// remaining capacity of one endpoint, scanning edges in index order and
/// skipping the neighbors of every edge taken.
pub fn build_priority_sets(network: &MatchingNetwork, plan: &StaticPlan) -> Result<PrioritySets, PolicyError> {
    let x = plan.rates();
    let mut mu = network.arrival_rates().to_vec();
    let mut remaining: Vec<usize> = plan.basic().to_vec();
    let mut basic = Vec::new();
    while !remaining.is_empty() {
        let mut set = Vec::new();
        let mut consider = remaining.clone();
        while let Some(&j) = consider.first() {
            let a = network.activity(j);
            let hits = |m: f64| (x[j] - m).abs() <= CAPACITY_TOL;
            if hits(mu[a.left]) || hits(mu[a.right]) {
                set.push(j);
                mu[a.left] -= x[j];
                mu[a.right] -= x[j];
                consider.retain(|&k| {
                    let b = network.activity(k);
                    b.left != a.left && b.right != a.right
                });
            } else {
                consider.remove(0);
            }
        }
        if set.is_empty() {
            return Err(PolicyError::Stall { remaining: remaining.len() });
        }
        remaining.retain(|j| !set.contains(j));
        basic.push(set);
    }
    Ok(PrioritySets { basic, nonbasic: plan.nonbasic().to_vec() })
}

/// Exhausts each priority set in order, then the nonbasic activities in
/// index order.
pub fn static_priority_review(ctx: &DecisionContext, network: &MatchingNetwork, sets: &PrioritySets) -> MatchDecision {
    let mut q = ctx.lengths();
    let mut out = MatchDecision::default();
    for &j in sets.basic.iter().flatten().chain(&sets.nonbasic) {
        let d = feasible(network, &q, j);
        execute(network, &mut q, &mut out, j, d);
    }
    out
}

/// `tau_j = (n x*_j + sqrt(n) eta) dt` if `U_j >= 0`, else
/// `(n x*_j - sqrt(n) eta)^+ dt`.
pub fn intended_matches(elapsed: f64, plan: &StaticPlan, shadow: &[f64], eta: f64, scale: f64) -> Vec<f64> {
    let root_n = scale.sqrt();
    shadow
        .iter()
        .zip(plan.rates())
        .map(|(&u, &x)| {
            let rate = if u >= 0.0 { scale * x + root_n * eta } else { (scale * x - root_n * eta).max(0.0) };
            rate * elapsed
        })
        .collect()
}

/// `m_j = ceil(tau_j - epsilon)`, clamped at zero.
pub fn planned_matches(tau: &[f64], epsilon: f64) -> Vec<usize> {
    tau.iter().map(|&t| (t - epsilon).ceil().max(0.0) as usize).collect()
}

fn descending(shadow: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..shadow.len()).collect();
    order.sort_by(|&a, &b| shadow[b].total_cmp(&shadow[a]).then(a.cmp(&b)));
    order
}

fn scaled(q: &[usize], scale: f64) -> Vec<f64> {
    let root_n = scale.sqrt();
    q.iter().map(|&v| v as f64 / root_n).collect()
}

/// Parameters shared by both proposed policies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposedParams {
    pub eta: f64,
    pub epsilon: f64,
}

/// One pass over activities in decreasing shadow value, each executing up to
/// its planned count.
pub fn proposed_decide(
    ctx: &DecisionContext,
    network: &MatchingNetwork,
    plan: &StaticPlan,
    shadow: impl Fn(&[f64]) -> Vec<f64>,
    params: ProposedParams,
) -> MatchDecision {
    let mut q = ctx.lengths();
    let u = shadow(&scaled(&q, ctx.scale));
    let tau = intended_matches(ctx.elapsed, plan, &u, params.eta, ctx.scale);
    let m = planned_matches(&tau, params.epsilon);
    let mut out = MatchDecision::default();
    for j in descending(&u) {
        let d = m[j].min(feasible(network, &q, j));
        execute(network, &mut q, &mut out, j, d);
    }
    out
}

/// One match at a time, re-evaluating shadow values and plans after each.
/// An activity's planned count is a budget for the whole epoch: matches
/// already executed on it are deducted.
pub fn proposed_decide_updating(
    ctx: &DecisionContext,
    network: &MatchingNetwork,
    plan: &StaticPlan,
    shadow: impl Fn(&[f64]) -> Vec<f64>,
    params: ProposedParams,
) -> Result<MatchDecision, PolicyError> {
    let mut q = ctx.lengths();
    let guard = q.iter().sum::<usize>() / 2 + network.num_activities();
    let mut done = vec![0usize; network.num_activities()];
    let mut out = MatchDecision::default();
    for _ in 0..=guard {
        let u = shadow(&scaled(&q, ctx.scale));
        let tau = intended_matches(ctx.elapsed, plan, &u, params.eta, ctx.scale);
        let m = planned_matches(&tau, params.epsilon);
        let next = descending(&u)
            .into_iter()
            .find(|&j| m[j].saturating_sub(done[j]).min(feasible(network, &q, j)) >= 1);
        match next {
            Some(j) => {
                execute(network, &mut q, &mut out, j, 1);
                done[j] += 1;
            }
            None => return Ok(out),
        }
    }
    Err(PolicyError::LoopGuard(guard))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Greedy,
    GreedyBasic,
    Fcfs,
    Lqfs,
    StaticPriority,
    Proposed,
    ProposedUpdating,
}

impl PolicyKind {
    pub const BENCHMARKS: [PolicyKind; 5] =
        [PolicyKind::Greedy, PolicyKind::GreedyBasic, PolicyKind::Fcfs, PolicyKind::Lqfs, PolicyKind::StaticPriority];

    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::Greedy => "Greedy",
            PolicyKind::GreedyBasic => "Greedy-basic",
            PolicyKind::Fcfs => "FCFS",
            PolicyKind::Lqfs => "LQFS",
            PolicyKind::StaticPriority => "Static-priority",
            PolicyKind::Proposed => "Proposed",
            PolicyKind::ProposedUpdating => "Proposed (updating)",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "greedy" => PolicyKind::Greedy,
            "greedy-basic" => PolicyKind::GreedyBasic,
            "fcfs" => PolicyKind::Fcfs,
            "lqfs" => PolicyKind::Lqfs,
            "static-priority" | "static" => PolicyKind::StaticPriority,
            "proposed" => PolicyKind::Proposed,
            "proposed-updating" => PolicyKind::ProposedUpdating,
            _ => return None,
        })
    }
}

/// A configured policy, ready to be evaluated.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    Greedy,
    GreedyBasic,
    Fcfs,
    Lqfs,
    StaticPriority { review_period: f64, sets: PrioritySets },
    Proposed { model: Arc<ValueGradientModel>, params: ProposedParams },
    ProposedUpdating { model: Arc<ValueGradientModel>, params: ProposedParams },
}

impl PolicySpec {
    pub fn static_priority(
        network: &MatchingNetwork,
        plan: &StaticPlan,
        review_period: f64,
    ) -> Result<Self, PolicyError> {
        if !(review_period.is_finite() && review_period > 0.0) {
            return Err(PolicyError::BadReviewPeriod(review_period));
        }
        Ok(PolicySpec::StaticPriority { review_period, sets: build_priority_sets(network, plan)? })
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicySpec::Greedy => PolicyKind::Greedy,
            PolicySpec::GreedyBasic => PolicyKind::GreedyBasic,
            PolicySpec::Fcfs => PolicyKind::Fcfs,
            PolicySpec::Lqfs => PolicyKind::Lqfs,
            PolicySpec::StaticPriority { .. } => PolicyKind::StaticPriority,
            PolicySpec::Proposed { .. } => PolicyKind::Proposed,
            PolicySpec::ProposedUpdating { .. } => PolicyKind::ProposedUpdating,
        }
    }

    pub fn label(&self) -> &'static str {
        self.kind().label()
    }

    /// Review period for discrete-review policies.
    pub fn review_period(&self) -> Option<f64> {
        match self {
            PolicySpec::StaticPriority { review_period, .. } => Some(*review_period),
            _ => None,
        }
    }

    pub fn decide(
        &self,
        ctx: &DecisionContext,
        network: &MatchingNetwork,
        plan: &StaticPlan,
    ) -> Result<MatchDecision, PolicyError> {
        Ok(match self {
            PolicySpec::Greedy => greedy_decide(ctx, network),
            PolicySpec::GreedyBasic => greedy_basic_decide(ctx, network, plan),
            PolicySpec::Fcfs => fcfs_decide(ctx, network),
            PolicySpec::Lqfs => lqfs_decide(ctx, network),
            PolicySpec::StaticPriority { sets, .. } => static_priority_review(ctx, network, sets),
            PolicySpec::Proposed { model, params } => {
                proposed_decide(ctx, network, plan, |z| model_shadow(model, z, network), *params)
            }
            PolicySpec::ProposedUpdating { model, params } => {
                proposed_decide_updating(ctx, network, plan, |z| model_shadow(model, z, network), *params)?
            }
        })
    }
}

fn model_shadow(model: &ValueGradientModel, z: &[f64], network: &MatchingNetwork) -> Vec<f64> {
    shadow_from_gradient(&model.gradient.forward_one(z), network)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tests::x_model;
    use crate::network::Activity;

    fn x_plan(net: &MatchingNetwork) -> StaticPlan {
        StaticPlan::from_rates(net, vec![1.0, 0.5, 0.0, 0.0]).unwrap()
    }

    fn run(decide: impl Fn(&DecisionContext) -> MatchDecision, q: &[usize]) -> MatchDecision {
        let state = QueueState::from_lengths(q);
        decide(&state.context(Trigger::Review, 0.01, 1.0, 100.0))
    }

    #[test]
    fn greedy_examples() {
        let net = x_model(0.1);
        let plan = x_plan(&net);
        assert_eq!(run(|c| greedy_decide(c, &net), &[0, 1, 1, 0]).matches, vec![(0, 1)]);
        assert!(run(|c| greedy_decide(c, &net), &[1, 1, 0, 0]).is_empty());
        assert_eq!(run(|c| greedy_decide(c, &net), &[1, 0, 1, 0]).matches, vec![(2, 1)]);
        assert!(run(|c| greedy_basic_decide(c, &net, &plan), &[1, 0, 1, 0]).is_empty());
        assert_eq!(run(|c| greedy_basic_decide(c, &net, &plan), &[0, 1, 1, 0]).matches, vec![(0, 1)]);
    }

    #[test]
    fn greedy_picks_highest_value_first() {
        let net = x_model(0.1);
        // classes 0 and 1 can both pair with 2 (values 2.0 and 4.0)
        let d = run(|c| greedy_decide(c, &net), &[1, 1, 1, 0]);
        assert_eq!(d.matches, vec![(0, 1)]);
    }

    #[test]
    fn greedy_ties_go_to_the_smaller_pair() {
        // right class 7 can pair with left 0 (activity 9) or left 3 (activity
        // 6), both worth 2
        let (net, _) = crate::catalog::catalog("zigzag-c").unwrap();
        let mut q = vec![0; 8];
        q[0] = 1;
        q[3] = 1;
        q[7] = 1;
        assert_eq!(run(|c| greedy_decide(c, &net), &q).matches, vec![(9, 1)]);
    }

    fn star() -> MatchingNetwork {
        // left 0 can pair with right 1, 2 or 3
        MatchingNetwork::new(
            1,
            3,
            (1..4).map(|r| Activity { left: 0, right: r }).collect(),
            vec![3.0, 1.0, 1.0, 1.0],
            vec![1.0, 5.0, 3.0],
            vec![1.0; 4],
            vec![0.0; 4],
            vec![0.0; 4],
        )
        .unwrap()
    }

    #[test]
    fn fcfs_matches_longest_waiting() {
        let net = star();
        let queues = vec![
            VecDeque::from([WaitingJob { id: 9, arrival: 10.0 }]),
            VecDeque::new(),
            VecDeque::from([WaitingJob { id: 2, arrival: 10.0 - 5.2 }]),
            VecDeque::from([WaitingJob { id: 5, arrival: 10.0 - 1.1 }]),
        ];
        let state = QueueState::from_queues(queues);
        let d = fcfs_decide(&state.context(Trigger::Arrival(0), 0.1, 10.0, 100.0), &net);
        assert_eq!(d.matches, vec![(1, 1)]);
        let single = vec![
            VecDeque::from([WaitingJob { id: 9, arrival: 10.0 }]),
            VecDeque::new(),
            VecDeque::new(),
            VecDeque::from([WaitingJob { id: 5, arrival: 3.0 }]),
        ];
        let single = QueueState::from_queues(single);
        assert_eq!(fcfs_decide(&single.context(Trigger::Arrival(0), 0.1, 10.0, 100.0), &net).matches, vec![(2, 1)]);
        let none = QueueState::from_lengths(&[1, 0, 0, 0]);
        assert!(fcfs_decide(&none.context(Trigger::Arrival(0), 0.1, 10.0, 100.0), &net).is_empty());
    }

    #[test]
    fn lqfs_examples() {
        let net = star();
        let d = run(|c| lqfs_decide(c, &net), &[1, 0, 3, 7]);
        assert_eq!(d.matches, vec![(2, 1)]);
        let d = run(|c| lqfs_decide(c, &net), &[1, 0, 4, 4]);
        assert_eq!(d.matches, vec![(1, 1)]);
        let d = run(|c| lqfs_decide(c, &net), &[1, 2, 0, 0]);
        assert_eq!(d.matches, vec![(0, 1)]);
    }

    #[test]
    fn priority_sets_single_edge() {
        let net = MatchingNetwork::new(
            1,
            1,
            vec![Activity { left: 0, right: 1 }],
            vec![1.0, 1.0],
            vec![1.0],
            vec![1.0; 2],
            vec![0.0; 2],
            vec![0.0; 2],
        )
        .unwrap();
        let plan = StaticPlan::from_rates(&net, vec![1.0]).unwrap();
        let sets = build_priority_sets(&net, &plan).unwrap();
        assert_eq!(sets.basic, vec![vec![0]]);
        assert!(sets.nonbasic.is_empty());
    }

    #[test]
    fn priority_sets_path_trace() {
        // a:(1,3) b:(2,3) c:(2,4) with rates 1, 1, 2
        let net = MatchingNetwork::new(
            2,
            2,
            vec![Activity { left: 0, right: 2 }, Activity { left: 1, right: 2 }, Activity { left: 1, right: 3 }],
            vec![1.0, 3.0, 2.0, 2.0],
            vec![1.0; 3],
            vec![1.0; 4],
            vec![0.0; 4],
            vec![0.0; 4],
        )
        .unwrap();
        let plan = StaticPlan::from_rates(&net, vec![1.0, 1.0, 2.0]).unwrap();
        let sets = build_priority_sets(&net, &plan).unwrap();
        assert_eq!(sets.basic, vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn priority_sets_stall() {
        // a 4-cycle with equal rates never saturates a capacity
        let net = MatchingNetwork::new(
            2,
            2,
            vec![
                Activity { left: 0, right: 2 },
                Activity { left: 0, right: 3 },
                Activity { left: 1, right: 2 },
                Activity { left: 1, right: 3 },
            ],
            vec![1.0; 4],
            vec![1.0; 4],
            vec![1.0; 4],
            vec![0.0; 4],
            vec![0.0; 4],
        )
        .unwrap();
        let plan = StaticPlan::from_rates(&net, vec![0.5; 4]).unwrap();
        assert_eq!(build_priority_sets(&net, &plan), Err(PolicyError::Stall { remaining: 4 }));
    }

    #[test]
    fn static_priority_examples() {
        let net = x_model(0.1);
        let plan = x_plan(&net);
        let sets = build_priority_sets(&net, &plan).unwrap();
        assert_eq!(sets.basic, vec![vec![0, 1]]);
        assert_eq!(sets.nonbasic, vec![2, 3]);
        assert!(run(|c| static_priority_review(c, &net, &sets), &[0; 4]).is_empty());
        let d = run(|c| static_priority_review(c, &net, &sets), &[2, 1, 1, 2]);
        assert_eq!(d.matches, vec![(0, 1), (1, 2)]);
        let d = run(|c| static_priority_review(c, &net, &sets), &[2, 1, 2, 1]);
        assert_eq!(d.matches, vec![(0, 1), (1, 1), (2, 1)]);
        // class 2 has one job wanted by a set-0 and a set-1 activity
        let two = PrioritySets { basic: vec![vec![0], vec![2]], nonbasic: vec![] };
        let d = run(|c| static_priority_review(c, &net, &two), &[1, 1, 1, 0]);
        assert_eq!(d.matches, vec![(0, 1)]);
    }

    #[test]
    fn intended_and_planned() {
        let net = x_model(0.1);
        let plan = x_plan(&net);
        let tau = intended_matches(0.01, &plan, &[1.0, -1.0, -1.0, 0.0], 0.5, 100.0);
        assert!((tau[0] - 1.05).abs() < 1e-12);
        assert!((tau[1] - 0.45).abs() < 1e-12);
        assert_eq!(tau[2], 0.0);
        assert!((tau[3] - 0.05).abs() < 1e-12);
        assert_eq!(intended_matches(0.0, &plan, &[1.0; 4], 0.5, 100.0), vec![0.0; 4]);
        assert_eq!(planned_matches(&[1.05], 0.03), vec![2]);
        assert_eq!(planned_matches(&[0.0, 0.0], 0.5), vec![0, 0]);
        assert_eq!(planned_matches(&[2.7, 0.4], 1.0), vec![2, 0]);
        assert_eq!(planned_matches(&[0.01], 0.03), vec![0]);
    }

    #[test]
    fn proposed_sequential_trace() {
        let net = x_model(0.1);
        let plan = x_plan(&net);
        // eta chosen so that m = 1 for every activity at dt = 0.005
        let params = ProposedParams { eta: 1.0, epsilon: 0.01 };
        let shadow = |_: &[f64]| vec![4.0, 3.0, 2.0, 1.0];
        let queues = QueueState::from_lengths(&[2, 3, 3, 2]);
        let c = queues.context(Trigger::Review, 0.005, 1.0, 100.0);
        let m = planned_matches(&intended_matches(0.005, &plan, &shadow(&[]), 1.0, 100.0), 0.01);
        assert_eq!(m, vec![1, 1, 1, 1]);
        let d = proposed_decide(&c, &net, &plan, shadow, params);
        assert_eq!(d.matches, vec![(0, 1), (1, 1), (2, 1), (3, 1)]);
        let mut q = vec![2, 3, 3, 2];
        d.apply(&net, &mut q).unwrap();
        assert_eq!(q, vec![0, 1, 1, 0]);
    }

    #[test]
    fn proposed_feasibility_clamp() {
        let net = x_model(0.1);
        let plan = x_plan(&net);
        let params = ProposedParams { eta: 0.5, epsilon: 0.0 };
        let queues = QueueState::from_lengths(&[0, 5, 5, 0]);
        let c = queues.context(Trigger::Review, 0.1, 1.0, 100.0);
        let d = proposed_decide(&c, &net, &plan, |_| vec![1.0; 4], params);
        assert_eq!(d.matches, vec![(0, 5)]);
        let c0 = DecisionContext { elapsed: 0.0, ..c };
        assert!(proposed_decide(&c0, &net, &plan, |_| vec![1.0; 4], params).is_empty());
    }

    #[test]
    fn updating_matches_one_pass_for_fixed_shadow() {
        let net = x_model(0.1);
        let plan = x_plan(&net);
        let params = ProposedParams { eta: 0.5, epsilon: 0.0 };
        let queues = QueueState::from_lengths(&[3, 4, 5, 2]);
        let c = queues.context(Trigger::Review, 1.0, 1.0, 100.0);
        let v = net.values().to_vec();
        let a = proposed_decide(&c, &net, &plan, |_| v.clone(), params);
        let b = proposed_decide_updating(&c, &net, &plan, |_| v.clone(), params).unwrap();
        assert_eq!(a.counts(4), b.counts(4));
        let empty = QueueState::from_lengths(&[0; 4]);
        let ce = DecisionContext { q: &empty.q, queues: &empty.queues, ..c };
        assert!(proposed_decide_updating(&ce, &net, &plan, |_| v.clone(), params).unwrap().is_empty());
    }

    #[test]
    fn updating_reacts_to_state() {
        // activity 0 (classes 1,2) loses its appeal once class 1 drops below
        // its starting level, which hands the remaining jobs to activity 3
        let net = x_model(0.1);
        let plan = x_plan(&net);
        let params = ProposedParams { eta: 0.5, epsilon: 0.0 };
        let queues = QueueState::from_lengths(&[0, 2, 2, 2]);
        let c = queues.context(Trigger::Review, 1.0, 1.0, 100.0);
        let shadow = |z: &[f64]| {
            if z[1] >= 0.2 - 1e-12 {
                vec![2.0, -1.0, -1.0, 1.0]
            } else {
                vec![-1.0, -1.0, -1.0, 1.0]
            }
        };
        let one_pass = proposed_decide(&c, &net, &plan, shadow, params);
        let updating = proposed_decide_updating(&c, &net, &plan, shadow, params).unwrap();
        assert_eq!(one_pass.matches, vec![(0, 2)]);
        assert_eq!(updating.matches, vec![(0, 1), (3, 1)]);
    }

    #[test]
    fn settled_arrival_scans_only_the_new_job() {
        let net = x_model(0.1);
        let plan = x_plan(&net);
        // class 1 arrives to a settled state where class 2 and 3 wait
        let state = QueueState::from_lengths(&[0, 1, 2, 1]);
        let mut c = state.context(Trigger::Arrival(1), 0.1, 1.0, 100.0);
        let full = greedy_decide(&c, &net);
        c.settled = true;
        assert_eq!(greedy_decide(&c, &net), full);
        assert_eq!(full.matches, vec![(0, 1)]);
        assert_eq!(greedy_basic_decide(&c, &net, &plan).matches, vec![(0, 1)]);
        assert_eq!(fcfs_decide(&c, &net).total(), 1);
        assert_eq!(lqfs_decide(&c, &net).matches, vec![(0, 1)]);
    }

    #[test]
    fn apply_rejects_overdraw() {
        let net = x_model(0.1);
        let d = MatchDecision { matches: vec![(0, 2)] };
        assert_eq!(d.apply(&net, &mut [0, 1, 5, 0]), Err(PolicyError::Infeasible(1)));
    }

    #[test]
    fn kinds_parse() {
        for k in [PolicyKind::Greedy, PolicyKind::GreedyBasic, PolicyKind::Fcfs, PolicyKind::Lqfs, PolicyKind::StaticPriority, PolicyKind::Proposed, PolicyKind::ProposedUpdating] {
            let s = serde_json::to_string(&k).unwrap();
            assert_eq!(PolicyKind::parse(s.trim_matches('"')), Some(k));
        }
        assert!(PolicySpec::static_priority(&x_model(0.1), &x_plan(&x_model(0.1)), 0.0).is_err());
    }
}
