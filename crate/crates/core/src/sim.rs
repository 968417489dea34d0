//! Discrete-event simulation of the pre-limit matching system with exact
//! discounted-cost accounting and common random numbers across policies.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::MatchingNetwork;
use crate::plan::StaticPlan;
use crate::policy::{MatchDecision, PolicyError, PolicyKind, PolicySpec, QueueState, Trigger, WaitingJob};
use crate::rng::{mix, substream};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("event at {current} precedes the clock at {previous}")]
    ClockSkew { previous: f64, current: f64 },
    #[error("conservation violated for class {class} at t = {time}")]
    Conservation { time: f64, class: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// System scale `n`; class `i` arrives at rate `n * lambda_i`.
    pub scale: f64,
    pub discount: f64,
    pub horizon: f64,
    pub replications: usize,
    pub seed: u64,
    /// Matches are counted for usage reports up to this time.
    pub usage_window: f64,
    /// Check the conservation identity after every event.
    #[serde(default)]
    pub audit: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scale: 100.0,
            discount: 0.01,
            horizon: 1000.0,
            replications: 100,
            seed: 0,
            usage_window: 1000.0,
            audit: false,
        }
    }
}

impl SimConfig {
    /// `r = 0` is accepted and means undiscounted accounting.
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(self.scale >= 1.0 && self.scale.is_finite()) {
            return bad("scale must be at least 1");
        }
        if !(self.discount >= 0.0 && self.discount.is_finite()) {
            return bad("discount rate must be nonnegative");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive");
        }
        if self.usage_window.is_nan() || self.usage_window < 0.0 {
            return bad("usage window must be nonnegative");
        }
        Ok(())
    }

    /// `(v . x*) n (1 - e^{-rT}) / r`, the fluid value over the horizon.
    pub fn centering(&self, fluid_value: f64) -> f64 {
        fluid_value * self.scale * discounted_integral(self.discount, 0.0, self.horizon)
    }
}

/// `int_{t1}^{t2} e^{-rt} dt`, exact for `r = 0`.
pub fn discounted_integral(r: f64, t1: f64, t2: f64) -> f64 {
    if r == 0.0 {
        t2 - t1
    } else {
        (-r * t1).exp() * -(-r * (t2 - t1)).exp_m1() / r
    }
}

/// Per-class arrival and patience draws for one replication. The draws
/// depend only on the seed, the replication, the network and `(n, T)`, never
/// on the policy being simulated.
#[derive(Debug, Clone)]
pub struct EventStream {
    replication: usize,
    rngs: Vec<ChaCha8Rng>,
    rates: Vec<f64>,
    patience_rates: Vec<f64>,
    next: Vec<f64>,
    digest: u64,
}

impl EventStream {
    pub fn new(network: &MatchingNetwork, config: &SimConfig, replication: usize) -> Self {
        let key = mix(config.seed, replication as u64);
        let rates: Vec<f64> = network.arrival_rates().iter().map(|l| l * config.scale).collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..rates.len()).map(|i| substream(key, i as u64)).collect();
        let mut digest = key;
        let next = rates
            .iter()
            .zip(&mut rngs)
            .map(|(&rate, rng)| {
                let e: f64 = rng.sample(Exp1);
                digest = mix(digest, e.to_bits());
                e / rate
            })
            .collect();
        Self { replication, rngs, rates, patience_rates: network.abandonment_rates().to_vec(), next, digest }
    }

    pub fn replication(&self) -> usize {
        self.replication
    }

    pub fn next_arrival(&self, class: usize) -> f64 {
        self.next[class]
    }

    /// Consumes the pending arrival of `class`, returning its time and the
    /// job's patience (infinite when the class never abandons).
    pub fn arrive(&mut self, class: usize) -> (f64, f64) {
        let rng = &mut self.rngs[class];
        let p: f64 = rng.sample(Exp1);
        let e: f64 = rng.sample(Exp1);
        self.digest = mix(mix(self.digest, p.to_bits()), e.to_bits());
        let t = self.next[class];
        self.next[class] = t + e / self.rates[class];
        let gamma = self.patience_rates[class];
        (t, if gamma > 0.0 { p / gamma } else { f64::INFINITY })
    }

    /// Hash of every draw consumed so far.
    pub fn digest(&self) -> u64 {
        self.digest
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Arrival,
    Abandonment,
    Review,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    kind: Kind,
    class: usize,
    job: u64,
}

impl Event {
    fn key(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.cmp(&other.kind))
            .then(self.class.cmp(&other.class))
            .then(self.job.cmp(&other.job))
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// reversed so the max-heap pops the earliest event
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        other.key(self)
    }
}

/// Outcome of one policy on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub replication: usize,
    /// Centered discounted value, `(centering - Pi) / sqrt(n)`.
    pub xi: f64,
    /// Discounted net value `Pi`: match value minus holding and abandonment
    /// costs.
    pub discounted_value: f64,
    pub match_value: f64,
    pub holding_cost: f64,
    pub abandonment_cost: f64,
    /// Undiscounted matches per activity inside the usage window.
    pub usage: Vec<u64>,
    pub matches: Vec<u64>,
    pub arrivals: Vec<u64>,
    pub abandonments: Vec<u64>,
    pub final_queue: Vec<usize>,
    pub decisions: u64,
    pub stream_digest: u64,
}

struct Ledger<'a> {
    network: &'a MatchingNetwork,
    config: &'a SimConfig,
    state: QueueState,
    held: f64,
    match_value: f64,
    holding_cost: f64,
    abandonment_cost: f64,
    usage: Vec<u64>,
    matches: Vec<u64>,
    arrivals: Vec<u64>,
    abandonments: Vec<u64>,
}

impl<'a> Ledger<'a> {
    fn new(network: &'a MatchingNetwork, config: &'a SimConfig) -> Self {
        let (i, j) = (network.num_classes(), network.num_activities());
        Self {
            network,
            config,
            state: QueueState::empty(i),
            held: 0.0,
            match_value: 0.0,
            holding_cost: 0.0,
            abandonment_cost: 0.0,
            usage: vec![0; j],
            matches: vec![0; j],
            arrivals: vec![0; i],
            abandonments: vec![0; i],
        }
    }

    fn hold(&mut self, t1: f64, t2: f64) {
        if self.held != 0.0 {
            self.holding_cost += self.held * discounted_integral(self.config.discount, t1, t2);
        }
    }

    fn add(&mut self, class: usize, job: WaitingJob) {
        self.state.queues[class].push_back(job);
        self.state.q[class] += 1;
        self.held += self.network.holding_costs()[class];
        self.arrivals[class] += 1;
    }

    /// Removes job `id` from `class` if it is still waiting.
    fn abandon(&mut self, class: usize, id: u64, t: f64) -> bool {
        let queue = &mut self.state.queues[class];
        let Ok(pos) = queue.binary_search_by(|w| w.id.cmp(&id)) else { return false };
        queue.remove(pos);
        self.state.q[class] -= 1;
        self.held -= self.network.holding_costs()[class];
        self.abandonments[class] += 1;
        self.abandonment_cost += self.network.abandonment_penalties()[class] * (-self.config.discount * t).exp();
        true
    }

    fn execute(&mut self, decision: &MatchDecision, t: f64) -> Result<(), PolicyError> {
        let weight = (-self.config.discount * t).exp();
        let h = self.network.holding_costs();
        for &(j, d) in &decision.matches {
            let a = self.network.activity(j);
            for i in [a.left, a.right] {
                if self.state.q[i] < d as usize {
                    return Err(PolicyError::Infeasible(i));
                }
            }
            for i in [a.left, a.right] {
                self.state.queues[i].drain(..d as usize);
                self.state.q[i] -= d as usize;
                self.held -= h[i] * d as f64;
            }
            self.match_value += self.network.values()[j] * d as f64 * weight;
            self.matches[j] += d as u64;
            if t <= self.config.usage_window {
                self.usage[j] += d as u64;
            }
        }
        Ok(())
    }

    /// `q = arrivals - R * matches - abandonments`, and every queue holds
    /// exactly `q_i` jobs.
    fn audit(&self, t: f64) -> Result<(), SimError> {
        let mut expect: Vec<i64> =
            self.arrivals.iter().zip(&self.abandonments).map(|(&a, &b)| a as i64 - b as i64).collect();
        for (j, &m) in self.matches.iter().enumerate() {
            let a = self.network.activity(j);
            expect[a.left] -= m as i64;
            expect[a.right] -= m as i64;
        }
        for (class, &e) in expect.iter().enumerate() {
            let q = self.state.q[class];
            if e != q as i64 || self.state.queues[class].len() != q {
                return Err(SimError::Conservation { time: t, class });
            }
        }
        Ok(())
    }

    /// Some activity incident to `class` has jobs on both sides.
    fn can_match(&self, class: usize) -> bool {
        let q = &self.state.q;
        self.network.incident(class).iter().any(|&j| {
            let a = self.network.activity(j);
            q[a.left] > 0 && q[a.right] > 0
        })
    }
}

/// Runs one policy on one replication's event stream.
///
/// Exhaustive policies (greedy, greedy-basic, FCFS, LQFS) leave no feasible
/// match in their activity set after each decision, so abandonments cannot
/// trigger a match and an arrival can trigger at most one; they are invoked
/// with `settled` set and skipped on abandonments. Static priority reviews
/// only at the first multiple of its period after an arrival that creates a
/// feasible match, which yields the same trajectory as reviewing at every
/// multiple.
pub fn simulate_replication(
    network: &MatchingNetwork,
    plan: &StaticPlan,
    policy: &PolicySpec,
    config: &SimConfig,
    mut stream: EventStream,
) -> Result<SimResult, SimError> {
    config.validate()?;
    let horizon = config.horizon;
    let review = policy.review_period();
    let exhaustive = matches!(
        policy.kind(),
        PolicyKind::Greedy | PolicyKind::GreedyBasic | PolicyKind::Fcfs | PolicyKind::Lqfs
    );
    let mut ledger = Ledger::new(network, config);
    let mut heap = BinaryHeap::new();
    for class in 0..network.num_classes() {
        heap.push(Event { time: stream.next_arrival(class), kind: Kind::Arrival, class, job: 0 });
    }
    let mut clock = 0.0;
    let mut last_epoch = 0.0;
    let mut review_pending = false;
    let mut next_id = 0u64;
    let mut decisions = 0u64;

    while let Some(event) = heap.pop() {
        if event.time > horizon {
            break;
        }
        if event.time < clock {
            return Err(SimError::ClockSkew { previous: clock, current: event.time });
        }
        ledger.hold(clock, event.time);
        clock = event.time;

        let trigger = match event.kind {
            Kind::Arrival => {
                let class = event.class;
                let (t, patience) = stream.arrive(class);
                next_id += 1;
                ledger.add(class, WaitingJob { id: next_id, arrival: t });
                let deadline = t + patience;
                if deadline <= horizon {
                    heap.push(Event { time: deadline, kind: Kind::Abandonment, class, job: next_id });
                }
                heap.push(Event { time: stream.next_arrival(class), kind: Kind::Arrival, class, job: 0 });
                Trigger::Arrival(class)
            }
            Kind::Abandonment => {
                if !ledger.abandon(event.class, event.job, clock) {
                    continue;
                }
                Trigger::Abandonment(event.class)
            }
            Kind::Review => {
                review_pending = false;
                Trigger::Review
            }
        };

        let decide = match (review, trigger) {
            (Some(l), Trigger::Arrival(i)) => {
                if !review_pending && ledger.can_match(i) {
                    let at = ((clock / l).floor() + 1.0) * l;
                    if at <= horizon {
                        heap.push(Event { time: at, kind: Kind::Review, class: 0, job: 0 });
                        review_pending = true;
                    }
                }
                false
            }
            (Some(_), Trigger::Review) => true,
            (Some(_), Trigger::Abandonment(_)) => false,
            (None, Trigger::Abandonment(_)) => !exhaustive,
            (None, _) => true,
        };
        if decide {
            let mut ctx = ledger.state.context(trigger, clock - last_epoch, clock, config.scale);
            ctx.settled = exhaustive;
            let decision = policy.decide(&ctx, network, plan)?;
            decisions += 1;
            ledger.execute(&decision, clock)?;
        }
        if !matches!(trigger, Trigger::Review) {
            last_epoch = clock;
        }
        if config.audit {
            ledger.audit(clock)?;
        }
    }
    ledger.hold(clock, horizon);

    let discounted_value = ledger.match_value - ledger.holding_cost - ledger.abandonment_cost;
    let xi = (config.centering(plan.fluid_value(network)) - discounted_value) / config.scale.sqrt();
    Ok(SimResult {
        replication: stream.replication(),
        xi,
        discounted_value,
        match_value: ledger.match_value,
        holding_cost: ledger.holding_cost,
        abandonment_cost: ledger.abandonment_cost,
        usage: ledger.usage,
        matches: ledger.matches,
        arrivals: ledger.arrivals,
        abandonments: ledger.abandonments,
        final_queue: ledger.state.q,
        decisions,
        stream_digest: stream.digest(),
    })
}

/// Mean and 95% normal confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_dev: f64,
    pub half_width: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(x: &[f64]) -> Self {
        let n = x.len();
        let mean = x.iter().sum::<f64>() / n as f64;
        let std_dev = if n > 1 {
            (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_dev, half_width: 1.96 * std_dev / (n as f64).sqrt(), samples: n }
    }

    pub fn scaled(&self, unit: f64) -> Self {
        Self { mean: self.mean / unit, std_dev: self.std_dev / unit, half_width: self.half_width / unit, ..*self }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }

    /// Whether the intervals `mean +/- half_width` intersect.
    pub fn overlaps(&self, mean: f64, half_width: f64) -> bool {
        self.lower() <= mean + half_width && mean - half_width <= self.upper()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySummary {
    pub label: String,
    pub kind: PolicyKind,
    pub xi: Estimate,
    /// Mean usage counts per activity.
    pub usage: Vec<f64>,
    pub results: Vec<SimResult>,
}

impl PolicySummary {
    fn new(policy: &PolicySpec, results: Vec<SimResult>) -> Self {
        let xi: Vec<f64> = results.iter().map(|r| r.xi).collect();
        Self {
            label: policy.label().to_string(),
            kind: policy.kind(),
            xi: Estimate::from_samples(&xi),
            usage: activity_usage(&results),
            results,
        }
    }
}

/// Mean per-activity usage over replications.
pub fn activity_usage(results: &[SimResult]) -> Vec<f64> {
    let Some(first) = results.first() else { return Vec::new() };
    let mut mean = vec![0.0; first.usage.len()];
    for r in results {
        for (m, &u) in mean.iter_mut().zip(&r.usage) {
            *m += u as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= results.len() as f64);
    mean
}

/// Evaluates every policy on the same replication streams.
pub fn run_experiment(
    network: &MatchingNetwork,
    plan: &StaticPlan,
    policies: &[PolicySpec],
    config: &SimConfig,
) -> Result<Vec<PolicySummary>, SimError> {
    config.validate()?;
    if config.replications < 2 {
        return Err(SimError::Config("at least two replications are required".into()));
    }
    let per_rep: Vec<Vec<SimResult>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| {
            let stream = EventStream::new(network, config, rep);
            policies
                .iter()
                .map(|p| simulate_replication(network, plan, p, config, stream.clone()))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let mut columns: Vec<Vec<SimResult>> = policies.iter().map(|_| Vec::with_capacity(per_rep.len())).collect();
    for row in per_rep {
        for (col, r) in columns.iter_mut().zip(row) {
            col.push(r);
        }
    }
    Ok(policies.iter().zip(columns).map(|(p, c)| PolicySummary::new(p, c)).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearch {
    pub best: f64,
    pub evaluated: Vec<(f64, Estimate)>,
}

/// Picks the static-priority review period with the lowest mean centered
/// value, evaluated on common streams.
pub fn grid_search_review_period(
    network: &MatchingNetwork,
    plan: &StaticPlan,
    config: &SimConfig,
    grid: &[f64],
) -> Result<GridSearch, SimError> {
    if grid.is_empty() {
        return Err(SimError::Config("empty review-period grid".into()));
    }
    let policies = grid
        .iter()
        .map(|&l| PolicySpec::static_priority(network, plan, l))
        .collect::<Result<Vec<_>, _>>()?;
    let summaries = run_experiment(network, plan, &policies, config)?;
    let evaluated: Vec<(f64, Estimate)> = grid.iter().copied().zip(summaries.iter().map(|s| s.xi)).collect();
    let best = evaluated
        .iter()
        .min_by(|a, b| a.1.mean.total_cmp(&b.1.mean))
        .map(|e| e.0)
        .expect("nonempty grid");
    Ok(GridSearch { best, evaluated })
}
