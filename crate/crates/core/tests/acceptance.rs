mod common;

use std::error::Error;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bimatch::bsde::{
    empirical_loss, hamiltonian_min, loss_and_gradients, train_resumable, LossContext, TelemetryRecord,
    ValueGradientModel,
};
use bimatch::catalog::{self, NAMES};
use bimatch::experiment::Instance;
use bimatch::neural::Mlp;
use bimatch::policy::{PolicyKind, PolicySpec};
use bimatch::rbm::{skorokhod, ReferenceConfig, ReferenceProcess, SKOROKHOD_TOL};
use bimatch::rng::substream;
use bimatch::sim::{run_experiment, PolicySummary, SimConfig};
use bimatch::spp::solve_spp;
use ndarray::{Array1, Array2};
use rand::Rng;

type Outcome = Result<(bool, String), Box<dyn Error>>;

const CRN_SEED: u64 = 1;
const PUBLISHED_HALF_WIDTH: f64 = 0.10;
const X_HIGH_ROWS: [(&str, f64); 5] =
    [("Greedy", 3.63), ("Greedy-basic", 4.68), ("FCFS", 3.99), ("LQFS", 3.90), ("Static-priority", 3.47)];
const GREEDY_BASIC_USAGE: [f64; 2] = [98719.0, 49142.0];
const GREEDY_USAGE: [f64; 4] = [67217.0, 15880.0, 32681.0, 32709.0];
const PROPOSED_TARGET: f64 = 3.34;
const TRAIN_ITERATIONS: usize = 20_000;
const TRAIN_SEEDS: [u64; 3] = [1, 2, 3];

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance")
}

/// Runs every criterion unless `ACCEPTANCE_ONLY` lists a subset of ids.
struct Harness {
    failures: usize,
    only: Option<Vec<String>>,
}

impl Harness {
    fn wants(&self, ids: &[&str]) -> bool {
        self.only.as_ref().is_none_or(|only| ids.iter().any(|id| only.iter().any(|o| o == id)))
    }

    fn check(&mut self, id: &str, title: &str, run: impl FnOnce() -> Outcome) {
        if !self.wants(&[id]) {
            return;
        }
        let start = Instant::now();
        let (pass, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            self.failures += 1;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("{verdict} [{id}] {title}: {detail} ({})", seconds(start.elapsed()));
        std::io::stdout().flush().ok();
    }
}

fn seconds(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn rel_diff(ours: f64, target: f64) -> f64 {
    (ours - target).abs() / target.abs()
}

fn row<'a>(summaries: &'a [PolicySummary], label: &str) -> Result<&'a PolicySummary, Box<dyn Error>> {
    summaries.iter().find(|s| s.label == label).ok_or_else(|| format!("no {label} row").into())
}

fn benchmarks(inst: &Instance) -> Result<Vec<PolicySpec>, Box<dyn Error>> {
    Ok(inst.policies(&PolicyKind::BENCHMARKS, None, None)?)
}

fn spp_reproduction() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for name in NAMES {
        let (net, shipped) = catalog::catalog(name)?;
        let shipped = shipped.ok_or_else(|| format!("{name} has no published rates"))?;
        let sol = solve_spp(&net)?;
        for (a, b) in sol.x.iter().zip(&shipped) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    Ok((worst <= 1e-9 && elapsed < Duration::from_secs(1), format!("max |x - x*| = {worst:.1e} over {} instances in {}", NAMES.len(), seconds(elapsed))))
}

fn x_high_rows(summaries: &[PolicySummary], unit: f64) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, published) in X_HIGH_ROWS {
        let e = row(summaries, label)?.xi.scaled(unit);
        let ok = e.overlaps(published, PUBLISHED_HALF_WIDTH);
        pass &= ok;
        parts.push(format!("{label} {:.2}±{:.2} vs {published:.2}{}", e.mean, e.half_width, if ok { "" } else { " (no overlap)" }));
    }
    Ok((pass, parts.join(", ")))
}

fn x_high_usage(inst: &Instance, summaries: &[PolicySummary]) -> Outcome {
    let gb = &row(summaries, "Greedy-basic")?.usage;
    let g = &row(summaries, "Greedy")?.usage;
    let basic = inst.plan.basic();
    let nonbasic_zero = inst.plan.nonbasic().iter().all(|&j| gb[j] == 0.0);
    let gb_err = basic.iter().zip(GREEDY_BASIC_USAGE).map(|(&j, t)| rel_diff(gb[j], t)).fold(0.0, f64::max);
    let g_err = g.iter().zip(GREEDY_USAGE).map(|(&u, t)| rel_diff(u, t)).fold(0.0, f64::max);
    let show = |u: &[f64]| u.iter().map(|v| format!("{v:.0}")).collect::<Vec<_>>().join("/");
    Ok((
        nonbasic_zero && gb_err <= 0.02 && g_err <= 0.03,
        format!(
            "greedy-basic {} (max dev {:.2}%, nonbasic zero: {nonbasic_zero}), greedy {} (max dev {:.2}%)",
            show(gb),
            100.0 * gb_err,
            show(g),
            100.0 * g_err
        ),
    ))
}

fn zigzag_rows() -> Outcome {
    let rows = [
        ("zigzag-a", PolicyKind::GreedyBasic, 5.73, 0.27),
        ("zigzag-b", PolicyKind::Fcfs, 6.76, 0.22),
        ("zigzag-c", PolicyKind::Greedy, 9.91, 0.20),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, kind, published, hw) in rows {
        let inst = common::instance(name);
        let cfg = SimConfig { replications: 100, ..inst.sim_config(CRN_SEED) };
        let policies = inst.policies(&[kind], None, None)?;
        let e = run_experiment(&inst.network, &inst.plan, &policies, &cfg)?[0].xi.scaled(inst.defaults.unit);
        let ok = e.overlaps(published, hw);
        pass &= ok;
        parts.push(format!("{name} {} {:.2}±{:.2} vs {published:.2}±{hw:.2}", kind.label(), e.mean, e.half_width));
    }
    Ok((pass, parts.join(", ")))
}

/// Trains (or reloads) one X-high model per seed and evaluates the one-pass proposed policy
/// on the benchmark streams.
fn trained_x_high(inst: &Instance, cfg: &SimConfig) -> Vec<(u64, Result<PolicySummary, String>)> {
    TRAIN_SEEDS
        .iter()
        .map(|&seed| {
            let outcome = (|| -> Result<PolicySummary, Box<dyn Error>> {
                let mut tc = inst.trainer_config(TRAIN_ITERATIONS, seed);
                tc.checkpoint_dir = Some(cache_dir().join(format!("x-high-seed{seed}")));
                tc.checkpoint_every = 1000;
                let model = Arc::new(train_resumable(&inst.network, &inst.plan, &tc)?);
                let policies = inst.policies(&[PolicyKind::Proposed], Some(&model), None)?;
                Ok(run_experiment(&inst.network, &inst.plan, &policies, cfg)?.remove(0))
            })();
            (seed, outcome.map_err(|e| e.to_string()))
        })
        .collect()
}

fn trained_policy(trained: &[(u64, Result<PolicySummary, String>)], benchmarks: &[PolicySummary], unit: f64) -> Outcome {
    let mut parts = Vec::new();
    let mut best: Option<(u64, &PolicySummary)> = None;
    for (seed, r) in trained {
        match r {
            Ok(s) => {
                let e = s.xi.scaled(unit);
                parts.push(format!("seed {seed} {:.2}±{:.2}", e.mean, e.half_width));
                if best.is_none_or(|(_, b)| s.xi.mean < b.xi.mean) {
                    best = Some((*seed, s));
                }
            }
            Err(e) => parts.push(format!("seed {seed} failed ({e})")),
        }
    }
    let Some((seed, best)) = best else { return Ok((false, parts.join(", "))) };
    let e = best.xi.scaled(unit);
    let top = benchmarks.iter().min_by(|a, b| a.xi.mean.total_cmp(&b.xi.mean)).ok_or("no benchmarks")?;
    let sp = row(benchmarks, "Static-priority")?.xi.scaled(unit);
    let beats = best.xi.mean < top.xi.mean;
    let overlaps = e.overlaps(PROPOSED_TARGET, PUBLISHED_HALF_WIDTH);
    parts.push(format!(
        "best seed {seed} {:.2} vs static-priority {:.2}, best benchmark {} {:.2}, published {PROPOSED_TARGET:.2}",
        e.mean,
        sp.mean,
        top.label,
        top.xi.mean / unit
    ));
    Ok((beats || overlaps, parts.join(", ")))
}

fn usage_signature(inst: &Instance, trained: &[(u64, Result<PolicySummary, String>)]) -> Outcome {
    let best = trained
        .iter()
        .filter_map(|(seed, r)| r.as_ref().ok().map(|s| (seed, s)))
        .min_by(|a, b| a.1.xi.mean.total_cmp(&b.1.xi.mean))
        .ok_or("no trained policy")?;
    let total = |set: &[usize]| set.iter().map(|&j| best.1.usage[j]).sum::<f64>();
    let (basic, nonbasic) = (total(inst.plan.basic()), total(inst.plan.nonbasic()));
    let ratio = basic / nonbasic;
    Ok(((5.0..=40.0).contains(&ratio), format!("seed {} basic {basic:.0}, nonbasic {nonbasic:.0}, ratio {ratio:.1}", best.0)))
}

fn projection_suite() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut min_z = f64::INFINITY;
    let mut min_y = f64::INFINITY;
    for (k, inst) in common::instances().iter().enumerate() {
        let mut rng = substream(7, k as u64);
        let h = inst.plan.basic_matrix(&inst.network);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..inst.network.num_classes()).map(|_| rng.random_range(-5.0..5.0)).collect();
            let p = skorokhod(&inst.network, &inst.plan, &x)?;
            let hy = h.dot(&Array1::from(p.y.clone()));
            for i in 0..x.len() {
                worst = worst.max((p.z[i] - x[i] - hy[i]).abs() / (1.0 + x[i].abs()));
            }
            min_z = p.z.iter().copied().fold(min_z, f64::min);
            min_y = p.y.iter().copied().fold(min_y, f64::min);
        }
    }
    Ok((
        worst <= 1e-9 && min_z >= -SKOROKHOD_TOL && min_y >= 0.0,
        format!("10^4 inputs x {} instances, max identity error {worst:.1e}, min z {min_z:.1e}, min y {min_y:.1e}", NAMES.len()),
    ))
}

fn hamiltonian_suite() -> Outcome {
    let mut checked = 0;
    let mut mismatches = 0;
    for (k, inst) in common::instances().iter().enumerate() {
        let nj = inst.network.num_activities();
        if nj > 12 {
            continue;
        }
        let mut rng = substream(8, k as u64);
        for _ in 0..1000 {
            let u: Vec<f64> = (0..nj).map(|_| rng.random_range(-5.0..5.0)).collect();
            let eta = rng.random_range(0.0..2.0);
            let scale: f64 = 100.0;
            let upper: Vec<f64> = (0..nj)
                .map(|j| if inst.plan.is_basic(j) { (scale.sqrt() * inst.plan.rates()[j]).min(eta) } else { 0.0 })
                .collect();
            let brute = (0u32..1 << nj)
                .map(|mask| (0..nj).map(|j| u[j] * if mask >> j & 1 == 1 { upper[j] } else { -eta }).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let ham = hamiltonian_min(&u, &inst.plan, eta, scale);
            if ham.value != brute {
                mismatches += 1;
            }
            checked += 1;
        }
    }
    Ok((checked > 0 && mismatches == 0, format!("{checked} draws, {mismatches} differ from vertex enumeration")))
}

fn mlp_gradient_suite() -> Outcome {
    let mut worst: f64 = 0.0;
    for point in 0..20u64 {
        let mut rng = substream(9, point);
        let net = Mlp::new(4, &[10, 10, 10], 4, &mut rng);
        let x = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-1.5..1.5));
        let w = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-1.0..1.0));
        let (_, cache) = net.forward_cached(x.view());
        let (grads, _) = net.backward(&cache, w.clone(), false);
        let theta = net.to_flat();
        let mut probe = net.clone();
        let eps = 1e-6;
        let fd: Vec<f64> = (0..theta.len())
            .map(|k| {
                let mut at = |delta: f64| {
                    let mut t = theta.clone();
                    t[k] += delta;
                    probe.set_flat(&t);
                    (probe.forward(x.view()) * &w).sum()
                };
                (at(eps) - at(-eps)) / (2.0 * eps)
            })
            .collect();
        worst = worst.max(common::rel_err(&grads.to_flat(), &fd));
    }
    Ok((worst < 1e-5, format!("20 random points, max relative error {worst:.1e}")))
}

fn conservation_suite() -> Outcome {
    let mut epochs = 0;
    for inst in common::instances() {
        let horizon = if inst.network.num_classes() > 50 { 1.0 } else { 10.0 };
        let cfg = SimConfig { horizon, usage_window: horizon, replications: 10, seed: CRN_SEED, audit: true, ..SimConfig::default() };
        for s in run_experiment(&inst.network, &inst.plan, &benchmarks(inst)?, &cfg)? {
            epochs += s.results.iter().map(|r| r.decisions).sum::<u64>();
        }
    }
    Ok((true, format!("audited every event, 10 replications x 5 policies x {} instances, {epochs} decision epochs", NAMES.len())))
}

fn loss_gradient_suite() -> Outcome {
    let (net, plan) = common::pair_network(0.4);
    let reference = ReferenceConfig { drift: vec![0.5], horizon: 0.2, steps: 2, eta: 0.8, scale: 4.0 };
    let ctx = LossContext::new(&net, &plan, &reference, 0.05);
    let process = ReferenceProcess::new(&net, &plan, reference.clone())?;
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let model = ValueGradientModel::new(2, &[6, 5], seed);
        let batch = process.sample_batch(&Array2::from_shape_fn((2, 2), |(p, i)| 0.3 * (p + i) as f64), seed)?;
        let eval = loss_and_gradients(&model, &batch, &ctx)?;
        let eps = 1e-6;
        for value_net in [true, false] {
            let base = if value_net { model.value.to_flat() } else { model.gradient.to_flat() };
            let mut fd = Vec::with_capacity(base.len());
            for k in 0..base.len() {
                let at = |delta: f64| -> Result<f64, Box<dyn Error>> {
                    let mut m = model.clone();
                    let mut t = base.clone();
                    t[k] += delta;
                    if value_net {
                        m.value.set_flat(&t)
                    } else {
                        m.gradient.set_flat(&t)
                    }
                    Ok(empirical_loss(&m, &batch, &ctx)?)
                };
                fd.push((at(eps)? - at(-eps)?) / (2.0 * eps));
            }
            let exact = if value_net { eval.value_grads.to_flat() } else { eval.gradient_grads.to_flat() };
            worst = worst.max(common::rel_err(&exact, &fd));
        }
    }
    Ok((worst < 1e-4, format!("I=2, N=2, B=2, 10 draws, max relative error {worst:.1e}")))
}

fn crn_suite() -> Outcome {
    let mut compared = 0;
    for name in ["x-high", "zigzag-a", "dim24-i"] {
        let inst = common::instance(name);
        let cfg = SimConfig { horizon: 20.0, usage_window: 20.0, replications: 5, seed: CRN_SEED, ..SimConfig::default() };
        let summaries = run_experiment(&inst.network, &inst.plan, &benchmarks(inst)?, &cfg)?;
        for rep in 0..cfg.replications {
            let reference = &summaries[0].results[rep];
            for s in &summaries[1..] {
                let r = &s.results[rep];
                if r.stream_digest != reference.stream_digest || r.arrivals != reference.arrivals {
                    return Ok((false, format!("{name} replication {rep}: {} consumed different draws", s.label)));
                }
                compared += 1;
            }
        }
    }
    Ok((true, format!("{compared} policy pairs consumed bit-identical randomness")))
}

fn dim120_ordering() -> Outcome {
    let inst = common::instance("dim120");
    let cfg = SimConfig { replications: 5, ..inst.sim_config(CRN_SEED) };
    let kinds = [PolicyKind::GreedyBasic, PolicyKind::StaticPriority, PolicyKind::Greedy];
    let summaries = run_experiment(&inst.network, &inst.plan, &inst.policies(&kinds, None, None)?, &cfg)?;
    let means: Vec<f64> = summaries.iter().map(|s| s.xi.mean / inst.defaults.unit).collect();
    Ok((
        means[0] < means[1] && means[1] < means[2],
        format!("greedy-basic {:.2} < static-priority {:.2} < greedy {:.2} (published 71.75 < 92.81 < 203.80)", means[0], means[1], means[2]),
    ))
}

fn dim24_telemetry() -> Outcome {
    let inst = common::instance("dim24-i");
    let dir = cache_dir().join("dim24-i");
    let mut tc = inst.trainer_config(5000, 1);
    tc.checkpoint_dir = Some(dir.clone());
    tc.checkpoint_every = 500;
    tc.telemetry = Some(dir.join("telemetry.jsonl"));
    train_resumable(&inst.network, &inst.plan, &tc)?;
    let log = std::fs::read_to_string(dir.join("telemetry.jsonl"))?;
    let mut ema = [None, None];
    for line in log.lines() {
        let rec: TelemetryRecord = serde_json::from_str(line)?;
        match rec.iteration + 1 {
            500 => ema[0] = Some(rec.ema_loss),
            5000 => ema[1] = Some(rec.ema_loss),
            _ => {}
        }
    }
    let [Some(early), Some(late)] = ema else { return Ok((false, "telemetry is missing iteration 500 or 5000".into())) };
    Ok((late < early, format!("EMA loss {early:.4e} at 500, {late:.4e} at 5000")))
}

fn main() {
    let only = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut h = Harness { failures: 0, only };
    h.check("1", "static planning LP", spp_reproduction);
    h.check("7a", "Skorokhod identities", projection_suite);
    h.check("7b", "Hamiltonian minimum", hamiltonian_suite);
    h.check("7c", "MLP gradients", mlp_gradient_suite);
    h.check("7d", "job conservation", conservation_suite);
    h.check("7e", "loss gradients", loss_gradient_suite);
    h.check("7f", "common random numbers", crn_suite);

    let x_high = common::instance("x-high");
    let cfg = SimConfig { replications: 100, ..x_high.sim_config(CRN_SEED) };
    let unit = x_high.defaults.unit;
    if !h.wants(&["2", "3", "5", "6"]) {
        return finish(&h);
    }
    let bench = benchmarks(x_high).and_then(|p| Ok(run_experiment(&x_high.network, &x_high.plan, &p, &cfg)?));
    match &bench {
        Ok(summaries) => {
            h.check("2", "X-high benchmark rows", || x_high_rows(summaries, unit));
            h.check("3", "X-high activity usage", || x_high_usage(x_high, summaries));
        }
        Err(e) => {
            h.check("2", "X-high benchmark rows", || Err(e.to_string().into()));
            h.check("3", "X-high activity usage", || Err(e.to_string().into()));
        }
    }
    h.check("4", "Zigzag benchmark rows", zigzag_rows);
    h.check("8", "dim120 benchmark ordering", dim120_ordering);
    h.check("9", "dim24-i training telemetry", dim24_telemetry);

    if !h.wants(&["5", "6"]) {
        return finish(&h);
    }
    let trained = trained_x_high(x_high, &cfg);
    match &bench {
        Ok(summaries) => h.check("5", "trained X-high policy", || trained_policy(&trained, summaries, unit)),
        Err(e) => h.check("5", "trained X-high policy", || Err(e.to_string().into())),
    }
    h.check("6", "nonbasic usage signature", || usage_signature(x_high, &trained));
    finish(&h);
}

fn finish(h: &Harness) {
    println!("{} failed", h.failures);
    if h.failures > 0 {
        std::process::exit(1);
    }
}
