#![allow(dead_code)]

use std::sync::OnceLock;

use bimatch::catalog::NAMES;
use bimatch::experiment::Instance;
use bimatch::network::{Activity, MatchingNetwork};
use bimatch::plan::StaticPlan;

/// All catalog instances, loaded once per test binary.
pub fn instances() -> &'static [Instance] {
    static CELL: OnceLock<Vec<Instance>> = OnceLock::new();
    CELL.get_or_init(|| NAMES.iter().map(|n| Instance::load(n).expect("catalog instance")).collect())
}

pub fn instance(name: &str) -> &'static Instance {
    instances().iter().find(|i| i.name == name).expect("known instance")
}

/// One left and one right class joined by a single activity.
pub fn pair_network(gamma: f64) -> (MatchingNetwork, StaticPlan) {
    let net = MatchingNetwork::new(
        1,
        1,
        vec![Activity { left: 0, right: 1 }],
        vec![1.0, 1.0],
        vec![3.0],
        vec![1.0, 2.0],
        vec![0.5, 0.0],
        vec![gamma, gamma],
    )
    .unwrap();
    let plan = StaticPlan::from_rates(&net, vec![1.0]).unwrap();
    (net, plan)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
