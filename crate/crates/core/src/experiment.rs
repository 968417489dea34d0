//! Experiment orchestration: instance loading, policy comparison tables and
//! the end-to-end pipeline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsde::{train_resumable, TrainError, TrainerConfig, ValueGradientModel};
use crate::catalog::{self, CatalogError, InstanceDefaults};
use crate::network::{MatchingNetwork, ModelError, NetworkConfig};
use crate::plan::StaticPlan;
use crate::policy::{PolicyError, PolicyKind, PolicySpec, ProposedParams};
use crate::sim::{run_experiment, PolicySummary, SimConfig, SimError};
use crate::spp::{resolve_plan, solve_spp, LpSolution, SppError};

/// Tolerance for agreement between a shipped `x*` and the LP optimum.
pub const PLAN_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("no policies to compare")]
    EmptyComparison,
    #[error("policy `{0}` needs a trained model")]
    MissingModel(&'static str),
    #[error("shipped x* differs from the LP optimum by {gap:e} on activity {activity}")]
    PlanMismatch { activity: usize, gap: f64 },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spp(#[from] SppError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A network with its solved plan and experiment defaults.
#[derive(Debug, Clone)]
pub struct Instance {
    pub name: String,
    pub network: MatchingNetwork,
    pub plan: StaticPlan,
    pub lp: LpSolution,
    pub defaults: InstanceDefaults,
}

impl Instance {
    /// Loads a catalog entry, or a network config file when `name` is a path
    /// to one. The LP is solved in both cases and a shipped `x*` must agree
    /// with it.
    pub fn load(name: &str) -> Result<Self, ExperimentError> {
        let path = Path::new(name);
        let (cfg, label) = if path.is_file() {
            let cfg: NetworkConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
            let label = cfg.name.clone().unwrap_or_else(|| name.to_string());
            (cfg, label)
        } else {
            (catalog::config(name)?, name.to_string())
        };
        let defaults = catalog::defaults(&label).unwrap_or_else(|_| InstanceDefaults::generic());
        Self::from_config(&label, &cfg, defaults)
    }

    pub fn from_config(name: &str, cfg: &NetworkConfig, defaults: InstanceDefaults) -> Result<Self, ExperimentError> {
        let network = cfg.build()?;
        let lp = solve_spp(&network)?;
        let plan = resolve_plan(&network, &lp, cfg.x_star.as_deref())?;
        if let Some(x) = &cfg.x_star {
            let (activity, gap) = x
                .iter()
                .zip(plan.rates())
                .map(|(a, b)| (a - b).abs())
                .enumerate()
                .fold((0, 0.0), |best, (j, g)| if g > best.1 { (j, g) } else { best });
            if gap > PLAN_TOL {
                return Err(ExperimentError::PlanMismatch { activity, gap });
            }
        }
        Ok(Self { name: name.to_string(), network, plan, lp, defaults })
    }

    pub fn proposed_params(&self) -> ProposedParams {
        ProposedParams { eta: self.defaults.eta, epsilon: self.defaults.epsilon }
    }

    /// Trainer settings from the instance defaults.
    pub fn trainer_config(&self, iterations: usize, seed: u64) -> TrainerConfig {
        TrainerConfig::for_instance(&self.defaults, &self.plan, self.network.num_activities(), iterations, seed)
    }

    /// Simulation settings with the instance's default replication count.
    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig { replications: self.defaults.replications, seed, ..SimConfig::default() }
    }

    /// Builds runnable policies. Static priority uses `review_period` or the
    /// instance default; the proposed policies need `model`.
    pub fn policies(
        &self,
        kinds: &[PolicyKind],
        model: Option<&Arc<ValueGradientModel>>,
        review_period: Option<f64>,
    ) -> Result<Vec<PolicySpec>, ExperimentError> {
        kinds
            .iter()
            .map(|&k| {
                let need_model = || model.cloned().ok_or(ExperimentError::MissingModel(k.label()));
                Ok(match k {
                    PolicyKind::Greedy => PolicySpec::Greedy,
                    PolicyKind::GreedyBasic => PolicySpec::GreedyBasic,
                    PolicyKind::Fcfs => PolicySpec::Fcfs,
                    PolicyKind::Lqfs => PolicySpec::Lqfs,
                    PolicyKind::StaticPriority => PolicySpec::static_priority(
                        &self.network,
                        &self.plan,
                        review_period.unwrap_or(self.defaults.review_period),
                    )?,
                    PolicyKind::Proposed => PolicySpec::Proposed { model: need_model()?, params: self.proposed_params() },
                    PolicyKind::ProposedUpdating => {
                        PolicySpec::ProposedUpdating { model: need_model()?, params: self.proposed_params() }
                    }
                })
            })
            .collect()
    }
}

impl InstanceDefaults {
    /// Defaults for networks outside the catalog.
    pub fn generic() -> Self {
        Self {
            eta: 0.5,
            epsilon: 0.03,
            reference_basic: 0.1,
            reference_nonbasic: -0.01,
            review_period: 0.001,
            replications: 100,
            unit: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub policy: String,
    pub mean: f64,
    pub half_width: f64,
    pub std_dev: f64,
    pub best: bool,
    pub usage: Vec<f64>,
    /// Per-replication centered values, in report units.
    pub samples: Vec<f64>,
}

/// A comparison table in the instance's reporting unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub instance: String,
    pub unit: f64,
    pub replications: usize,
    pub seed: u64,
    pub horizon: f64,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn new(instance: &str, unit: f64, config: &SimConfig, summaries: &[PolicySummary]) -> Self {
        let best = summaries
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.xi.mean.total_cmp(&b.1.xi.mean))
            .map(|(k, _)| k);
        let rows = summaries
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let e = s.xi.scaled(unit);
                ReportRow {
                    policy: s.label.clone(),
                    mean: e.mean,
                    half_width: e.half_width,
                    std_dev: e.std_dev,
                    best: Some(k) == best,
                    usage: s.usage.clone(),
                    samples: s.results.iter().map(|r| r.xi / unit).collect(),
                }
            })
            .collect();
        Self {
            instance: instance.to_string(),
            unit,
            replications: config.replications,
            seed: config.seed,
            horizon: config.horizon,
            rows,
        }
    }

    pub fn unit_name(&self) -> String {
        match self.unit {
            100.0 => "hundreds".into(),
            1000.0 => "thousands".into(),
            u => format!("units of {u}"),
        }
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.policy == label)
    }

    /// Aligned table; `usage` adds the per-activity match counts.
    pub fn to_text(&self, usage: bool) -> String {
        let width = self.rows.iter().map(|r| r.policy.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{}: centered discounted value (in {}), {} replications, seed {}, horizon {}",
            self.instance,
            self.unit_name(),
            self.replications,
            self.seed,
            self.horizon
        );
        let _ = write!(out, "{:<width$}  {:>10}  {:>8}", "policy", "mean", "95% hw");
        if usage {
            out.push_str("  usage");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<width$}  {:>10.2}  {:>8.2}", r.policy, r.mean, r.half_width);
            if usage {
                let counts: Vec<String> = r.usage.iter().map(|u| format!("{u:.0}")).collect();
                let _ = write!(out, "  {}", counts.join(" "));
            }
            if r.best {
                out.push_str("  *best");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let j = self.rows.first().map_or(0, |r| r.usage.len());
        let mut out = String::from("policy,mean,half_width,std_dev,best");
        for k in 1..=j {
            let _ = write!(out, ",usage_{k}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{},{}", r.policy, r.mean, r.half_width, r.std_dev, r.best);
            for u in &r.usage {
                let _ = write!(out, ",{u}");
            }
            out.push('\n');
        }
        out
    }

    /// One line per policy and replication, for histograms.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("policy,replication,xi\n");
        for r in &self.rows {
            for (k, x) in r.samples.iter().enumerate() {
                let _ = writeln!(out, "{},{k},{x}", r.policy);
            }
        }
        out
    }

    /// Writes `report.txt`, `report.csv` and `samples.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
        fs::create_dir_all(dir)?;
        let files = [
            ("report.txt", self.to_text(true)),
            ("report.csv", self.to_csv()),
            ("samples.csv", self.samples_csv()),
        ];
        files
            .into_iter()
            .map(|(name, text)| {
                let path = dir.join(name);
                fs::write(&path, text)?;
                Ok(path)
            })
            .collect()
    }
}

/// Runs the policies on common streams and renders the table.
pub fn compare(instance: &Instance, policies: &[PolicySpec], config: &SimConfig) -> Result<Report, ExperimentError> {
    if policies.is_empty() {
        return Err(ExperimentError::EmptyComparison);
    }
    let summaries = run_experiment(&instance.network, &instance.plan, policies, config)?;
    Ok(Report::new(&instance.name, instance.defaults.unit, config, &summaries))
}

#[derive(Debug, Clone)]
pub struct EndToEndOptions {
    pub seed: u64,
    pub iterations: usize,
    pub sim: SimConfig,
    pub skip_train: bool,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub report: Report,
    pub checkpoint_dir: Option<PathBuf>,
    pub telemetry: Option<PathBuf>,
    pub files: Vec<PathBuf>,
}

/// Catalog, LP, training with the instance defaults and a comparison of the
/// benchmarks and both proposed policies. Training resumes from checkpoints
/// already in `out`.
pub fn end_to_end(name: &str, options: &EndToEndOptions) -> Result<Artifacts, ExperimentError> {
    let instance = Instance::load(name)?;
    fs::create_dir_all(&options.out)?;
    let mut kinds = PolicyKind::BENCHMARKS.to_vec();
    let (model, checkpoint_dir, telemetry) = if options.skip_train {
        (None, None, None)
    } else {
        let mut cfg = instance.trainer_config(options.iterations, options.seed);
        let dir = options.out.join("checkpoints");
        let log = options.out.join("telemetry.jsonl");
        cfg.checkpoint_dir = Some(dir.clone());
        cfg.telemetry = Some(log.clone());
        let model = train_resumable(&instance.network, &instance.plan, &cfg)?;
        kinds.extend([PolicyKind::Proposed, PolicyKind::ProposedUpdating]);
        (Some(Arc::new(model)), Some(dir), Some(log))
    };
    let policies = instance.policies(&kinds, model.as_ref(), None)?;
    let report = compare(&instance, &policies, &options.sim)?;
    let files = report.write(&options.out)?;
    Ok(Artifacts { report, checkpoint_dir, telemetry, files })
}
