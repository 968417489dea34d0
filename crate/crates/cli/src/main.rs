use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use bimatch::bsde::{train_resumable, Checkpoint};
use bimatch::experiment::{compare, end_to_end, EndToEndOptions, Instance, Report};
use bimatch::plan::validate_plan;
use bimatch::policy::{build_priority_sets, PolicyKind};
use bimatch::sim::{grid_search_review_period, SimConfig};

/// Worker threads for simulation replications and path sampling.
const WORKERS_ENV: &str = "BIMATCH_WORKERS";

#[derive(Parser)]
#[command(name = "bimatch", version, about = "Dynamic matching experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Replications (defaults to the instance setting).
    #[arg(long, global = true)]
    reps: Option<usize>,
    #[arg(long, global = true, default_value_t = 1000.0)]
    horizon: f64,
    /// Output directory for reports, checkpoints and telemetry.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the static planning LP.
    Spp { instance: String },
    /// Train the value and gradient networks.
    Train {
        instance: String,
        #[arg(long, default_value_t = 80_000)]
        iterations: usize,
    },
    /// Simulate policies and print means, intervals and usage counts.
    Simulate(PolicyArgs),
    /// Compare policies in a table that flags the best one.
    Compare(PolicyArgs),
    /// Print the static-priority sets.
    PrioritySets { instance: String },
    /// Grid search for the static-priority review period.
    GridReview {
        instance: String,
        #[arg(long, value_delimiter = ',', default_value = "0.0001,0.001,0.01")]
        grid: Vec<f64>,
    },
    /// Catalog, LP, training and comparison in one run.
    EndToEnd {
        instance: String,
        #[arg(long, default_value_t = 80_000)]
        iterations: usize,
        #[arg(long)]
        skip_train: bool,
    },
}

#[derive(Args)]
struct PolicyArgs {
    instance: String,
    /// Comma-separated policies; defaults to the five benchmarks.
    #[arg(long, value_delimiter = ',')]
    policies: Vec<String>,
    #[arg(long)]
    review_period: Option<f64>,
    /// Checkpoint for the proposed policies.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(n) = std::env::var(WORKERS_ENV) {
        let n: usize = n.parse().with_context(|| format!("{WORKERS_ENV} must be an integer"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cli = Cli::parse();
    let g = &cli.global;
    match &cli.command {
        Command::Spp { instance } => spp(instance),
        Command::Train { instance, iterations } => train(g, instance, *iterations),
        Command::Simulate(args) => {
            let report = run_policies(g, args)?;
            print!("{}", report.to_text(true));
            emit(g, &report)
        }
        Command::Compare(args) => {
            let report = run_policies(g, args)?;
            print!("{}", report.to_text(false));
            emit(g, &report)
        }
        Command::PrioritySets { instance } => {
            let inst = Instance::load(instance)?;
            println!("{}", build_priority_sets(&inst.network, &inst.plan)?);
            Ok(())
        }
        Command::GridReview { instance, grid } => {
            let inst = Instance::load(instance)?;
            let search = grid_search_review_period(&inst.network, &inst.plan, &sim_config(g, &inst), grid)?;
            for (l, e) in &search.evaluated {
                let e = e.scaled(inst.defaults.unit);
                println!("l = {l:<10} {:>10.3} +/- {:.3}", e.mean, e.half_width);
            }
            println!("best review period: {}", search.best);
            Ok(())
        }
        Command::EndToEnd { instance, iterations, skip_train } => {
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(instance));
            let inst = Instance::load(instance)?;
            let options = EndToEndOptions {
                seed: g.seed,
                iterations: *iterations,
                sim: sim_config(g, &inst),
                skip_train: *skip_train,
                out,
            };
            let artifacts = end_to_end(instance, &options)?;
            print!("{}", artifacts.report.to_text(false));
            for f in &artifacts.files {
                info!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

fn sim_config(g: &Global, inst: &Instance) -> SimConfig {
    let mut cfg = inst.sim_config(g.seed);
    cfg.horizon = g.horizon;
    cfg.usage_window = g.horizon.min(cfg.usage_window);
    if let Some(r) = g.reps {
        cfg.replications = r;
    }
    cfg
}

fn spp(instance: &str) -> Result<()> {
    let inst = Instance::load(instance)?;
    let diag = validate_plan(&inst.network, &inst.plan)?;
    println!("instance    {}", inst.name);
    println!("objective   {}", inst.lp.objective);
    println!("degenerate  {}", inst.lp.degenerate);
    println!("residual    {:e}", diag.residual);
    for (j, x) in inst.plan.rates().iter().enumerate() {
        let a = inst.network.activity(j);
        let kind = if inst.plan.is_basic(j) { "basic" } else { "nonbasic" };
        println!("x[{:>3}] ({:>3},{:>3}) = {:<10} {kind}", j + 1, a.left + 1, a.right + 1, x);
    }
    Ok(())
}

fn train(g: &Global, instance: &str, iterations: usize) -> Result<()> {
    let inst = Instance::load(instance)?;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(instance));
    let mut cfg = inst.trainer_config(iterations, g.seed);
    cfg.checkpoint_dir = Some(out.join("checkpoints"));
    cfg.telemetry = Some(out.join("telemetry.jsonl"));
    let model = train_resumable(&inst.network, &inst.plan, &cfg)?;
    let tail = &model.loss_history[model.loss_history.len().saturating_sub(100)..];
    if !tail.is_empty() {
        println!("final mean loss over {} iterations: {:.4e}", tail.len(), tail.iter().sum::<f64>() / tail.len() as f64);
    }
    println!("checkpoints in {}", out.join("checkpoints").display());
    Ok(())
}

fn run_policies(g: &Global, args: &PolicyArgs) -> Result<Report> {
    let inst = Instance::load(&args.instance)?;
    let kinds = if args.policies.is_empty() {
        PolicyKind::BENCHMARKS.to_vec()
    } else {
        args.policies
            .iter()
            .map(|s| PolicyKind::parse(s).with_context(|| format!("unknown policy `{s}`")))
            .collect::<Result<Vec<_>>>()?
    };
    let model = match &args.checkpoint {
        Some(path) => Some(Arc::new(load_model(path, &inst)?)),
        None => None,
    };
    let policies = inst.policies(&kinds, model.as_ref(), args.review_period)?;
    Ok(compare(&inst, &policies, &sim_config(g, &inst))?)
}

fn load_model(path: &Path, inst: &Instance) -> Result<bimatch::bsde::ValueGradientModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    if ck.num_classes != inst.network.num_classes() {
        bail!("checkpoint has {} classes, instance has {}", ck.num_classes, inst.network.num_classes());
    }
    Ok(ck.model_any_width(inst.network.num_classes())?)
}

fn emit(g: &Global, report: &Report) -> Result<()> {
    if let Some(dir) = &g.out {
        for f in report.write(dir)? {
            info!("wrote {}", f.display());
        }
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    }
    Ok(())
}
