//! Deep BSDE training of the value and gradient networks for the Brownian
//! drift-control problem.
//!
//! Paths of the reference process are generated under a constant drift; the
//! networks are fitted so that the discretized pathwise identity
//!
//! ```text
//! e^{-rT} V(Z_T) - V(Z_0) + sum_k e^{-rhk} [ v_B.dY_k - G(Z_k).d_k + F(Z_k, G(Z_k)) h ] = 0
//! ```
//!
//! holds in mean square.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::InstanceDefaults;
use crate::network::MatchingNetwork;
use crate::neural::{Adam, AdamConfig, AdamState, LrSchedule, Mlp, MlpState, NeuralError};
use crate::plan::StaticPlan;
use crate::rbm::{PathBatch, RbmError, ReferenceConfig, ReferenceProcess};
use crate::rng;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iteration}; last good checkpoint: {checkpoint:?}")]
    NonFinite { iteration: usize, checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Paths(#[from] RbmError),
    #[error(transparent)]
    Network(#[from] NeuralError),
    #[error("invalid trainer configuration: {0}")]
    Config(String),
    #[error("checkpoint is for {found} classes, network has {expected}")]
    WrongInstance { expected: usize, found: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
}

/// Minimizer of `u . theta` over the admissible drift box and its value.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    pub theta: Vec<f64>,
    pub value: f64,
}

/// Componentwise minimizer: `-eta` where `u_j >= 0`, otherwise the upper
/// bound `min(sqrt(n) x*_j, eta)`, which is 0 on nonbasic activities.
pub fn hamiltonian_min(u: &[f64], plan: &StaticPlan, eta: f64, scale: f64) -> Hamiltonian {
    let root_n = scale.sqrt();
    let theta: Vec<f64> = u
        .iter()
        .zip(plan.rates())
        .map(|(&uj, &xj)| if uj >= 0.0 { -eta } else { (root_n * xj).min(eta) })
        .collect();
    debug_assert!(theta.iter().zip(plan.rates()).all(|(&t, &x)| t <= root_n * x + 1e-12 && t.abs() <= eta));
    let value = u.iter().zip(&theta).map(|(a, b)| a * b).sum();
    Hamiltonian { theta, value }
}

/// Quantities shared by every evaluation of `F` and of the loss.
#[derive(Debug, Clone)]
pub struct LossContext<'a> {
    pub network: &'a MatchingNetwork,
    pub plan: &'a StaticPlan,
    /// `R theta~`
    pub reference_drift: Vec<f64>,
    /// `c = h + gamma a`
    pub cost: Vec<f64>,
    pub eta: f64,
    pub scale: f64,
    pub discount: f64,
    pub step: f64,
}

impl<'a> LossContext<'a> {
    pub fn new(
        network: &'a MatchingNetwork,
        plan: &'a StaticPlan,
        reference: &ReferenceConfig,
        discount: f64,
    ) -> Self {
        Self {
            network,
            plan,
            reference_drift: network.apply_matching(&reference.drift),
            cost: network.effective_cost().0,
            eta: reference.eta,
            scale: reference.scale,
            discount,
            step: reference.step(),
        }
    }

    /// `F(z, x) = -(R theta~).x + c.z + min_theta (R'x + v).theta`, with the
    /// minimizing drift.
    pub fn f_value(&self, z: &[f64], x: &[f64]) -> (f64, Hamiltonian) {
        let mut u = self.network.apply_matching_transpose(x);
        for (uj, vj) in u.iter_mut().zip(self.network.values()) {
            *uj += vj;
        }
        let ham = hamiltonian_min(&u, self.plan, self.eta, self.scale);
        let lin: f64 = self.reference_drift.iter().zip(x).map(|(a, b)| a * b).sum();
        let hold: f64 = self.cost.iter().zip(z).map(|(a, b)| a * b).sum();
        (-lin + hold + ham.value, ham)
    }

    /// `dF/dx = -R theta~ + R theta*`.
    pub fn f_gradient(&self, ham: &Hamiltonian) -> Vec<f64> {
        let r_star = self.network.apply_matching(&ham.theta);
        r_star.iter().zip(&self.reference_drift).map(|(a, b)| a - b).collect()
    }
}

/// `F` as a free function of its arguments.
#[allow(clippy::too_many_arguments)]
pub fn f_function(
    network: &MatchingNetwork,
    plan: &StaticPlan,
    reference_drift: &[f64],
    cost: &[f64],
    eta: f64,
    scale: f64,
    z: &[f64],
    x: &[f64],
) -> f64 {
    let ctx = LossContext {
        network,
        plan,
        reference_drift: network.apply_matching(reference_drift),
        cost: cost.to_vec(),
        eta,
        scale,
        discount: 0.0,
        step: 0.0,
    };
    ctx.f_value(z, x).0
}

/// The trained pair `V(.; w1)`, `G(.; w2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGradientModel {
    pub value: Mlp,
    pub gradient: Mlp,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
}

impl ValueGradientModel {
    pub fn new(num_classes: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rv = rng::substream(seed, 0);
        let mut rg = rng::substream(seed, 1);
        Self {
            value: Mlp::new(num_classes, hidden, 1, &mut rv),
            gradient: Mlp::new(num_classes, hidden, num_classes, &mut rg),
            iteration: 0,
            loss_history: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.gradient.input_width()
    }
}

/// `U_j(z) = G_l(j)(z) + G_r(j)(z) + v_j`.
pub fn shadow_values(model: &ValueGradientModel, z: &[f64], network: &MatchingNetwork) -> Vec<f64> {
    let g = model.gradient.forward_one(z);
    shadow_from_gradient(&g, network)
}

pub fn shadow_from_gradient(g: &[f64], network: &MatchingNetwork) -> Vec<f64> {
    network
        .activities()
        .iter()
        .zip(network.values())
        .map(|(a, v)| g[a.left] + g[a.right] + v)
        .collect()
}

/// Loss value and parameter gradients for both networks.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub loss: f64,
    pub residuals: Vec<f64>,
    pub value_grads: crate::neural::Gradients,
    pub gradient_grads: crate::neural::Gradients,
}

fn non_finite(iteration: usize) -> TrainError {
    TrainError::NonFinite { iteration, checkpoint: None }
}

/// Per-path residuals of the discretized identity, and the `F` minimizers
/// needed for backpropagation.
fn residuals(
    ctx: &LossContext,
    batch: &PathBatch,
    v0: ArrayView2<f64>,
    vt: ArrayView2<f64>,
    g: ArrayView2<f64>,
    thetas: Option<&mut Vec<Hamiltonian>>,
) -> Vec<f64> {
    let (b, n1, _) = batch.states.dim();
    let n = n1 - 1;
    let h = ctx.step;
    let horizon = h * n as f64;
    let vb = ctx.plan.basic_values(ctx.network);
    let mut keep = thetas;
    let mut res = Vec::with_capacity(b);
    for p in 0..b {
        let mut acc = (-ctx.discount * horizon).exp() * vt[[p, 0]] - v0[[p, 0]];
        for k in 0..n {
            let w = (-ctx.discount * h * k as f64).exp();
            let z = batch.states.slice(s![p, k, ..]);
            let z = z.as_slice().expect("contiguous state row");
            let gk = g.row(p * n + k);
            let gk = gk.as_slice().expect("contiguous gradient row");
            let push: f64 = batch.pushes.slice(s![p, k, ..]).iter().zip(&vb).map(|(a, b)| a * b).sum();
            let noise: f64 = batch.increments.slice(s![p, k, ..]).iter().zip(gk).map(|(a, b)| a * b).sum();
            let (f, ham) = ctx.f_value(z, gk);
            acc += w * (push - noise + f * h);
            if let Some(t) = keep.as_deref_mut() {
                t.push(ham);
            }
        }
        res.push(acc);
    }
    res
}

fn stacked_inputs(batch: &PathBatch) -> (Array2<f64>, Array2<f64>) {
    let (b, n1, ni) = batch.states.dim();
    let n = n1 - 1;
    let ends = concatenate![
        Axis(0),
        batch.states.slice(s![.., 0, ..]),
        batch.states.slice(s![.., n, ..])
    ];
    let inner = batch
        .states
        .slice(s![.., 0..n, ..])
        .to_owned()
        .into_shape_with_order((b * n, ni))
        .expect("contiguous states");
    (ends, inner)
}

/// Mean squared residual over the batch.
pub fn empirical_loss(model: &ValueGradientModel, batch: &PathBatch, ctx: &LossContext) -> Result<f64, TrainError> {
    let b = batch.len();
    let (ends, inner) = stacked_inputs(batch);
    let v = model.value.forward(ends.view());
    let g = model.gradient.forward(inner.view());
    let res = residuals(ctx, batch, v.slice(s![0..b, ..]), v.slice(s![b.., ..]), g.view(), None);
    let loss = res.iter().map(|r| r * r).sum::<f64>() / b as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(non_finite(model.iteration))
    }
}

/// Loss together with its exact gradient with respect to both networks.
pub fn loss_and_gradients(
    model: &ValueGradientModel,
    batch: &PathBatch,
    ctx: &LossContext,
) -> Result<LossEvaluation, TrainError> {
    let (b, n1, ni) = batch.states.dim();
    let n = n1 - 1;
    let (ends, inner) = stacked_inputs(batch);
    let (v, v_cache) = model.value.forward_cached(ends.view());
    let (g, g_cache) = model.gradient.forward_cached(inner.view());
    let mut hams = Vec::with_capacity(b * n);
    let res = residuals(ctx, batch, v.slice(s![0..b, ..]), v.slice(s![b.., ..]), g.view(), Some(&mut hams));
    let loss = res.iter().map(|r| r * r).sum::<f64>() / b as f64;
    if !loss.is_finite() {
        return Err(non_finite(model.iteration));
    }
    let h = ctx.step;
    let terminal = (-ctx.discount * h * n as f64).exp();
    let mut dv = Array2::zeros((2 * b, 1));
    let mut dg = Array2::zeros((b * n, ni));
    for p in 0..b {
        let a = 2.0 * res[p] / b as f64;
        dv[[p, 0]] = -a;
        dv[[b + p, 0]] = a * terminal;
        for k in 0..n {
            let w = a * (-ctx.discount * h * k as f64).exp();
            let df = ctx.f_gradient(&hams[p * n + k]);
            let mut row = dg.row_mut(p * n + k);
            for i in 0..ni {
                row[i] = w * (-batch.increments[[p, k, i]] + h * df[i]);
            }
        }
    }
    let (value_grads, _) = model.value.backward(&v_cache, dv, false);
    let (gradient_grads, _) = model.gradient.backward(&g_cache, dg, false);
    Ok(LossEvaluation { loss, residuals: res, value_grads, gradient_grads })
}

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub reference: ReferenceConfig,
    pub batch: usize,
    pub iterations: usize,
    pub schedule: LrSchedule,
    pub discount: f64,
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub telemetry: Option<PathBuf>,
    pub ema_decay: f64,
    pub seed: u64,
}

impl TrainerConfig {
    /// Defaults for an instance: B=256, T=0.1, N=64, three hidden layers of
    /// 100 units, the staircase schedule truncated to `iterations`, n=100 and
    /// r=0.01.
    pub fn for_instance(
        defaults: &InstanceDefaults,
        plan: &StaticPlan,
        num_activities: usize,
        iterations: usize,
        seed: u64,
    ) -> Self {
        let drift = ReferenceConfig::split_drift(plan, num_activities, defaults.reference_basic, defaults.reference_nonbasic);
        let mut schedule = LrSchedule::staircase();
        schedule.stages.retain(|st| st.0 < iterations);
        if let Some(last) = schedule.stages.last_mut() {
            last.1 = iterations;
        }
        Self {
            reference: ReferenceConfig { drift, horizon: 0.1, steps: 64, eta: defaults.eta, scale: 100.0 },
            batch: 256,
            iterations,
            schedule,
            discount: 0.01,
            hidden: vec![100, 100, 100],
            adam: AdamConfig::default(),
            checkpoint_every: 5000,
            checkpoint_dir: None,
            telemetry: None,
            ema_decay: 0.99,
            seed,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.batch == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(TrainError::Config("ema decay must lie in [0, 1)".into()));
        }
        if self.iterations > 0 {
            self.schedule.validate(self.iterations)?;
        }
        Ok(())
    }
}

/// One line of training telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub ema_loss: f64,
}

/// Everything needed to resume training or to deploy the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: usize,
    pub num_classes: usize,
    pub value: MlpState,
    pub gradient: MlpState,
    pub value_optimizer: Option<AdamState>,
    pub gradient_optimizer: Option<AdamState>,
    pub carried_states: Vec<Vec<f64>>,
    pub ema_loss: Option<f64>,
    pub loss_history: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &ValueGradientModel) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            iteration: model.iteration,
            num_classes: model.num_classes(),
            value: model.value.state(),
            gradient: model.gradient.state(),
            value_optimizer: None,
            gradient_optimizer: None,
            carried_states: Vec::new(),
            ema_loss: None,
            loss_history: model.loss_history.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        drop(w);
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Version(ck.version).into());
        }
        Ok(ck)
    }

    /// Restores the model, checking it against the network's class count and
    /// the expected hidden widths.
    pub fn model(&self, num_classes: usize, hidden: &[usize]) -> Result<ValueGradientModel, TrainError> {
        if self.num_classes != num_classes {
            return Err(TrainError::WrongInstance { expected: num_classes, found: self.num_classes });
        }
        let shapes = |out: usize| {
            let mut w = vec![num_classes];
            w.extend_from_slice(hidden);
            w.push(out);
            w.windows(2).map(|p| (p[0], p[1])).collect::<Vec<_>>()
        };
        Ok(ValueGradientModel {
            value: Mlp::from_state(&self.value, &shapes(1))?,
            gradient: Mlp::from_state(&self.gradient, &shapes(num_classes))?,
            iteration: self.iteration,
            loss_history: self.loss_history.clone(),
        })
    }

    /// Restores the model with whatever hidden widths the file records.
    pub fn model_any_width(&self, num_classes: usize) -> Result<ValueGradientModel, TrainError> {
        let hidden: Vec<usize> = self.gradient.layers.iter().skip(1).map(|l| l.fan_in).collect();
        self.model(num_classes, &hidden)
    }
}

/// Runs the training loop, writing telemetry and checkpoints as configured.
pub fn train(
    network: &MatchingNetwork,
    plan: &StaticPlan,
    config: &TrainerConfig,
) -> Result<ValueGradientModel, TrainError> {
    train_observed(network, plan, config, None, |_| {})
}

/// Like [`train`], optionally resuming from `resume`, and reporting every
/// telemetry record to `observe`.
pub fn train_observed(
    network: &MatchingNetwork,
    plan: &StaticPlan,
    config: &TrainerConfig,
    resume: Option<&Checkpoint>,
    mut observe: impl FnMut(&TelemetryRecord),
) -> Result<ValueGradientModel, TrainError> {
    config.validate()?;
    let ni = network.num_classes();
    let process = ReferenceProcess::new(network, plan, config.reference.clone())?;
    let ctx = LossContext::new(network, plan, &config.reference, config.discount);

    let (mut model, mut opt_v, mut opt_g, mut states, mut ema) = match resume {
        Some(ck) => {
            let model = ck.model(ni, &config.hidden)?;
            let opt_v = match &ck.value_optimizer {
                Some(s) => Adam::from_state(s, &model.value)?,
                None => Adam::new(&model.value, config.adam),
            };
            let opt_g = match &ck.gradient_optimizer {
                Some(s) => Adam::from_state(s, &model.gradient)?,
                None => Adam::new(&model.gradient, config.adam),
            };
            let states = if ck.carried_states.len() == config.batch {
                let flat: Vec<f64> = ck.carried_states.iter().flatten().copied().collect();
                Array2::from_shape_vec((config.batch, ni), flat)
                    .map_err(|e| TrainError::Config(e.to_string()))?
            } else {
                Array2::zeros((config.batch, ni))
            };
            (model, opt_v, opt_g, states, ck.ema_loss)
        }
        None => {
            let model = ValueGradientModel::new(ni, &config.hidden, config.seed);
            let opt_v = Adam::new(&model.value, config.adam);
            let opt_g = Adam::new(&model.gradient, config.adam);
            (model, opt_v, opt_g, Array2::zeros((config.batch, ni)), None)
        }
    };

    let mut telemetry = match &config.telemetry {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            // a resumed run continues the existing log
            let file = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(resume.is_some())
                .truncate(resume.is_none())
                .open(path)?;
            Some(BufWriter::new(file))
        }
        None => None,
    };
    let mut last_checkpoint: Option<PathBuf> = None;

    for it in model.iteration..config.iterations {
        let batch = process.sample_batch(&states, rng::mix(config.seed, it as u64))?;
        let eval = loss_and_gradients(&model, &batch, &ctx).map_err(|e| match e {
            TrainError::NonFinite { .. } => {
                TrainError::NonFinite { iteration: it, checkpoint: last_checkpoint.clone() }
            }
            other => other,
        })?;
        let lr = config.schedule.rate(it);
        opt_v.update(&mut model.value, &eval.value_grads, lr);
        opt_g.update(&mut model.gradient, &eval.gradient_grads, lr);
        if !(model.value.is_finite() && model.gradient.is_finite()) {
            return Err(TrainError::NonFinite { iteration: it, checkpoint: last_checkpoint });
        }
        states = batch.terminal_states();
        let smoothed = match ema {
            None => eval.loss,
            Some(e) => config.ema_decay * e + (1.0 - config.ema_decay) * eval.loss,
        };
        ema = Some(smoothed);
        model.iteration = it + 1;
        model.loss_history.push(eval.loss);
        let record = TelemetryRecord { iteration: it, lr, loss: eval.loss, ema_loss: smoothed };
        if let Some(w) = telemetry.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w)?;
        }
        observe(&record);
        if (it + 1) % 1000 == 0 {
            info!("iteration {} loss {:.4e} ema {:.4e} lr {:.1e}", it + 1, eval.loss, smoothed, lr);
        }
        let due = config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0;
        if let (true, Some(dir)) = (due || it + 1 == config.iterations, &config.checkpoint_dir) {
            let ck = Checkpoint {
                value_optimizer: Some(opt_v.state()),
                gradient_optimizer: Some(opt_g.state()),
                carried_states: states.rows().into_iter().map(|r| r.to_vec()).collect(),
                ema_loss: ema,
                ..Checkpoint::from_model(&model)
            };
            let path = dir.join(format!("checkpoint-{:06}.json", it + 1));
            ck.save(&path)?;
            last_checkpoint = Some(path);
        }
    }
    if let Some(w) = telemetry.as_mut() {
        w.flush()?;
    }
    Ok(model)
}

/// The checkpoint with the highest iteration count in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let iter = name.strip_prefix("checkpoint-")?.strip_suffix(".json")?.parse().ok()?;
            Some((iter, e.path()))
        })
        .max_by_key(|(iter, _)| *iter)
}

/// Trains into `config.checkpoint_dir`, picking up from the newest checkpoint
/// found there. A finished run is loaded without further work.
pub fn train_resumable(
    network: &MatchingNetwork,
    plan: &StaticPlan,
    config: &TrainerConfig,
) -> Result<ValueGradientModel, TrainError> {
    let dir = config
        .checkpoint_dir
        .as_deref()
        .ok_or_else(|| TrainError::Config("resumable training needs a checkpoint directory".into()))?;
    let resume = match latest_checkpoint(dir) {
        Some((iter, path)) if iter <= config.iterations => Some(Checkpoint::load(&path)?),
        _ => None,
    };
    if let Some(ck) = resume.as_ref().filter(|ck| ck.iteration == config.iterations) {
        return ck.model(network.num_classes(), &config.hidden);
    }
    train_observed(network, plan, config, resume.as_ref(), |_| {})
}
