//! Euler paths of the reference reflected process under a constant drift.
//!
//! One step maps `Z(k)` to the free point
//! `x = Z(k) + delta_k + R theta h - Gamma Z(k) h` and projects it back onto
//! the orthant with [`skorokhod`], recording the pushes along the basic
//! activities.

use std::io::Write;

use ndarray::{s, Array2, Array3, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::network::MatchingNetwork;
use crate::plan::StaticPlan;
use crate::rng;

/// Boundary tolerance of the projection.
pub const SKOROKHOD_TOL: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum RbmError {
    #[error("skorokhod projection did not clear after {0} sweeps")]
    NonTermination(usize),
    #[error("reference drift has length {got}, expected {expected}")]
    DriftLength { got: usize, expected: usize },
    #[error("reference drift for activity {0} leaves the admissible set")]
    DriftOutsideSet(usize),
    #[error("horizon and step count must be positive and finite")]
    BadGrid,
    #[error("initial state has a negative or non-finite entry")]
    BadInitialState,
}

/// Result of one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub z: Vec<f64>,
    /// Pushes per basic activity, in basic order.
    pub y: Vec<f64>,
    pub sweeps: usize,
}

/// Projects `x` onto the nonnegative orthant by pushing each violated buffer
/// along its cheapest basic activity.
///
/// Buffers are visited in increasing index order within a sweep; a buffer is
/// pushed by its current deficit, which sets it to exactly zero. Since pushes
/// only ever add mass, a buffer cleared once stays clear.
pub fn skorokhod(
    network: &MatchingNetwork,
    plan: &StaticPlan,
    x: &[f64],
) -> Result<Projection, RbmError> {
    let ni = network.num_classes();
    let mut z = x.to_vec();
    let mut y = vec![0.0; plan.num_basic()];
    let cap = 10 * ni;
    let mut sweeps = 0;
    while z.iter().any(|&v| v < -SKOROKHOD_TOL) {
        if sweeps >= cap {
            return Err(RbmError::NonTermination(sweeps));
        }
        sweeps += 1;
        let violated: Vec<usize> = (0..ni).filter(|&i| z[i] < -SKOROKHOD_TOL).collect();
        for i in violated {
            if z[i] >= -SKOROKHOD_TOL {
                continue;
            }
            let j = plan.push_activity(i);
            let amount = -z[i];
            let a = network.activity(j);
            z[a.left] += amount;
            z[a.right] += amount;
            z[i] = 0.0;
            y[plan.basic_position(j).expect("push activity is basic")] += amount;
            if z.iter().all(|&v| v >= -SKOROKHOD_TOL) {
                break;
            }
        }
    }
    Ok(Projection { z, y, sweeps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    /// Constant reference drift, one entry per activity.
    pub drift: Vec<f64>,
    pub horizon: f64,
    pub steps: usize,
    pub eta: f64,
    pub scale: f64,
}

impl ReferenceConfig {
    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Builds the drift vector with one value on basic activities and another
    /// on nonbasic ones.
    pub fn split_drift(plan: &StaticPlan, num_activities: usize, basic: f64, nonbasic: f64) -> Vec<f64> {
        (0..num_activities).map(|j| if plan.is_basic(j) { basic } else { nonbasic }).collect()
    }

    /// The drift must keep the matching control nondecreasing: at most
    /// `sqrt(n) x*_j` on basic activities and nonpositive on nonbasic ones.
    pub fn validate(&self, network: &MatchingNetwork, plan: &StaticPlan) -> Result<(), RbmError> {
        let nj = network.num_activities();
        if self.drift.len() != nj {
            return Err(RbmError::DriftLength { got: self.drift.len(), expected: nj });
        }
        if self.steps == 0 || !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(RbmError::BadGrid);
        }
        let root_n = self.scale.sqrt();
        for (j, &d) in self.drift.iter().enumerate() {
            let ok = if plan.is_basic(j) { d <= root_n * plan.rates()[j] } else { d <= 0.0 };
            if !ok || !d.is_finite() {
                return Err(RbmError::DriftOutsideSet(j));
            }
        }
        Ok(())
    }
}

/// One discretized path.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// `(N+1) x I`
    pub states: Array2<f64>,
    /// `N x b`
    pub pushes: Array2<f64>,
    /// `N x I`
    pub increments: Array2<f64>,
}

/// A batch of paths. Shapes `B x (N+1) x I`, `B x N x b`, `B x N x I`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub states: Array3<f64>,
    pub pushes: Array3<f64>,
    pub increments: Array3<f64>,
}

impl PathBatch {
    pub fn len(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Terminal states `Z(T)`, one row per path.
    pub fn terminal_states(&self) -> Array2<f64> {
        let n = self.states.shape()[1] - 1;
        self.states.slice(s![.., n, ..]).to_owned()
    }

    /// Writes `step, path, Z..., dY...` rows for debugging.
    pub fn dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let (b, n1, ni) = self.states.dim();
        let nb = self.pushes.shape()[2];
        write!(out, "step,path")?;
        for i in 0..ni {
            write!(out, ",z{}", i + 1)?;
        }
        for j in 0..nb {
            write!(out, ",dy{}", j + 1)?;
        }
        writeln!(out)?;
        for k in 0..n1 {
            for p in 0..b {
                write!(out, "{k},{p}")?;
                for i in 0..ni {
                    write!(out, ",{}", self.states[[p, k, i]])?;
                }
                for j in 0..nb {
                    let v = if k + 1 < n1 { self.pushes[[p, k, j]] } else { 0.0 };
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// The reference process of one network under one reference configuration.
#[derive(Debug, Clone)]
pub struct ReferenceProcess<'a> {
    network: &'a MatchingNetwork,
    plan: &'a StaticPlan,
    config: ReferenceConfig,
    // R theta h
    drift_step: Vec<f64>,
    // sqrt(h lambda_i)
    noise_scale: Vec<f64>,
}

impl<'a> ReferenceProcess<'a> {
    pub fn new(
        network: &'a MatchingNetwork,
        plan: &'a StaticPlan,
        config: ReferenceConfig,
    ) -> Result<Self, RbmError> {
        config.validate(network, plan)?;
        let h = config.step();
        let drift_step = network.apply_matching(&config.drift).into_iter().map(|d| d * h).collect();
        let noise_scale = network.arrival_rates().iter().map(|l| (l * h).sqrt()).collect();
        Ok(Self { network, plan, config, drift_step, noise_scale })
    }

    pub fn config(&self) -> &ReferenceConfig {
        &self.config
    }

    /// Runs the Euler recursion from `z0` with the given increments (`N x I`).
    pub fn path_from_increments(
        &self,
        z0: ArrayView1<f64>,
        increments: Array2<f64>,
    ) -> Result<Path, RbmError> {
        let ni = self.network.num_classes();
        let n = self.config.steps;
        if z0.iter().any(|v| !v.is_finite() || *v < -SKOROKHOD_TOL) {
            return Err(RbmError::BadInitialState);
        }
        let h = self.config.step();
        let gamma = self.network.abandonment_rates();
        let mut states = Array2::zeros((n + 1, ni));
        let mut pushes = Array2::zeros((n, self.plan.num_basic()));
        states.row_mut(0).assign(&z0);
        let mut x = vec![0.0; ni];
        for k in 0..n {
            for i in 0..ni {
                let zi = states[[k, i]];
                x[i] = zi + increments[[k, i]] + self.drift_step[i] - gamma[i] * zi * h;
            }
            let proj = skorokhod(self.network, self.plan, &x)?;
            for i in 0..ni {
                states[[k + 1, i]] = proj.z[i];
            }
            for (j, yj) in proj.y.into_iter().enumerate() {
                pushes[[k, j]] = yj;
            }
        }
        Ok(Path { states, pushes, increments })
    }

    /// Draws `N` Gaussian increments with covariance `h Lambda` and runs the
    /// recursion.
    pub fn discretize<R: Rng>(&self, z0: ArrayView1<f64>, rng: &mut R) -> Result<Path, RbmError> {
        let ni = self.network.num_classes();
        let mut inc = Array2::zeros((self.config.steps, ni));
        for mut row in inc.rows_mut() {
            for (v, s) in row.iter_mut().zip(&self.noise_scale) {
                let g: f64 = rng.sample(StandardNormal);
                *v = s * g;
            }
        }
        self.path_from_increments(z0, inc)
    }

    /// Paths from each row of `initial`, path `p` drawing from stream `p` of
    /// `seed`.
    pub fn sample_batch(&self, initial: &Array2<f64>, seed: u64) -> Result<PathBatch, RbmError> {
        let b = initial.nrows();
        let ni = self.network.num_classes();
        let n = self.config.steps;
        let nb = self.plan.num_basic();
        let mut states = Array3::zeros((b, n + 1, ni));
        let mut pushes = Array3::zeros((b, n, nb));
        let mut increments = Array3::zeros((b, n, ni));
        for p in 0..b {
            let mut rng = rng::substream(seed, p as u64);
            let path = self.discretize(initial.row(p), &mut rng)?;
            states.slice_mut(s![p, .., ..]).assign(&path.states);
            pushes.slice_mut(s![p, .., ..]).assign(&path.pushes);
            increments.slice_mut(s![p, .., ..]).assign(&path.increments);
        }
        Ok(PathBatch { states, pushes, increments })
    }
}
