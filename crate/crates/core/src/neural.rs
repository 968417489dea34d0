//! Fully connected networks with elu hidden layers, reverse-mode gradients and
//! Adam.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("layer {layer}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { layer: usize, expected: (usize, usize), found: (usize, usize) },
    #[error("expected {expected} layers, found {found}")]
    LayerCount { expected: usize, found: usize },
    #[error("learning-rate schedule does not partition [0, {0})")]
    BadSchedule(usize),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }

    fn zeros_like(&self) -> Self {
        Dense { weights: Array2::zeros(self.weights.raw_dim()), bias: Array1::zeros(self.bias.len()) }
    }
}

/// A multilayer perceptron; every layer but the last applies elu.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations retained by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    // input of each layer; for hidden layers this is the elu output
    inputs: Vec<Array2<f64>>,
}

/// Per-layer parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().chain(&l.bias).map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weights.iter());
        out.extend(l.bias.iter());
    }
    out
}

impl Mlp {
    /// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn new<R: Rng>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Dense {
                    weights: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-bound..bound)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Self {
        assert!(!layers.is_empty());
        for pair in layers.windows(2) {
            assert_eq!(pair[0].fan_out(), pair[1].fan_in(), "layer widths do not chain");
        }
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.fan_in(), l.fan_out())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| (l.fan_in() + 1) * l.fan_out()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params());
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = affine(x, &self.layers[0]);
        for l in &self.layers[1..] {
            a.mapv_inplace(elu);
            a = affine(a.view(), l);
        }
        a
    }

    /// Evaluates a single input row.
    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row shape");
        self.forward(view).into_raw_vec_and_offset().0
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, ForwardCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.as_standard_layout().into_owned());
        let mut a = affine(x, &self.layers[0]);
        for l in &self.layers[1..] {
            a.mapv_inplace(elu);
            let next = affine(a.view(), l);
            inputs.push(a);
            a = next;
        }
        (a, ForwardCache { inputs })
    }

    /// Backpropagates `d_out = dL/d(output)` through a cached forward pass.
    /// Returns the parameter gradients and, if requested, `dL/d(input)`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: Array2<f64>,
        want_input_grad: bool,
    ) -> (Gradients, Option<Array2<f64>>) {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.as_standard_layout().into_owned();
        let mut d_input = None;
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let a_in = &cache.inputs[k];
            grads.push(Dense { weights: transpose_times(a_in, &delta), bias: delta.sum_axis(Axis(0)) });
            if k == 0 {
                if want_input_grad {
                    d_input = Some(times_transpose(&delta, &l.weights));
                }
                break;
            }
            let mut d_prev = times_transpose(&delta, &l.weights);
            // elu'(z) = 1 for z > 0 and e^z = elu(z) + 1 otherwise
            Zip::from(&mut d_prev).and(a_in).for_each(|d, &a| {
                if a <= 0.0 {
                    *d *= a + 1.0;
                }
            });
            delta = d_prev;
        }
        grads.reverse();
        (Gradients { layers: grads }, d_input)
    }
}

// Widths at or below this use the row-wise kernels; matrixmultiply packs
// such thin operands poorly.
const NARROW: usize = 8;

/// `x W + b`
fn affine(x: ArrayView2<f64>, layer: &Dense) -> Array2<f64> {
    let (rows, fan_in) = x.dim();
    let fan_out = layer.fan_out();
    let by_rows = fan_in <= NARROW || rows <= NARROW;
    if by_rows || fan_out <= NARROW {
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let b = layer.bias.as_slice().expect("contiguous bias");
        let mut out = Array2::zeros((rows, fan_out));
        let os = out.as_slice_mut().expect("fresh array");
        let rows_out = os.chunks_exact_mut(fan_out.max(1)).zip(xs.chunks_exact(fan_in.max(1)));
        if by_rows {
            let w = layer.weights.as_standard_layout();
            let ws = w.as_slice().expect("standard layout");
            for (orow, xrow) in rows_out {
                orow.copy_from_slice(b);
                for (k, &xk) in xrow.iter().enumerate() {
                    axpy(orow, xk, &ws[k * fan_out..(k + 1) * fan_out]);
                }
            }
        } else {
            let wt = layer.weights.t().as_standard_layout().into_owned();
            let wts = wt.as_slice().expect("standard layout");
            for (orow, xrow) in rows_out {
                for (o, ov) in orow.iter_mut().enumerate() {
                    *ov = b[o] + dot(xrow, &wts[o * fan_in..(o + 1) * fan_in]);
                }
            }
        }
        return out;
    }
    let mut out = x.dot(&layer.weights);
    out += &layer.bias;
    out
}

/// `a' d`
fn transpose_times(a: &Array2<f64>, d: &Array2<f64>) -> Array2<f64> {
    let (_, p) = a.dim();
    let q = d.ncols();
    if p <= NARROW {
        let mut out = Array2::zeros((p, q));
        let os = out.as_slice_mut().expect("fresh array");
        let as_ = a.as_slice().expect("standard layout");
        let ds = d.as_slice().expect("standard layout");
        for (arow, drow) in as_.chunks_exact(p.max(1)).zip(ds.chunks_exact(q.max(1))) {
            for (k, &ak) in arow.iter().enumerate() {
                axpy(&mut os[k * q..(k + 1) * q], ak, drow);
            }
        }
        return out;
    }
    a.t().dot(d)
}

/// `d W'`
fn times_transpose(d: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let (rows, q) = d.dim();
    let p = w.nrows();
    if q <= NARROW {
        // rows of W' are the columns of W
        let wt = w.t().as_standard_layout().into_owned();
        let wts = wt.as_slice().expect("standard layout");
        let ds = d.as_slice().expect("standard layout");
        let mut out = Array2::zeros((rows, p));
        let os = out.as_slice_mut().expect("fresh array");
        for (orow, drow) in os.chunks_exact_mut(p.max(1)).zip(ds.chunks_exact(q.max(1))) {
            for (k, &dk) in drow.iter().enumerate() {
                axpy(orow, dk, &wts[k * p..(k + 1) * p]);
            }
        }
        return out;
    }
    d.dot(&w.t())
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let xc = x.chunks_exact(4);
    let yc = y.chunks_exact(4);
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for i in 0..4 {
            acc[i] += a[i] * b[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Piecewise-constant learning rate over iteration ranges `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub stages: Vec<(usize, usize, f64)>,
}

impl LrSchedule {
    /// 1e-3, 1e-4, 1e-5, 5e-6 with breaks at 20k, 50k and 70k over 80k
    /// iterations.
    pub fn staircase() -> Self {
        Self {
            stages: vec![
                (0, 20_000, 1e-3),
                (20_000, 50_000, 1e-4),
                (50_000, 70_000, 1e-5),
                (70_000, 80_000, 5e-6),
            ],
        }
    }

    pub fn constant(rate: f64, iterations: usize) -> Self {
        Self { stages: vec![(0, iterations, rate)] }
    }

    /// The rate at `iter`; past the last stage the final rate persists.
    pub fn rate(&self, iter: usize) -> f64 {
        self.stages
            .iter()
            .find(|(s, e, _)| (*s..*e).contains(&iter))
            .or(self.stages.last())
            .map(|s| s.2)
            .unwrap_or(0.0)
    }

    /// Checks that the stages tile `[0, total)` in order.
    pub fn validate(&self, total: usize) -> Result<(), NeuralError> {
        let mut at = 0;
        for &(s, e, r) in &self.stages {
            if s != at || e <= s || !(r.is_finite() && r >= 0.0) {
                return Err(NeuralError::BadSchedule(total));
            }
            at = e;
        }
        if at != total {
            return Err(NeuralError::BadSchedule(total));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Dense>,
    v: Vec<Dense>,
    step: u64,
}

impl Adam {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        let zeros: Vec<Dense> = net.layers.iter().map(Dense::zeros_like).collect();
        Self { config, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    pub fn update(&mut self, net: &mut Mlp, grads: &Gradients, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let apply = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let g = &grads.layers[k];
            Zip::from(&mut layer.weights)
                .and(&mut self.m[k].weights)
                .and(&mut self.v[k].weights)
                .and(&g.weights)
                .for_each(|w, m, v, &g| apply(w, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut self.m[k].bias)
                .and(&mut self.v[k].bias)
                .and(&g.bias)
                .for_each(|w, m, v, &g| apply(w, m, v, g));
        }
    }

    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        (flatten(&self.m), flatten(&self.v))
    }
}

/// Serializable snapshot of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpState {
    pub layers: Vec<LayerState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: MlpState,
    pub v: MlpState,
}

fn dense_state(layers: &[Dense]) -> MlpState {
    MlpState {
        layers: layers
            .iter()
            .map(|l| LayerState {
                fan_in: l.fan_in(),
                fan_out: l.fan_out(),
                weights: l.weights.iter().copied().collect(),
                bias: l.bias.to_vec(),
            })
            .collect(),
    }
}

fn dense_from_state(state: &MlpState, shapes: &[(usize, usize)]) -> Result<Vec<Dense>, NeuralError> {
    if state.layers.len() != shapes.len() {
        return Err(NeuralError::LayerCount { expected: shapes.len(), found: state.layers.len() });
    }
    state
        .layers
        .iter()
        .zip(shapes)
        .enumerate()
        .map(|(k, (l, &(fi, fo)))| {
            let found = (l.fan_in, l.fan_out);
            if found != (fi, fo) || l.weights.len() != fi * fo || l.bias.len() != fo {
                return Err(NeuralError::ShapeMismatch { layer: k, expected: (fi, fo), found });
            }
            Ok(Dense {
                weights: Array2::from_shape_vec((fi, fo), l.weights.clone()).expect("checked length"),
                bias: Array1::from(l.bias.clone()),
            })
        })
        .collect()
}

impl Mlp {
    pub fn state(&self) -> MlpState {
        dense_state(&self.layers)
    }

    /// Rebuilds a network from a snapshot, rejecting any shape other than
    /// `shapes`.
    pub fn from_state(state: &MlpState, shapes: &[(usize, usize)]) -> Result<Self, NeuralError> {
        Ok(Self { layers: dense_from_state(state, shapes)? })
    }

    /// Rebuilds a network from a snapshot with whatever shape it records.
    pub fn from_state_unchecked(state: &MlpState) -> Result<Self, NeuralError> {
        let shapes: Vec<_> = state.layers.iter().map(|l| (l.fan_in, l.fan_out)).collect();
        for (k, w) in shapes.windows(2).enumerate() {
            if w[0].1 != w[1].0 {
                return Err(NeuralError::ShapeMismatch { layer: k + 1, expected: (w[0].1, w[1].1), found: w[1] });
            }
        }
        Self::from_state(state, &shapes)
    }
}

impl Adam {
    pub fn state(&self) -> AdamState {
        AdamState { config: self.config, step: self.step, m: dense_state(&self.m), v: dense_state(&self.v) }
    }

    pub fn from_state(state: &AdamState, net: &Mlp) -> Result<Self, NeuralError> {
        let shapes = net.shapes();
        Ok(Self {
            config: state.config,
            step: state.step,
            m: dense_from_state(&state.m, &shapes)?,
            v: dense_from_state(&state.v, &shapes)?,
        })
    }
}
