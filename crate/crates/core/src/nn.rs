//! Dense networks, Adam, and the squashed Gaussian policy head.
//!
//! Everything is `f64` and allocation-light enough for desk-scale training.
//! Networks are plain values: clone one to hand a snapshot to another thread.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Multi-layer perceptron with ReLU hidden layers and a linear output.
///
/// Weights are stored `(fan_in, fan_out)` so a batch forward is `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Per-layer pre-activations and inputs from a batch forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("non-empty network")
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least an input and an output size");
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit)));
            biases.push(Array1::zeros(fan_out));
        }
        Self { weights, biases }
    }

    pub fn from_layers(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self, NnError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(NnError::Format("need one bias per weight matrix".into()));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != b.len() {
                return Err(NnError::Dimension { expected: w.ncols(), got: b.len() });
            }
            if i > 0 && weights[i - 1].ncols() != w.nrows() {
                return Err(NnError::Dimension { expected: weights[i - 1].ncols(), got: w.nrows() });
            }
        }
        Ok(Self { weights, biases })
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let weights = sizes.windows(2).map(|p| Array2::zeros((p[0], p[1]))).collect();
        let biases = sizes.windows(2).map(|p| Array1::zeros(p[1])).collect();
        Self { weights, biases }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.layer_sizes())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.weights[0].nrows()];
        sizes.extend(self.weights.iter().map(|w| w.ncols()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.ncols())
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Scales the output layer in place.
    pub fn scale_output_layer(&mut self, factor: f64) {
        if let (Some(w), Some(b)) = (self.weights.last_mut(), self.biases.last_mut()) {
            *w *= factor;
            *b *= factor;
        }
    }

    /// Scales selected output units of the last layer.
    pub fn scale_output_units(&mut self, units: std::ops::Range<usize>, factor: f64) {
        let w = self.weights.last_mut().expect("non-empty network");
        let b = self.biases.last_mut().expect("non-empty network");
        for j in units {
            w.column_mut(j).mapv_inplace(|x| x * factor);
            b[j] *= factor;
        }
    }

    pub fn forward(&self, input: ArrayView1<f64>) -> Result<Array1<f64>, NnError> {
        let x = input.insert_axis(Axis(0));
        Ok(self.forward_batch(x)?.index_axis_move(Axis(0), 0))
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(input.ncols())?;
        let last = self.weights.len() - 1;
        let mut h = input.dot(&self.weights[0]) + &self.biases[0];
        for i in 1..=last {
            h.mapv_inplace(relu);
            h = h.dot(&self.weights[i]) + &self.biases[i];
        }
        Ok(h)
    }

    /// Batch forward pass keeping what `backward` needs.
    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<ForwardCache, NnError> {
        self.check_input(input.ncols())?;
        let n = self.weights.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut x = input.to_owned();
        for i in 0..n {
            let z = x.dot(&self.weights[i]) + &self.biases[i];
            inputs.push(x);
            x = z.mapv(relu);
            pre.push(z);
        }
        Ok(ForwardCache { inputs, pre })
    }

    /// Reverse pass: parameter gradients (shaped like `self`) and the input
    /// gradient, both summed over the batch.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<(Mlp, Array2<f64>), NnError> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(NnError::Dimension { expected: out.ncols(), got: upstream.ncols() });
        }
        let n = self.weights.len();
        let mut grads = self.zeros_like();
        let mut g = upstream.to_owned();
        for i in (0..n).rev() {
            if i + 1 < n {
                g.zip_mut_with(&cache.pre[i], |gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            grads.weights[i] = cache.inputs[i].t().dot(&g);
            grads.biases[i] = g.sum_axis(Axis(0));
            g = g.dot(&self.weights[i].t());
        }
        Ok((grads, g))
    }

    fn check_input(&self, got: usize) -> Result<(), NnError> {
        let expected = self.input_dim();
        if got != expected {
            return Err(NnError::Dimension { expected, got });
        }
        Ok(())
    }

    /// `self <- (1 - tau) * self + tau * source`.
    pub fn polyak_from(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.weights.iter_mut().zip(&source.weights) {
            t.zip_mut_with(s, |a, &b| *a = (1.0 - tau) * *a + tau * b);
        }
        for (t, s) in self.biases.iter_mut().zip(&source.biases) {
            t.zip_mut_with(s, |a, &b| *a = (1.0 - tau) * *a + tau * b);
        }
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend(w.iter());
            flat.extend(b.iter());
        }
        flat
    }

    pub fn from_flat(sizes: &[usize], flat: &[f64]) -> Result<Self, NnError> {
        let mut net = Self::zeros(sizes);
        let expected = net.param_count();
        if flat.len() != expected {
            return Err(NnError::Dimension { expected, got: flat.len() });
        }
        let mut it = flat.iter().copied();
        for (w, b) in net.weights.iter_mut().zip(net.biases.iter_mut()) {
            w.iter_mut().for_each(|x| *x = it.next().unwrap_or_default());
            b.iter_mut().for_each(|x| *x = it.next().unwrap_or_default());
        }
        Ok(net)
    }

    /// SHA-256 of the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        hash_f64s(&self.to_flat())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    fn zip_params(&mut self, other: &Mlp, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.zip_mut_with(b, |x, &y| f(x, y));
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.zip_mut_with(b, |x, &y| f(x, y));
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Mlp, factor: f64) {
        self.zip_params(other, |a, b| *a += factor * b);
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn hash_f64s(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Mlp,
    v: Mlp,
}

impl Adam {
    pub fn new(params: &Mlp, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn moments(&self) -> (&Mlp, &Mlp) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut Mlp, grads: &Mlp) {
        self.step_count += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        self.m.zip_params(grads, |m, g| *m = b1 * *m + (1.0 - b1) * g);
        self.v.zip_params(grads, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
        let c1 = 1.0 - b1.powi(self.step_count as i32);
        let c2 = 1.0 - b2.powi(self.step_count as i32);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: &mut f64, m: f64, v: f64| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        for ((p, m), v) in params.weights.iter_mut().zip(&self.m.weights).zip(&self.v.weights) {
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| update(p, m, v));
        }
        for ((p, m), v) in params.biases.iter_mut().zip(&self.m.biases).zip(&self.v.biases) {
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| update(p, m, v));
        }
    }

    /// Adam on a single scalar parameter (the entropy temperature).
    pub fn scalar(lr: f64) -> ScalarAdam {
        ScalarAdam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, m: 0.0, v: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: f64,
    pub v: f64,
}

impl ScalarAdam {
    pub fn step(&mut self, param: &mut f64, grad: f64) {
        self.step_count += 1;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad;
        let m_hat = self.m / (1.0 - self.beta1.powi(self.step_count as i32));
        let v_hat = self.v / (1.0 - self.beta2.powi(self.step_count as i32));
        *param -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
    }
}

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const TANH_EPS: f64 = 1e-6;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian squashed by `tanh` and mapped affinely onto a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

/// One reparameterized draw, with what the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SquashedSample {
    /// Action in the head's box.
    pub action: Vec<f64>,
    /// `tanh(u)`, in `[-1, 1]`.
    pub squashed: Vec<f64>,
    pub log_prob: f64,
    std: Vec<f64>,
    noise: Vec<f64>,
    clamped: Vec<bool>,
}

impl GaussianHead {
    /// The `[-1, 1]^dim` box.
    pub fn unit(dim: usize) -> Self {
        Self { low: vec![-1.0; dim], high: vec![1.0; dim] }
    }

    pub fn action_dim(&self) -> usize {
        self.low.len()
    }

    fn to_box(&self, t: &[f64]) -> Vec<f64> {
        t.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(&t, (&lo, &hi))| lo + 0.5 * (t + 1.0) * (hi - lo))
            .collect()
    }

    /// `a = box(tanh(mean + exp(log_std) * noise))` with its log-density.
    pub fn sample_squashed(&self, mean: &[f64], log_std: &[f64], noise: &[f64]) -> SquashedSample {
        let dim = self.action_dim();
        assert!(mean.len() == dim && log_std.len() == dim && noise.len() == dim, "head dimension mismatch");
        let mut squashed = Vec::with_capacity(dim);
        let mut std = Vec::with_capacity(dim);
        let mut clamped = Vec::with_capacity(dim);
        let mut log_prob = 0.0;
        for i in 0..dim {
            let ls = log_std[i].clamp(LOG_STD_MIN, LOG_STD_MAX);
            clamped.push(ls != log_std[i]);
            let sd = ls.exp();
            let t = (mean[i] + sd * noise[i]).tanh();
            let half_range = 0.5 * (self.high[i] - self.low[i]);
            log_prob += -0.5 * noise[i] * noise[i] - ls - HALF_LN_2PI - (1.0 - t * t + TANH_EPS).ln() - half_range.ln();
            squashed.push(t);
            std.push(sd);
        }
        SquashedSample { action: self.to_box(&squashed), squashed, log_prob, std, noise: noise.to_vec(), clamped }
    }

    /// The squashed mean, used for deterministic deployment.
    pub fn mean_action(&self, mean: &[f64]) -> Vec<f64> {
        let t: Vec<f64> = mean.iter().map(|m| m.tanh()).collect();
        self.to_box(&t)
    }

    /// Given `dL/d squashed` and `dL/d log_prob`, returns `dL/d mean` and
    /// `dL/d log_std` (zero where the clamp was active).
    pub fn backward(&self, s: &SquashedSample, d_squashed: &[f64], d_log_prob: f64) -> (Vec<f64>, Vec<f64>) {
        let dim = self.action_dim();
        let mut d_mean = Vec::with_capacity(dim);
        let mut d_ls = Vec::with_capacity(dim);
        for i in 0..dim {
            let t = s.squashed[i];
            let dt_du = 1.0 - t * t;
            // d/du of -ln(1 - tanh^2 u + eps)
            let dlogp_du = 2.0 * t * dt_du / (dt_du + TANH_EPS);
            let d_u = d_squashed[i] * dt_du + d_log_prob * dlogp_du;
            d_mean.push(d_u);
            d_ls.push(if s.clamped[i] { 0.0 } else { d_u * s.std[i] * s.noise[i] - d_log_prob });
        }
        (d_mean, d_ls)
    }
}

/// Networks and scalars saved together: `<stem>.bin` holds the little-endian
/// parameters, `<stem>.json` the layout and a SHA-256 of the binary.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub nets: BTreeMap<String, Mlp>,
    pub scalars: BTreeMap<String, f64>,
    pub metadata: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    nets: Vec<NetEntry>,
    scalars: BTreeMap<String, f64>,
    sha256: String,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetEntry {
    name: String,
    layer_sizes: Vec<usize>,
    offset: usize,
    len: usize,
}

const CHECKPOINT_FORMAT: &str = "racelab-f64le-v1";

impl Checkpoint {
    pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("bin"), stem.with_extension("json"))
    }

    pub fn save(&self, stem: &Path) -> Result<(), NnError> {
        let mut flat = Vec::new();
        let mut entries = Vec::new();
        for (name, net) in &self.nets {
            let params = net.to_flat();
            entries.push(NetEntry { name: name.clone(), layer_sizes: net.layer_sizes(), offset: flat.len(), len: params.len() });
            flat.extend(params);
        }
        let bytes: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            nets: entries,
            scalars: self.scalars.clone(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            metadata: self.metadata.clone(),
        };
        let (bin, json) = Self::paths(stem);
        if let Some(dir) = bin.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&bin, bytes)?;
        let text = serde_json::to_string_pretty(&header).map_err(|e| NnError::Format(e.to_string()))?;
        std::fs::write(json, text)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, NnError> {
        let (bin, json) = Self::paths(stem);
        let header: CheckpointHeader = serde_json::from_str(&std::fs::read_to_string(json)?)
            .map_err(|e| NnError::Format(format!("sidecar: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(NnError::Format(format!("unknown format `{}`", header.format)));
        }
        let bytes = std::fs::read(bin)?;
        if hex::encode(Sha256::digest(&bytes)) != header.sha256 {
            return Err(NnError::Format("content hash mismatch".into()));
        }
        if bytes.len() % 8 != 0 {
            return Err(NnError::Format("truncated parameter file".into()));
        }
        let flat: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let mut nets = BTreeMap::new();
        for e in header.nets {
            let slice = flat
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| NnError::Format(format!("net `{}` out of range", e.name)))?;
            nets.insert(e.name, Mlp::from_flat(&e.layer_sizes, slice)?);
        }
        Ok(Self { nets, scalars: header.scalars, metadata: header.metadata })
    }

    pub fn net(&self, name: &str) -> Result<&Mlp, NnError> {
        self.nets.get(name).ok_or_else(|| NnError::Format(format!("checkpoint has no net `{name}`")))
    }
}
