//! Feed-forward Q-network and the differentiable policy interface.
//!
//! `π(a|s)` is the temperature-1 softmax over the network's output logits.
//! Everything downstream (costs, attacks, detectors) talks to a policy
//! through the [`Model`] trait so that analytic surrogates can stand in
//! for a network in tests.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat64};

/// Probability vector over the discrete action set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDist {
    probs: Vec<f64>,
}

impl ActionDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty action distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(
                "action probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "action probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(action: usize, num_actions: usize) -> Self {
        assert!(action < num_actions, "action {action} out of range");
        let mut probs = vec![0.0; num_actions];
        probs[action] = 1.0;
        Self { probs }
    }

    pub fn uniform(num_actions: usize) -> Self {
        Self {
            probs: vec![1.0 / num_actions as f64; num_actions],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most likely action, lowest index on ties.
    pub fn mode(&self) -> usize {
        linalg::argmax(&self.probs)
    }
}

/// Max-subtracted log-sum-exp.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

// log π is floored here so J stays finite even for saturated logits.
const LOG_PROB_FLOOR: f64 = -745.0;

/// `-Σ τ(a) log softmax(z)_a`, computed from log-softmax directly.
pub fn cross_entropy(z: &[f64], tau: &ActionDist) -> f64 {
    let lse = log_sum_exp(z);
    -z.iter()
        .zip(tau.probs())
        .filter(|(_, &t)| t != 0.0)
        .map(|(&zi, &t)| t * (zi - lse).max(LOG_PROB_FLOOR))
        .sum::<f64>()
}

/// A policy whose logits are differentiable with respect to the input.
pub trait Model: Sync {
    fn input_dim(&self) -> usize;

    fn num_actions(&self) -> usize;

    fn logits(&self, s: &[f64]) -> Result<Vec<f64>>;

    /// Vector-Jacobian product `vᵀ ∂z/∂s`.
    fn logits_vjp(&self, s: &[f64], v: &[f64]) -> Result<Vec<f64>>;

    /// `J(s, τ)`.
    fn cost(&self, s: &[f64], tau: &ActionDist) -> Result<f64> {
        check_tau(self.num_actions(), tau)?;
        Ok(cross_entropy(&self.logits(s)?, tau))
    }

    /// `∇_s J(s, τ)`.
    fn cost_grad(&self, s: &[f64], tau: &ActionDist) -> Result<Vec<f64>> {
        check_tau(self.num_actions(), tau)?;
        let z = self.logits(s)?;
        let v = linalg::sub(&softmax(&z), tau.probs());
        self.logits_vjp(s, &v)
    }

    /// The argmax policy `π*(·|s)` together with `J(s, π*(·|s))`, from a
    /// single policy evaluation.
    fn greedy_cost(&self, s: &[f64]) -> Result<(ActionDist, f64)> {
        let z = self.logits(s)?;
        let tau = ActionDist::one_hot(linalg::argmax(&z), z.len());
        let j = cross_entropy(&z, &tau);
        Ok((tau, j))
    }

    fn greedy_action(&self, s: &[f64]) -> Result<usize> {
        Ok(linalg::argmax(&self.logits(s)?))
    }

    fn policy(&self, s: &[f64]) -> Result<ActionDist> {
        Ok(ActionDist {
            probs: softmax(&self.logits(s)?),
        })
    }
}

fn check_tau(num_actions: usize, tau: &ActionDist) -> Result<()> {
    if tau.len() != num_actions {
        return Err(Error::DimMismatch {
            expected: num_actions,
            got: tau.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

/// Dense MLP: hidden layers share one activation, the output layer emits raw
/// logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    layer_dims: Vec<usize>,
    activation: Activation,
    /// `weights[l]` maps layer `l` (cols) to layer `l + 1` (rows).
    weights: Vec<Mat64>,
    biases: Vec<Vec<f64>>,
}

/// Per-layer activations recorded during a forward pass.
pub struct ForwardCache {
    /// `outputs[0]` is the input; `outputs[l]` is post-activation of layer `l`.
    outputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.outputs.last().expect("cache is never empty")
    }
}

/// Gradients laid out like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &PolicyNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.as_slice().len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, a: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= a);
        }
    }
}

impl PolicyNet {
    pub fn from_parts(
        layer_dims: Vec<usize>,
        activation: Activation,
        weights: Vec<Mat64>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer_dims needs at least input and output, all positive".into(),
            ));
        }
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::InvalidArgument(format!(
                "expected {layers} weight/bias layers, got {}/{}",
                weights.len(),
                biases.len()
            )));
        }
        for l in 0..layers {
            let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
            if weights[l].rows() != fan_out || weights[l].cols() != fan_in {
                return Err(Error::InvalidArgument(format!(
                    "layer {l}: weight shape {}x{}, expected {fan_out}x{fan_in}",
                    weights[l].rows(),
                    weights[l].cols()
                )));
            }
            if biases[l].len() != fan_out {
                return Err(Error::DimMismatch {
                    expected: fan_out,
                    got: biases[l].len(),
                });
            }
            if !linalg::all_finite(weights[l].as_slice()) || !linalg::all_finite(&biases[l]) {
                return Err(Error::NonFinite("network parameters"));
            }
        }
        Ok(Self {
            layer_dims,
            activation,
            weights,
            biases,
        })
    }

    /// Uniform fan-in initialization (He for relu, Xavier for tanh), zero biases.
    pub fn random<R: Rng + ?Sized>(
        layer_dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer_dims needs at least input and output, all positive".into(),
            ));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = match activation {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                Activation::Tanh => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(Mat64::from_row_major(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Self::from_parts(layer_dims.to_vec(), activation, weights, biases)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Mat64] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    fn check_input(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.layer_dims[0] {
            return Err(Error::DimMismatch {
                expected: self.layer_dims[0],
                got: s.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check_input(s)?;
        let mut x = s.to_vec();
        let last = self.num_layers() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut y = w.matvec(&x);
            for (yi, bi) in y.iter_mut().zip(b) {
                *yi += bi;
                if l != last {
                    *yi = self.activation.apply(*yi);
                }
            }
            x = y;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, s: &[f64]) -> Result<ForwardCache> {
        self.check_input(s)?;
        let last = self.num_layers() - 1;
        let mut outputs = Vec::with_capacity(self.num_layers() + 1);
        let mut pre = Vec::with_capacity(self.num_layers());
        outputs.push(s.to_vec());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut y = w.matvec(outputs.last().unwrap());
            linalg::axpy(1.0, b, &mut y);
            let out = if l == last {
                y.clone()
            } else {
                y.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre.push(y);
            outputs.push(out);
        }
        Ok(ForwardCache { outputs, pre })
    }

    /// Back-propagates `dL/dlogits`; returns `dL/ds` and, when `grads` is
    /// given, accumulates parameter gradients into it.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &[f64],
        mut grads: Option<&mut ParamGrads>,
    ) -> Vec<f64> {
        let last = self.num_layers() - 1;
        let mut delta = dlogits.to_vec();
        for l in (0..self.num_layers()).rev() {
            if l != last {
                for (d, (&p, &o)) in delta
                    .iter_mut()
                    .zip(cache.pre[l].iter().zip(&cache.outputs[l + 1]))
                {
                    *d *= self.activation.derivative(p, o);
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let input = &cache.outputs[l];
                let cols = input.len();
                let gw = &mut g.weights[l];
                for (r, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    linalg::axpy(d, input, &mut gw[r * cols..(r + 1) * cols]);
                }
                linalg::axpy(1.0, &delta, &mut g.biases[l]);
            }
            delta = self.weights[l].matvec_t(&delta);
        }
        delta
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
    }

    pub fn params_finite(&self) -> bool {
        self.weights.iter().all(|w| linalg::all_finite(w.as_slice()))
            && self.biases.iter().all(|b| linalg::all_finite(b))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            layer_dims: self.layer_dims.clone(),
            activation: self.activation,
            weights: self.weights.iter().map(|w| w.as_slice().to_vec()).collect(),
            biases: self.biases.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        if ckpt.layer_dims.len() < 2 || ckpt.weights.len() != ckpt.layer_dims.len() - 1 {
            return Err(Error::InvalidArgument("checkpoint layer count mismatch".into()));
        }
        let weights = ckpt
            .weights
            .into_iter()
            .zip(ckpt.layer_dims.windows(2))
            .map(|(w, pair)| Mat64::from_row_major(pair[1], pair[0], w))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(ckpt.layer_dims, ckpt.activation, weights, ckpt.biases)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint()).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_checkpoint(ckpt)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk network format. Floats use shortest round-trip decimal, so
/// save/load is value-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Model for PolicyNet {
    fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    fn num_actions(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn logits(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.forward(s)
    }

    fn logits_vjp(&self, s: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.num_actions() {
            return Err(Error::DimMismatch {
                expected: self.num_actions(),
                got: v.len(),
            });
        }
        let cache = self.forward_cached(s)?;
        Ok(self.backward(&cache, v, None))
    }

    fn cost_grad(&self, s: &[f64], tau: &ActionDist) -> Result<Vec<f64>> {
        check_tau(self.num_actions(), tau)?;
        let cache = self.forward_cached(s)?;
        let v = linalg::sub(&softmax(cache.logits()), tau.probs());
        Ok(self.backward(&cache, &v, None))
    }
}
