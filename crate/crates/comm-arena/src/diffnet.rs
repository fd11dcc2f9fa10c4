//! Minimal dense-network engine: forward traces, exact reverse-mode
//! gradients, Adam updates, and a finite-difference verifier.
//!
//! `backward` also produces the gradient with respect to the *input*, which
//! is what lets a receiving agent's loss reach back across the message
//! channel into the sender's network.
//!
//! Networks are plain value objects: no interior mutability, no hidden
//! state. Identical parameters and inputs give bit-identical outputs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Element-wise activation applied after an affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative as a function of the pre-activation. The ReLU subgradient
    /// at exactly zero is taken to be zero.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Dot product with four independent accumulators. The fixed association
/// order keeps results bit-reproducible while letting the compiler keep
/// several multiplies in flight.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let split = a.len() & !3;
    let (a4, a_tail) = a.split_at(split);
    let (b4, b_tail) = b.split_at(split);
    let mut acc = [0.0f64; 4];
    for (ca, cb) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a_tail.iter().zip(b_tail) {
        sum += x * y;
    }
    sum
}

/// One affine layer `y = act(W x + b)`; weights are row-major `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
    in_dim: usize,
    out_dim: usize,
}

impl Layer {
    /// Builds a layer from weight rows (one row per output unit).
    pub fn new(rows: Vec<Vec<f64>>, bias: Vec<f64>, activation: Activation) -> Result<Layer> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::Config("layer dimensions must be > 0".into()));
        }
        let out_dim = rows.len();
        let in_dim = rows[0].len();
        if bias.len() != out_dim {
            return Err(Error::ShapeMismatch {
                context: "layer bias",
                expected: out_dim,
                actual: bias.len(),
            });
        }
        let mut weights = Vec::with_capacity(out_dim * in_dim);
        for row in &rows {
            if row.len() != in_dim {
                return Err(Error::ShapeMismatch {
                    context: "layer weight row",
                    expected: in_dim,
                    actual: row.len(),
                });
            }
            weights.extend_from_slice(row);
        }
        let layer = Layer {
            weights,
            bias,
            activation,
            in_dim,
            out_dim,
        };
        layer.check_finite()?;
        Ok(layer)
    }

    /// Builds a layer from a flat row-major weight vector.
    pub fn from_flat(
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Layer> {
        let out_dim = bias.len();
        if out_dim == 0 || weights.is_empty() || !weights.len().is_multiple_of(out_dim) {
            return Err(Error::Parse(format!(
                "flat weight vector of length {} does not factor over {} outputs",
                weights.len(),
                out_dim
            )));
        }
        let in_dim = weights.len() / out_dim;
        let layer = Layer {
            weights,
            bias,
            activation,
            in_dim,
            out_dim,
        };
        layer.check_finite()?;
        Ok(layer)
    }

    /// Random init: weights uniform in `[-1/sqrt(in_dim), +1/sqrt(in_dim)]`,
    /// biases zero.
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Layer {
        assert!(in_dim > 0 && out_dim > 0, "layer dimensions must be > 0");
        let limit = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Layer {
            weights,
            bias: vec![0.0; out_dim],
            activation,
            in_dim,
            out_dim,
        }
    }

    fn check_finite(&self) -> Result<()> {
        if self.weights.iter().chain(&self.bias).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("layer parameters".into()))
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Row-major flat weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    #[inline]
    fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }
}

/// A feed-forward stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Per-layer pre- and post-activations recorded by [`DenseNet::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// Network output (final post-activation).
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("trace has at least one layer")
    }

    pub fn layer_count(&self) -> usize {
        self.pre.len()
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }

    /// Pre-activations of layer `l`.
    pub fn pre_activations(&self, l: usize) -> &[f64] {
        &self.pre[l]
    }
}

/// Parameter and input gradients; shapes mirror the owning [`DenseNet`].
///
/// Repeated `backward_into` calls accumulate additively, so one
/// `GradientSet` can gather a whole minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    input: Vec<f64>,
}

impl GradientSet {
    /// All-zero gradients shaped like `net`.
    pub fn zeros(net: &DenseNet) -> GradientSet {
        GradientSet {
            weights: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            input: vec![0.0; net.input_dim()],
        }
    }

    /// Row-major weight gradients of layer `l`.
    pub fn weight_grads(&self, l: usize) -> &[f64] {
        &self.weights[l]
    }

    pub fn bias_grads(&self, l: usize) -> &[f64] {
        &self.biases[l]
    }

    /// Gradient with respect to the network input (summed over accumulated
    /// backward passes).
    pub fn input_gradient(&self) -> &[f64] {
        &self.input
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .flatten()
            .chain(&self.input)
            .all(|v| v.is_finite())
    }

    fn matches(&self, net: &DenseNet) -> bool {
        self.weights.len() == net.layers.len()
            && self
                .weights
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.len() == l.weights.len())
            && self
                .biases
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.len() == l.bias.len())
    }
}

impl DenseNet {
    /// Builds a network, checking that consecutive layer dimensions chain.
    pub fn new(layers: Vec<Layer>) -> Result<DenseNet> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::ShapeMismatch {
                    context: "consecutive layer dimensions",
                    expected: pair[0].out_dim,
                    actual: pair[1].in_dim,
                });
            }
        }
        Ok(DenseNet { layers })
    }

    /// Random init for the dimension chain `dims`, one activation per layer.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> DenseNet {
        assert!(dims.len() >= 2, "need at least input and output dims");
        assert_eq!(activations.len(), dims.len() - 1);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &act)| Layer::init(d[0], d[1], act, rng))
            .collect();
        DenseNet { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Deep copy; updates to either copy never affect the other.
    pub fn clone_parameters(&self) -> DenseNet {
        self.clone()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    /// Forward pass that records per-layer pre/post activations for a later
    /// backward pass.
    pub fn forward(&self, input: &[f64]) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut x: &[f64] = input;
        for layer in &self.layers {
            let mut z = Vec::with_capacity(layer.out_dim);
            for o in 0..layer.out_dim {
                z.push(dot(layer.row(o), x) + layer.bias[o]);
            }
            let y: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            post.push(y);
            x = post.last().expect("just pushed");
        }
        Ok(ForwardTrace {
            input: input.to_vec(),
            pre,
            post,
        })
    }

    /// Forward pass without keeping a trace.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut y = Vec::with_capacity(layer.out_dim);
            for o in 0..layer.out_dim {
                y.push(layer.activation.apply(dot(layer.row(o), &x) + layer.bias[o]));
            }
            x = y;
        }
        Ok(x)
    }

    /// Reverse-mode gradients of `output . output_gradient` with respect to
    /// every parameter and the input.
    pub fn backward(&self, trace: &ForwardTrace, output_gradient: &[f64]) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros(self);
        self.backward_into(trace, output_gradient, &mut grads)?;
        Ok(grads)
    }

    /// Like [`DenseNet::backward`] but accumulates into `grads` (additive,
    /// for minibatches) and returns this call's own input gradient.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        output_gradient: &[f64],
        grads: &mut GradientSet,
    ) -> Result<Vec<f64>> {
        if trace.pre.len() != self.layers.len() || trace.input.len() != self.input_dim() {
            return Err(Error::InvalidCall(
                "forward trace does not match this network".into(),
            ));
        }
        if output_gradient.len() != self.output_dim() {
            return Err(Error::ShapeMismatch {
                context: "output gradient",
                expected: self.output_dim(),
                actual: output_gradient.len(),
            });
        }
        if !grads.matches(self) {
            return Err(Error::InvalidCall(
                "gradient set does not match this network".into(),
            ));
        }

        let mut upstream = output_gradient.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x: &[f64] = if l == 0 { &trace.input } else { &trace.post[l - 1] };
            let mut downstream = vec![0.0; layer.in_dim];
            let wg = &mut grads.weights[l];
            for o in 0..layer.out_dim {
                let delta = upstream[o] * layer.activation.derivative(trace.pre[l][o]);
                grads.biases[l][o] += delta;
                if delta != 0.0 {
                    let wrow = &mut wg[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (g, &xi) in wrow.iter_mut().zip(x) {
                        *g += delta * xi;
                    }
                    for (d, &w) in downstream.iter_mut().zip(layer.row(o)) {
                        *d += delta * w;
                    }
                }
            }
            upstream = downstream;
        }
        for (acc, &g) in grads.input.iter_mut().zip(&upstream) {
            *acc += g;
        }
        Ok(upstream)
    }

    /// Serializes parameters as `{layer_index: {weights, bias, activation}}`.
    pub fn to_checkpoint_json(&self) -> String {
        let map: BTreeMap<String, LayerCheckpoint> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                (
                    i.to_string(),
                    LayerCheckpoint {
                        weights: l.weights.clone(),
                        bias: l.bias.clone(),
                        activation: l.activation,
                    },
                )
            })
            .collect();
        serde_json::to_string_pretty(&map).expect("finite parameters serialize")
    }

    /// Parses a checkpoint produced by [`DenseNet::to_checkpoint_json`].
    /// Round-trips are exact to the bit.
    pub fn from_checkpoint_json(json: &str) -> Result<DenseNet> {
        let map: BTreeMap<String, LayerCheckpoint> = serde_json::from_str(json)?;
        let mut indexed: Vec<(usize, LayerCheckpoint)> = Vec::with_capacity(map.len());
        for (key, ckpt) in map {
            let idx: usize = key
                .parse()
                .map_err(|_| Error::Parse(format!("bad layer index {key:?}")))?;
            indexed.push((idx, ckpt));
        }
        indexed.sort_by_key(|(i, _)| *i);
        for (pos, (idx, _)) in indexed.iter().enumerate() {
            if *idx != pos {
                return Err(Error::Parse(format!(
                    "layer indices not contiguous from 0 (found {idx} at position {pos})"
                )));
            }
        }
        let layers = indexed
            .into_iter()
            .map(|(_, c)| Layer::from_flat(c.weights, c.bias, c.activation))
            .collect::<Result<Vec<_>>>()?;
        DenseNet::new(layers)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<DenseNet> {
        let text = std::fs::read_to_string(path)?;
        DenseNet::from_checkpoint_json(&text)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

#[derive(Serialize, Deserialize)]
struct LayerCheckpoint {
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

/// Adam optimizer moments for one [`DenseNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m_weights: Vec<Vec<f64>>,
    v_weights: Vec<Vec<f64>>,
    m_biases: Vec<Vec<f64>>,
    v_biases: Vec<Vec<f64>>,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh optimizer state shaped like `net`.
    pub fn new(net: &DenseNet, learning_rate: f64) -> AdamState {
        let zw: Vec<Vec<f64>> = net
            .layers
            .iter()
            .map(|l| vec![0.0; l.weights.len()])
            .collect();
        let zb: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect();
        AdamState {
            m_weights: zw.clone(),
            v_weights: zw,
            m_biases: zb.clone(),
            v_biases: zb,
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn matches(&self, net: &DenseNet) -> bool {
        self.m_weights.len() == net.layers.len()
            && self
                .m_weights
                .iter()
                .zip(&net.layers)
                .all(|(m, l)| m.len() == l.weights.len())
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients instead of
/// clipping them.
pub fn adam_step(net: &mut DenseNet, grads: &GradientSet, state: &mut AdamState) -> Result<()> {
    if !grads.matches(net) || !state.matches(net) {
        return Err(Error::InvalidCall(
            "gradients or optimizer state do not match this network".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient at optimizer step {}",
            state.step_count + 1
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);

    let update = |param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            param[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    };

    for (l, layer) in net.layers.iter_mut().enumerate() {
        update(
            layer.weights_mut(),
            &grads.weights[l],
            &mut state.m_weights[l],
            &mut state.v_weights[l],
        );
        update(
            layer.bias_mut(),
            &grads.biases[l],
            &mut state.m_biases[l],
            &mut state.v_biases[l],
        );
    }
    Ok(())
}

/// Outcome of a finite-difference sweep over every parameter and input
/// component.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub components_checked: usize,
    pub components_skipped: usize,
    /// Human-readable label of the worst component.
    pub worst: String,
}

/// Pre-activations closer to zero than this sit on the ReLU kink, where a
/// central difference straddles the non-differentiable point; those
/// components are skipped.
const KINK_EPS: f64 = 1e-7;

/// Relative-error denominator offset; absolute deviations below
/// `tol * REL_FLOOR` are treated as finite-difference noise.
const REL_FLOOR: f64 = 1e-4;

/// Compares analytic gradients against central finite differences of the
/// scalar `sum(output)` at step `h`, for every parameter and every input
/// component. Passes iff the max relative error is within `tol`.
pub fn finite_difference_check(
    net: &DenseNet,
    input: &[f64],
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    if h <= 0.0 || tol <= 0.0 {
        return Err(Error::InvalidCall("h and tol must be positive".into()));
    }
    let trace = net.forward(input)?;
    let ones = vec![1.0; net.output_dim()];
    let grads = net.backward(&trace, &ones)?;
    let (max_rel_error, components_checked, components_skipped, worst) =
        fd_max_rel_error(net, input, h, &grads, &trace);
    Ok(FdReport {
        passed: max_rel_error <= tol,
        max_rel_error,
        components_checked,
        components_skipped,
        worst,
    })
}

/// Sweep helper shared by the public check (and by tests that corrupt the
/// analytic gradients on purpose).
fn fd_max_rel_error(
    net: &DenseNet,
    input: &[f64],
    h: f64,
    grads: &GradientSet,
    trace: &ForwardTrace,
) -> (f64, usize, usize, String) {
    let scalar = |n: &DenseNet, x: &[f64]| -> f64 {
        n.eval(x).expect("shapes fixed").iter().sum()
    };

    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    let mut checked = 0usize;
    let mut skipped = 0usize;

    let mut consider = |analytic: f64, numeric: f64, label: String| {
        let rel = (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + REL_FLOOR);
        if rel > max_rel {
            max_rel = rel;
            worst = label;
        }
    };

    let mut probe = net.clone();
    for l in 0..net.layers.len() {
        let activation = net.layers[l].activation;
        let in_dim = net.layers[l].in_dim;
        for o in 0..net.layers[l].out_dim {
            // A parameter of a neuron sitting on its ReLU kink has no
            // trustworthy finite difference.
            let on_kink =
                activation == Activation::Relu && trace.pre[l][o].abs() < KINK_EPS;
            for i in 0..=in_dim {
                let is_bias = i == in_dim;
                if on_kink {
                    skipped += 1;
                    continue;
                }
                let (orig, analytic) = if is_bias {
                    (net.layers[l].bias[o], grads.biases[l][o])
                } else {
                    (
                        net.layers[l].weights[o * in_dim + i],
                        grads.weights[l][o * in_dim + i],
                    )
                };
                let slot = |p: &mut DenseNet, v: f64| {
                    if is_bias {
                        p.layers[l].bias[o] = v;
                    } else {
                        p.layers[l].weights[o * in_dim + i] = v;
                    }
                };
                slot(&mut probe, orig + h);
                let plus = scalar(&probe, input);
                slot(&mut probe, orig - h);
                let minus = scalar(&probe, input);
                slot(&mut probe, orig);
                let numeric = (plus - minus) / (2.0 * h);
                checked += 1;
                let kind = if is_bias { "bias" } else { "weight" };
                consider(analytic, numeric, format!("layer {l} {kind} ({o},{i})"));
            }
        }
    }

    let mut x = input.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = scalar(net, &x);
        x[i] = orig - h;
        let minus = scalar(net, &x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        checked += 1;
        consider(grads.input[i], numeric, format!("input ({i})"));
    }

    (max_rel, checked, skipped, worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn single(w: f64, b: f64, act: Activation) -> DenseNet {
        DenseNet::new(vec![Layer::new(vec![vec![w]], vec![b], act).unwrap()]).unwrap()
    }

    #[test]
    fn forward_affine_identity() {
        let net = single(2.0, 1.0, Activation::Identity);
        let trace = net.forward(&[3.0]).unwrap();
        assert_eq!(trace.output(), &[7.0]);
    }

    #[test]
    fn forward_relu_clamps() {
        let net = single(1.0, 0.0, Activation::Relu);
        let trace = net.forward(&[-2.0]).unwrap();
        assert_eq!(trace.output(), &[0.0]);
    }

    #[test]
    fn forward_two_layer_hand_computed() {
        // layer 1: [[1], [-1]] on input 2 -> [2, -2] -> relu [2, 0]
        // layer 2: [1, 1] + 0.5 -> 2.5
        let l1 = Layer::new(vec![vec![1.0], vec![-1.0]], vec![0.0, 0.0], Activation::Relu).unwrap();
        let l2 = Layer::new(vec![vec![1.0, 1.0]], vec![0.5], Activation::Identity).unwrap();
        let net = DenseNet::new(vec![l1, l2]).unwrap();
        assert_eq!(net.forward(&[2.0]).unwrap().output(), &[2.5]);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let net = single(1.0, 0.0, Activation::Identity);
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_linear_layer() {
        let w = 1.75;
        let net = single(w, 0.25, Activation::Identity);
        let trace = net.forward(&[3.0]).unwrap();
        let grads = net.backward(&trace, &[1.0]).unwrap();
        assert_eq!(grads.weight_grads(0), &[3.0]);
        assert_eq!(grads.bias_grads(0), &[1.0]);
        assert_eq!(grads.input_gradient(), &[w]);
    }

    #[test]
    fn backward_dead_relu_is_zero() {
        let net = single(1.0, 0.0, Activation::Relu);
        let trace = net.forward(&[-2.0]).unwrap();
        let grads = net.backward(&trace, &[1.0]).unwrap();
        assert_eq!(grads.weight_grads(0), &[0.0]);
        assert_eq!(grads.bias_grads(0), &[0.0]);
        assert_eq!(grads.input_gradient(), &[0.0]);
    }

    #[test]
    fn backward_rejects_bad_output_gradient() {
        let net = single(1.0, 0.0, Activation::Identity);
        let trace = net.forward(&[1.0]).unwrap();
        assert!(net.backward(&trace, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_small_net() {
        let mut r = rng(7);
        let net = DenseNet::init(&[3, 8, 2], &[Activation::Relu, Activation::Identity], &mut r);
        let input: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let report = finite_difference_check(&net, &input, 1e-5, 1e-4).unwrap();
        assert!(
            report.passed,
            "max rel error {} at {}",
            report.max_rel_error, report.worst
        );
    }

    #[test]
    fn backward_accumulates_additively() {
        let mut r = rng(11);
        let net = DenseNet::init(&[4, 3], &[Activation::Identity], &mut r);
        let a: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let dy = vec![1.0, -2.0, 0.5];

        let ga = net.backward(&net.forward(&a).unwrap(), &dy).unwrap();
        let gb = net.backward(&net.forward(&b).unwrap(), &dy).unwrap();
        let mut acc = GradientSet::zeros(&net);
        net.backward_into(&net.forward(&a).unwrap(), &dy, &mut acc)
            .unwrap();
        net.backward_into(&net.forward(&b).unwrap(), &dy, &mut acc)
            .unwrap();
        for i in 0..acc.weight_grads(0).len() {
            let expect = ga.weight_grads(0)[i] + gb.weight_grads(0)[i];
            assert!((acc.weight_grads(0)[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut net = single(0.0, 0.0, Activation::Identity);
        let mut state = AdamState::new(&net, 5e-4);
        let mut grads = GradientSet::zeros(&net);
        grads.weights[0][0] = 1.0;
        adam_step(&mut net, &grads, &mut state).unwrap();
        let theta = net.layers()[0].weights()[0];
        assert!((theta - (-5e-4)).abs() < 1e-10, "theta = {theta}");
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut net = single(0.3, -0.1, Activation::Identity);
        let before = net.clone();
        let mut state = AdamState::new(&net, 5e-4);
        let grads = GradientSet::zeros(&net);
        adam_step(&mut net, &grads, &mut state).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_descends_on_repeated_positive_gradient() {
        let mut net = single(0.0, 0.0, Activation::Identity);
        let mut state = AdamState::new(&net, 5e-4);
        let mut grads = GradientSet::zeros(&net);
        grads.weights[0][0] = 1.0;
        let mut prev = net.layers()[0].weights()[0];
        for _ in 0..2 {
            adam_step(&mut net, &grads, &mut state).unwrap();
            let now = net.layers()[0].weights()[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut net = single(0.0, 0.0, Activation::Identity);
        let mut state = AdamState::new(&net, 5e-4);
        let mut grads = GradientSet::zeros(&net);
        grads.weights[0][0] = f64::NAN;
        assert!(matches!(
            adam_step(&mut net, &grads, &mut state),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn clone_is_isolated_from_source_updates() {
        let mut r = rng(3);
        let mut net = DenseNet::init(&[2, 2], &[Activation::Identity], &mut r);
        let snapshot = net.clone_parameters();
        let x = [0.7, -0.4];
        let before = snapshot.eval(&x).unwrap();

        let mut state = AdamState::new(&net, 0.1);
        let trace = net.forward(&x).unwrap();
        let grads = net.backward(&trace, &[1.0, 1.0]).unwrap();
        adam_step(&mut net, &grads, &mut state).unwrap();

        assert_eq!(snapshot.eval(&x).unwrap(), before);
        assert_ne!(net.eval(&x).unwrap(), before);
    }

    #[test]
    fn clone_of_clone_equals_original() {
        let mut r = rng(4);
        let net = DenseNet::init(&[3, 5, 1], &[Activation::Relu, Activation::Identity], &mut r);
        let copy = net.clone_parameters().clone_parameters();
        assert_eq!(copy, net);
        let x = [0.1, 0.2, 0.3];
        assert_eq!(copy.eval(&x).unwrap(), net.eval(&x).unwrap());
    }

    #[test]
    fn fd_check_linear_net_is_tight() {
        let mut r = rng(5);
        let net = DenseNet::init(&[4, 3], &[Activation::Identity], &mut r);
        let input: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let report = finite_difference_check(&net, &input, 1e-5, 1e-6).unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn fd_check_hidden_relu_stack() {
        let mut r = rng(6);
        let net = DenseNet::init(
            &[13, 32, 64, 5],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            &mut r,
        );
        let input: Vec<f64> = (0..13).map(|_| r.gen_range(-1.0..1.0)).collect();
        let report = finite_difference_check(&net, &input, 1e-5, 1e-4).unwrap();
        assert!(
            report.passed,
            "max rel error {} at {}",
            report.max_rel_error, report.worst
        );
    }

    #[test]
    fn fd_check_detects_corrupted_gradient() {
        let mut r = rng(8);
        let net = DenseNet::init(&[3, 4, 2], &[Activation::Relu, Activation::Identity], &mut r);
        let input: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let trace = net.forward(&input).unwrap();
        let ones = vec![1.0; 2];
        let mut grads = net.backward(&trace, &ones).unwrap();

        // Double the largest weight gradient; the sweep must notice.
        let (mut l_max, mut i_max, mut g_max) = (0, 0, 0.0f64);
        for l in 0..2 {
            for (i, g) in grads.weights[l].iter().enumerate() {
                if g.abs() > g_max.abs() {
                    (l_max, i_max, g_max) = (l, i, *g);
                }
            }
        }
        grads.weights[l_max][i_max] = 2.0 * g_max;
        let (max_rel, _, _, _) = fd_max_rel_error(&net, &input, 1e-5, &grads, &trace);
        assert!(max_rel > 1e-4, "corruption not detected: {max_rel}");
    }

    #[test]
    fn fd_check_rejects_bad_arguments() {
        let net = single(1.0, 0.0, Activation::Identity);
        assert!(finite_difference_check(&net, &[1.0], 0.0, 1e-4).is_err());
        assert!(finite_difference_check(&net, &[1.0], 1e-5, -1.0).is_err());
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let mut r = rng(9);
        let net = DenseNet::init(
            &[5, 7, 3],
            &[Activation::Relu, Activation::Identity],
            &mut r,
        );
        let json = net.to_checkpoint_json();
        let restored = DenseNet::from_checkpoint_json(&json).unwrap();
        assert_eq!(restored, net);
    }

    #[test]
    fn checkpoint_rejects_gap_in_layer_indices() {
        let net = single(1.0, 0.0, Activation::Relu);
        let json = net.to_checkpoint_json().replace("\"0\"", "\"1\"");
        assert!(matches!(
            DenseNet::from_checkpoint_json(&json),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn rejects_unchained_layer_dimensions() {
        let l1 = Layer::new(vec![vec![1.0]], vec![0.0], Activation::Identity).unwrap();
        let l2 = Layer::new(vec![vec![1.0, 1.0]], vec![0.0], Activation::Identity).unwrap();
        assert!(DenseNet::new(vec![l1, l2]).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut r = rng(10);
        let net = DenseNet::init(&[16, 8], &[Activation::Relu], &mut r);
        let limit = 1.0 / 4.0;
        assert!(net.layers()[0].weights().iter().all(|w| w.abs() <= limit));
        assert!(net.layers()[0].bias().iter().all(|&b| b == 0.0));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn forward_is_deterministic(seed in 0u64..1000, x0 in -3.0f64..3.0, x1 in -3.0f64..3.0) {
                let mut r = rng(seed);
                let net = DenseNet::init(&[2, 6, 2], &[Activation::Relu, Activation::Identity], &mut r);
                let a = net.forward(&[x0, x1]).unwrap();
                let b = net.forward(&[x0, x1]).unwrap();
                prop_assert_eq!(a.output(), b.output());
            }

            #[test]
            fn checkpoint_round_trip_random_nets(seed in 0u64..1000) {
                let mut r = rng(seed);
                let net = DenseNet::init(&[3, 4, 2], &[Activation::Relu, Activation::Identity], &mut r);
                let restored = DenseNet::from_checkpoint_json(&net.to_checkpoint_json()).unwrap();
                prop_assert_eq!(restored, net);
            }
        }
    }
}
