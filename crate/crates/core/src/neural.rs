//! Fully connected Q-network engine: forward and reverse passes, mean
//! squared error, Adam, parameter copies and a finite-difference gradient
//! check. Double precision throughout.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// One affine layer; `weights` has shape `[inputs, outputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Rectified hidden layers, identity output layer.
#[derive(Clone, Debug)]
pub struct QNetwork {
    layers: Vec<Dense>,
    generation: u64,
}

impl PartialEq for QNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Layer activations recorded by [`QNetwork::forward_cached`]: the input,
/// every rectified hidden output, and the network output.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds at least the input")
    }
}

/// Parameter-shaped gradient (or moment) buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &QNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    fn shape_matches(&self, net: &QNetwork) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.dim() == l.weights.dim() && g.bias.dim() == l.bias.dim())
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|&v| v == 0.0) && l.bias.iter().all(|&v| v == 0.0))
    }
}

impl QNetwork {
    /// He-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(invalid("network needs at least an input and an output layer"));
        }
        if sizes.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let limit = (6.0 / w[0] as f64).sqrt();
                Dense {
                    weights: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-limit..limit)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            generation: next_generation(),
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.ncols() != l.bias.len() || l.weights.nrows() == 0 || l.bias.is_empty() {
                return Err(invalid(format!("layer {i}: weight/bias shapes disagree")));
            }
            if i > 0 && layers[i - 1].bias.len() != l.weights.nrows() {
                return Err(invalid(format!("layer {i}: input width does not match previous layer")));
            }
        }
        let net = Self {
            layers,
            generation: next_generation(),
        };
        if !net.is_finite() {
            return Err(invalid("network parameters must be finite"));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.bias.len()))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].bias.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                actual: cols,
            });
        }
        Ok(())
    }

    fn trace(&self, input: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_owned());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.weights);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Q-values for a single state.
    pub fn forward(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_input(state.len())?;
        let x = ArrayView2::from_shape((1, state.len()), state).expect("row view");
        let out = self.trace(x).pop().expect("output layer");
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Q-values for a batch of states, one per row.
    pub fn forward_batch(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(states.ncols())?;
        Ok(self.trace(states).pop().expect("output layer"))
    }

    pub fn forward_cached(&self, states: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(states.ncols())?;
        Ok(ForwardCache {
            generation: self.generation,
            activations: self.trace(states),
        })
    }

    /// Reverse-mode gradients of every parameter given the gradient of the
    /// loss with respect to the network output.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<Gradients> {
        if cache.generation != self.generation || cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::StaleCache);
        }
        if upstream.dim() != cache.output().dim() {
            return Err(Error::DimensionMismatch {
                context: "upstream gradient",
                expected: cache.output().len(),
                actual: upstream.len(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[i];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut next = delta.dot(&layer.weights.t());
                Zip::from(&mut next).and(input).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = next;
            }
            grads.push(Dense { weights: gw, bias: gb });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Makes `self` a bitwise copy of `src`.
    pub fn copy_from(&mut self, src: &QNetwork) -> Result<()> {
        if self.sizes() != src.sizes() {
            return Err(invalid(format!(
                "cannot copy {:?} parameters into {:?} network",
                src.sizes(),
                self.sizes()
            )));
        }
        for (d, s) in self.layers.iter_mut().zip(&src.layers) {
            d.weights.assign(&s.weights);
            d.bias.assign(&s.bias);
        }
        self.generation = next_generation();
        Ok(())
    }

    pub fn params_mut(&mut self) -> &mut [Dense] {
        self.generation = next_generation();
        &mut self.layers
    }
}

pub fn copy_params(src: &QNetwork, dst: &mut QNetwork) -> Result<()> {
    dst.copy_from(src)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            context: "mse target",
            expected: pred.len(),
            actual: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(invalid("mse of empty vectors"));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: Gradients,
    pub second_moment: Gradients,
}

impl AdamState {
    pub fn new(net: &QNetwork, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: Gradients::zeros_like(net),
            second_moment: Gradients::zeros_like(net),
        }
    }
}

/// One bias-corrected Adam update. Fails if any parameter becomes non-finite.
pub fn adam_step(net: &mut QNetwork, grads: &Gradients, adam: &mut AdamState) -> Result<()> {
    if !grads.shape_matches(net) || !adam.first_moment.shape_matches(net) || !adam.second_moment.shape_matches(net) {
        return Err(invalid("gradient or optimizer state shape does not match the network"));
    }
    adam.step += 1;
    let (b1, b2, eps, lr) = (adam.beta1, adam.beta2, adam.epsilon, adam.learning_rate);
    let c1 = 1.0 - b1.powf(adam.step as f64);
    let c2 = 1.0 - b2.powf(adam.step as f64);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: &f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    let layers = net.params_mut();
    for (((layer, g), m), v) in layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut adam.first_moment.layers)
        .zip(&mut adam.second_moment.layers)
    {
        Zip::from(&mut layer.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .and(&g.weights)
            .for_each(update);
        Zip::from(&mut layer.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(update);
    }
    if !net.is_finite() {
        return Err(Error::InvalidState("non-finite network parameters after Adam update".into()));
    }
    Ok(())
}

/// Serializable parameters; weights are row-major `[inputs][outputs]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn dense_to_params(d: &Dense) -> LayerParams {
    LayerParams {
        inputs: d.weights.nrows(),
        outputs: d.weights.ncols(),
        weights: d.weights.iter().copied().collect(),
        bias: d.bias.to_vec(),
    }
}

fn params_to_dense(p: &LayerParams) -> Result<Dense> {
    let weights = Array2::from_shape_vec((p.inputs, p.outputs), p.weights.clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("weight array: {e}")))?;
    if p.bias.len() != p.outputs {
        return Err(Error::CorruptCheckpoint("bias length does not match layer width".into()));
    }
    Ok(Dense {
        weights,
        bias: Array1::from(p.bias.clone()),
    })
}

impl QNetwork {
    pub fn to_params(&self) -> Vec<LayerParams> {
        self.layers.iter().map(dense_to_params).collect()
    }

    pub fn from_params(params: &[LayerParams]) -> Result<Self> {
        Self::from_layers(params.iter().map(params_to_dense).collect::<Result<_>>()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: Vec<LayerParams>,
    pub second_moment: Vec<LayerParams>,
}

impl AdamState {
    pub fn to_params(&self) -> AdamParams {
        AdamParams {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            step: self.step,
            first_moment: self.first_moment.layers.iter().map(dense_to_params).collect(),
            second_moment: self.second_moment.layers.iter().map(dense_to_params).collect(),
        }
    }

    pub fn from_params(p: &AdamParams, net: &QNetwork) -> Result<Self> {
        let load = |layers: &[LayerParams]| -> Result<Gradients> {
            let g = Gradients {
                layers: layers.iter().map(params_to_dense).collect::<Result<_>>()?,
            };
            if !g.shape_matches(net) {
                return Err(Error::CorruptCheckpoint("optimizer moments do not match network".into()));
            }
            Ok(g)
        };
        Ok(Self {
            learning_rate: p.learning_rate,
            beta1: p.beta1,
            beta2: p.beta2,
            epsilon: p.epsilon,
            step: p.step,
            first_moment: load(&p.first_moment)?,
            second_moment: load(&p.second_moment)?,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Perturbations that flipped a rectifier and were excluded.
    pub skipped_kinks: usize,
}

/// Gradients smaller than this are compared on an absolute scale.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compares backpropagated gradients of the mean squared error against
/// central finite differences for up to `per_layer` randomly chosen
/// weights and biases of every layer.
pub fn gradient_check<R: Rng + ?Sized>(
    net: &QNetwork,
    inputs: &Array2<f64>,
    targets: &Array2<f64>,
    step: f64,
    per_layer: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let loss_of = |n: &QNetwork| -> Result<(f64, Vec<Array2<f64>>)> {
        let acts = n.trace(inputs.view());
        let out = acts.last().expect("output");
        let (loss, _) = mse_loss(out.as_slice().expect("contiguous"), targets.as_slice().expect("contiguous"))?;
        Ok((loss, acts))
    };
    let cache = net.forward_cached(inputs.view())?;
    let out = cache.output();
    let (_, grad) = mse_loss(out.as_slice().expect("contiguous"), targets.as_slice().expect("contiguous"))?;
    let upstream = Array2::from_shape_vec(out.raw_dim(), grad).expect("same shape");
    let analytic = net.backward(&cache, &upstream)?;
    let base_pattern = rectifier_pattern(&cache.activations);

    let mut report = GradCheckReport::default();
    let mut probe = net.clone();
    for li in 0..net.layers.len() {
        let (rows, cols) = net.layers[li].weights.dim();
        let mut coords: Vec<(Option<(usize, usize)>, usize)> = Vec::new();
        for _ in 0..per_layer.min(rows * cols) {
            coords.push((Some((rng.random_range(0..rows), rng.random_range(0..cols))), 0));
        }
        for _ in 0..per_layer.min(cols) {
            coords.push((None, rng.random_range(0..cols)));
        }
        for (w, b) in coords {
            let original = match w {
                Some(ij) => net.layers[li].weights[ij],
                None => net.layers[li].bias[b],
            };
            let mut eval = |value: f64| -> Result<(f64, Vec<bool>)> {
                let layer = &mut probe.params_mut()[li];
                match w {
                    Some(ij) => layer.weights[ij] = value,
                    None => layer.bias[b] = value,
                }
                let (loss, acts) = loss_of(&probe)?;
                Ok((loss, rectifier_pattern(&acts)))
            };
            let (plus, p_pat) = eval(original + step)?;
            let (minus, m_pat) = eval(original - step)?;
            eval(original)?;
            if p_pat != base_pattern || m_pat != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let exact = match w {
                Some(ij) => analytic.layers[li].weights[ij],
                None => analytic.layers[li].bias[b],
            };
            let scale = exact.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            report.max_relative_error = report.max_relative_error.max((exact - numeric).abs() / scale);
            report.checked += 1;
        }
    }
    Ok(report)
}

fn rectifier_pattern(acts: &[Array2<f64>]) -> Vec<bool> {
    acts[1..acts.len() - 1].iter().flat_map(|a| a.iter().map(|&v| v > 0.0)).collect()
}
