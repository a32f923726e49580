//! Small classifiers with hand-derived backpropagation.
//!
//! Every architecture is a stack of affine maps `z = W a + b`; hidden maps are
//! followed by an activation and the last map produces logits for a softmax
//! cross-entropy loss. Parameters are laid out as `[W_1, b_1, ..., W_L, b_L]`,
//! each `W` stored row-major with shape `(out, in)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{LayeredParams, Layout, Purpose, SeededRng, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and output `a`.
    /// ReLU uses the subgradient 0 at the kink.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Architecture {
    LinearSoftmax,
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub class_count: usize,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, class_count: usize) -> Result<Self> {
        Self::new(Architecture::LinearSoftmax, input_dim, class_count)
    }

    pub fn mlp(
        input_dim: usize,
        hidden: Vec<usize>,
        activation: Activation,
        class_count: usize,
    ) -> Result<Self> {
        Self::new(Architecture::Mlp { hidden, activation }, input_dim, class_count)
    }

    pub fn new(architecture: Architecture, input_dim: usize, class_count: usize) -> Result<Self> {
        let spec = Self {
            architecture,
            input_dim,
            class_count,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.class_count < 2 {
            return Err(Error::invalid("class_count must be at least 2"));
        }
        if let Architecture::Mlp { hidden, .. } = &self.architecture {
            if hidden.contains(&0) {
                return Err(Error::invalid("hidden layer sizes must be positive"));
            }
        }
        Ok(())
    }

    /// Widths of the activations: input, hidden..., logits.
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        if let Architecture::Mlp { hidden, .. } = &self.architecture {
            w.extend_from_slice(hidden);
        }
        w.push(self.class_count);
        w
    }

    fn activation(&self) -> Option<Activation> {
        match &self.architecture {
            Architecture::LinearSoftmax => None,
            Architecture::Mlp { activation, .. } => Some(*activation),
        }
    }

    pub fn layout(&self) -> Layout {
        let widths = self.widths();
        let dims = widths
            .windows(2)
            .flat_map(|w| [w[0] * w[1], w[1]])
            .collect();
        Layout::new(dims).expect("validated spec has nonempty layers")
    }

    /// Glorot-uniform weights and biases uniform in `±1/√fan_in`, drawn from
    /// the `Init` stream. Biases start nonzero because a layerwise step
    /// scaled by `‖θ_i‖` never moves a zero layer.
    pub fn init_params(&self, seed: u64) -> LayeredParams {
        let mut rng = SeededRng::new(seed, StreamId::new(0, 0, Purpose::Init));
        let widths = self.widths();
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layers.push((0..fan_in * fan_out).map(|_| rng.uniform_in(-a, a)).collect());
            let c = 1.0 / (fan_in as f64).sqrt();
            layers.push((0..fan_out).map(|_| rng.uniform_in(-c, c)).collect());
        }
        LayeredParams::from_layers(layers).expect("nonempty layers")
    }

    fn check_params(&self, theta: &LayeredParams) -> Result<()> {
        if theta.layout() != self.layout() {
            return Err(Error::invalid(format!(
                "parameter layout {:?} does not match model layout {:?}",
                theta.layout().dims(),
                self.layout().dims()
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "input has length {}, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.class_count {
            return Err(Error::invalid(format!(
                "label {y} out of range for {} classes",
                self.class_count
            )));
        }
        Ok(())
    }
}

/// A batch of labeled inputs. `is_pseudo` marks samples whose label came
/// from a base model rather than ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub is_pseudo: Vec<bool>,
}

impl LabeledBatch {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let n = inputs.len();
        Self::with_flags(inputs, labels, vec![false; n])
    }

    pub fn with_flags(inputs: Vec<Vec<f64>>, labels: Vec<usize>, is_pseudo: Vec<bool>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("batch must be nonempty"));
        }
        if inputs.len() != labels.len() || inputs.len() != is_pseudo.len() {
            return Err(Error::invalid(format!(
                "batch has {} inputs, {} labels, {} flags",
                inputs.len(),
                labels.len(),
                is_pseudo.len()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            is_pseudo,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

struct Forward {
    /// Activations per level; `acts[0]` is the input, the last entry the logits.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of hidden levels (`pre[l]` feeds `acts[l + 1]`).
    pre: Vec<Vec<f64>>,
}

fn forward(spec: &ModelSpec, theta: &LayeredParams, x: &[f64]) -> Forward {
    let widths = spec.widths();
    let maps = widths.len() - 1;
    let act = spec.activation();
    let mut acts = Vec::with_capacity(widths.len());
    let mut pre = Vec::with_capacity(maps);
    acts.push(x.to_vec());
    for l in 0..maps {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let w = theta.layer(2 * l);
        let b = theta.layer(2 * l + 1);
        let a_in = &acts[l];
        let z: Vec<f64> = (0..n_out)
            .map(|r| {
                let row = &w[r * n_in..(r + 1) * n_in];
                b[r] + row.iter().zip(a_in).map(|(wi, ai)| wi * ai).sum::<f64>()
            })
            .collect();
        if l + 1 < maps {
            let f = act.expect("hidden level implies an activation");
            acts.push(z.iter().map(|&v| f.apply(v)).collect());
            pre.push(z);
        } else {
            acts.push(z);
        }
    }
    Forward { acts, pre }
}

/// Returns `(loss, softmax probabilities)` with max-shifted logits.
fn softmax_xent(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = m + sum.ln() - logits[y];
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

/// Backpropagates one sample. Parameter gradients are added into `acc`;
/// returns the loss and, when requested, the input gradient.
fn backward(
    spec: &ModelSpec,
    theta: &LayeredParams,
    fwd: &Forward,
    y: usize,
    mut acc: Option<&mut LayeredParams>,
    want_input: bool,
) -> (f64, Option<Vec<f64>>) {
    let widths = spec.widths();
    let maps = widths.len() - 1;
    let act = spec.activation();
    let (loss, mut delta) = softmax_xent(&fwd.acts[maps], y);
    delta[y] -= 1.0;

    for l in (0..maps).rev() {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let a_in = &fwd.acts[l];
        if let Some(acc) = acc.as_deref_mut() {
            let gw = &mut acc.layers_mut()[2 * l];
            for r in 0..n_out {
                let d = delta[r];
                for (g, a) in gw[r * n_in..(r + 1) * n_in].iter_mut().zip(a_in) {
                    *g += d * a;
                }
            }
            let gb = &mut acc.layers_mut()[2 * l + 1];
            for (g, d) in gb.iter_mut().zip(&delta) {
                *g += d;
            }
        }
        if l == 0 && !want_input {
            break;
        }
        let w = theta.layer(2 * l);
        let mut back = vec![0.0; n_in];
        for r in 0..n_out {
            let d = delta[r];
            for (bk, wi) in back.iter_mut().zip(&w[r * n_in..(r + 1) * n_in]) {
                *bk += wi * d;
            }
        }
        if l == 0 {
            return (loss, Some(back));
        }
        let f = act.expect("hidden level implies an activation");
        let z = &fwd.pre[l - 1];
        let a = &fwd.acts[l];
        delta = back
            .iter()
            .zip(z.iter().zip(a))
            .map(|(bk, (&zv, &av))| bk * f.derivative(zv, av))
            .collect();
    }
    (loss, None)
}

fn check_batch(spec: &ModelSpec, theta: &LayeredParams, batch: &LabeledBatch) -> Result<()> {
    spec.check_params(theta)?;
    if batch.is_empty() {
        return Err(Error::invalid("batch must be nonempty"));
    }
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        spec.check_input(x)?;
        spec.check_label(y)?;
    }
    Ok(())
}

pub fn logits(spec: &ModelSpec, theta: &LayeredParams, x: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(theta)?;
    spec.check_input(x)?;
    Ok(forward(spec, theta, x).acts.pop().expect("logits level"))
}

/// Mean softmax cross-entropy over the batch.
pub fn loss(spec: &ModelSpec, theta: &LayeredParams, batch: &LabeledBatch) -> Result<f64> {
    check_batch(spec, theta, batch)?;
    let maps = spec.widths().len() - 1;
    let total: f64 = batch
        .inputs
        .iter()
        .zip(&batch.labels)
        .map(|(x, &y)| softmax_xent(&forward(spec, theta, x).acts[maps], y).0)
        .sum();
    Ok(total / batch.len() as f64)
}

/// Mean loss and its gradient with respect to the parameters.
pub fn loss_and_grad_theta(
    spec: &ModelSpec,
    theta: &LayeredParams,
    batch: &LabeledBatch,
) -> Result<(f64, LayeredParams)> {
    check_batch(spec, theta, batch)?;
    let mut grad = LayeredParams::zeros_like(theta);
    let mut total = 0.0;
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        let fwd = forward(spec, theta, x);
        total += backward(spec, theta, &fwd, y, Some(&mut grad), false).0;
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad))
}

pub fn grad_theta(spec: &ModelSpec, theta: &LayeredParams, batch: &LabeledBatch) -> Result<LayeredParams> {
    loss_and_grad_theta(spec, theta, batch).map(|(_, g)| g)
}

/// Gradient of the single-sample loss with respect to the input.
pub fn grad_input(spec: &ModelSpec, theta: &LayeredParams, x: &[f64], y: usize) -> Result<Vec<f64>> {
    spec.check_params(theta)?;
    spec.check_input(x)?;
    spec.check_label(y)?;
    let fwd = forward(spec, theta, x);
    Ok(backward(spec, theta, &fwd, y, None, true)
        .1
        .expect("input gradient requested"))
}

/// Argmax of the logits, ties broken toward the smallest class index.
pub fn predict(spec: &ModelSpec, theta: &LayeredParams, x: &[f64]) -> Result<usize> {
    let z = logits(spec, theta, x)?;
    let mut best = 0;
    for (c, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = c;
        }
    }
    Ok(best)
}
