//! Feed-forward networks with hand-written reverse-mode gradients.
//!
//! The topology is fixed: a stack of dense layers with one activation
//! between them and a linear output. An optional sinusoidal embedding of
//! the diffusion step is appended to the input. Gradients are available
//! with respect to both parameters and the (non-embedding) input, which is
//! what the return guide needs during sampling.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Mish,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Mish => x * softplus(x).tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Mish => {
                let t = softplus(x).tanh();
                t + x * (1.0 - t * t) * sigmoid(x)
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Architecture of a network: `widths` lists every layer's output width, the
/// last of which is the output dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Width of the diffusion-step embedding appended to the input; 0 disables it.
    pub step_embed_dim: usize,
}

impl NetSpec {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        step_embed_dim: usize,
    ) -> Self {
        let mut widths = hidden.to_vec();
        widths.push(output_dim);
        Self {
            input_dim,
            widths,
            output_dim,
            activation,
            step_embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(RadError::Config("network needs at least one layer".into()));
        }
        if self.input_dim == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(RadError::Config("layer widths must be positive".into()));
        }
        if self.widths.last() != Some(&self.output_dim) {
            return Err(RadError::Config(format!(
                "last layer width {:?} does not match output dim {}",
                self.widths.last(),
                self.output_dim
            )));
        }
        if self.step_embed_dim % 2 != 0 {
            return Err(RadError::Config("step embedding dim must be even".into()));
        }
        Ok(())
    }

    /// Width of the first layer's input, embedding included.
    pub fn total_input(&self) -> usize {
        self.input_dim + self.step_embed_dim
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut fan_in = self.total_input();
        self.widths
            .iter()
            .map(|&w| {
                let shape = (fan_in, w);
                fan_in = w;
                shape
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`, applied as `x . W + b`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Weights and biases of every layer. Also used to hold gradients and
/// optimizer moments, which share the same shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub layers: Vec<Layer>,
}

impl NetParams {
    pub fn zeros(spec: &NetSpec) -> Self {
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Layer {
                weight: Array2::zeros((i, o)),
                bias: Array1::zeros(o),
            })
            .collect();
        Self { layers }
    }

    /// Uniform fan-in scaled initialization. Hidden layers use the Kaiming
    /// bound `sqrt(6 / fan_in)`; the output layer uses `sqrt(3 / fan_in)` so
    /// an untrained network starts near unit output scale. Biases start at 0.
    pub fn init(spec: &NetSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = spec.layer_shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| {
                let gain = if l == last { 3.0 } else { 6.0 };
                let bound = (gain / i as f64).sqrt();
                let weight = Array2::from_shape_fn((i, o), |_| rng.random_range(-bound..bound));
                Layer {
                    weight,
                    bias: Array1::zeros(o),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    pub fn matches(&self, spec: &NetSpec) -> bool {
        let shapes = spec.layer_shapes();
        shapes.len() == self.layers.len()
            && shapes
                .iter()
                .zip(&self.layers)
                .all(|(&(i, o), l)| l.weight.dim() == (i, o) && l.bias.len() == o)
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().chain(l.bias.iter()).map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight *= c;
            l.bias *= c;
        }
    }

    pub fn add_assign(&mut self, other: &NetParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    /// Row-major weights then bias, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn from_flat(spec: &NetSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.param_count() {
            return Err(RadError::DimensionMismatch {
                expected: spec.param_count(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        let mut layers = Vec::new();
        for (i, o) in spec.layer_shapes() {
            let weight = Array2::from_shape_vec((i, o), flat[offset..offset + i * o].to_vec())
                .expect("length checked above");
            offset += i * o;
            let bias = Array1::from(flat[offset..offset + o].to_vec());
            offset += o;
            layers.push(Layer { weight, bias });
        }
        Ok(Self { layers })
    }
}

/// Sinusoidal embedding of a diffusion step, laid out as interleaved
/// `[sin(i f_0), cos(i f_0), sin(i f_1), cos(i f_1), ...]` with geometric
/// frequencies `f_k = 10000^(-k / (dim / 2))`.
///
/// Panics if `dim` is odd.
pub fn sinusoidal_step_embedding(step: usize, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "step embedding dim must be even, got {dim}");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = step as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Intermediate values kept from a batched forward pass.
pub struct ForwardCache {
    /// Input to each layer (the first is the embedded network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: NetSpec,
    pub params: NetParams,
}

impl Mlp {
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = NetParams::init(&spec, seed);
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: NetSpec, params: NetParams) -> Result<Self> {
        spec.validate()?;
        if !params.matches(&spec) {
            return Err(RadError::Checkpoint("parameter shapes do not match spec".into()));
        }
        Ok(Self { spec, params })
    }

    fn embed_batch(&self, inputs: ArrayView2<f64>, steps: Option<&[usize]>) -> Result<Array2<f64>> {
        let (rows, cols) = inputs.dim();
        if cols != self.spec.input_dim {
            return Err(RadError::DimensionMismatch {
                expected: self.spec.input_dim,
                got: cols,
            });
        }
        let e = self.spec.step_embed_dim;
        if e == 0 {
            return Ok(inputs.to_owned());
        }
        let steps = steps.ok_or_else(|| {
            RadError::InvalidArgument("network expects a diffusion step index".into())
        })?;
        if steps.len() != rows {
            return Err(RadError::DimensionMismatch {
                expected: rows,
                got: steps.len(),
            });
        }
        let mut x = Array2::zeros((rows, cols + e));
        for (r, &step) in steps.iter().enumerate() {
            let mut row = x.row_mut(r);
            for c in 0..cols {
                row[c] = inputs[[r, c]];
            }
            for (k, v) in sinusoidal_step_embedding(step, e).into_iter().enumerate() {
                row[cols + k] = v;
            }
        }
        Ok(x)
    }

    pub fn forward_batch(
        &self,
        inputs: ArrayView2<f64>,
        steps: Option<&[usize]>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let mut x = self.embed_batch(inputs, steps)?;
        let last = self.params.layers.len() - 1;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(last + 1),
            pre: Vec::with_capacity(last + 1),
        };
        for (l, layer) in self.params.layers.iter().enumerate() {
            let z = x.dot(&layer.weight) + &layer.bias;
            let next = if l == last {
                z.clone()
            } else {
                z.mapv(|v| self.spec.activation.apply(v))
            };
            cache.inputs.push(x);
            cache.pre.push(z);
            x = next;
        }
        Ok((x, cache))
    }

    /// Reverse pass for the scalar `sum(upstream * output)`. Returns parameter
    /// gradients and the gradient with respect to the raw input (embedding
    /// columns excluded).
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(NetParams, Array2<f64>)> {
        let out_shape = cache.pre.last().map(|z| z.dim()).unwrap_or((0, 0));
        if upstream.dim() != out_shape {
            return Err(RadError::DimensionMismatch {
                expected: out_shape.1,
                got: upstream.ncols(),
            });
        }
        let last = self.params.layers.len() - 1;
        let mut grads = Vec::with_capacity(last + 1);
        let mut delta = upstream.to_owned();
        for l in (0..=last).rev() {
            if l != last {
                let act = self.spec.activation;
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre[l])
                    .for_each(|d, &z| *d *= act.derivative(z));
            }
            let layer = &self.params.layers[l];
            let dw = cache.inputs[l].t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            let dx = delta.dot(&layer.weight.t());
            grads.push(Layer {
                weight: dw,
                bias: db,
            });
            delta = dx;
        }
        grads.reverse();
        let input_grad = delta
            .slice(ndarray::s![.., ..self.spec.input_dim])
            .to_owned();
        Ok((NetParams { layers: grads }, input_grad))
    }

    pub fn forward(&self, input: &[f64], step: Option<usize>) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("1-row view");
        let steps = step.map(|s| [s]);
        let (y, _) = self.forward_batch(x, steps.as_ref().map(|s| &s[..]))?;
        Ok(y.into_raw_vec_and_offset().0)
    }

    pub fn backward(
        &self,
        input: &[f64],
        step: Option<usize>,
        upstream: &[f64],
    ) -> Result<(NetParams, Vec<f64>)> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("1-row view");
        let steps = step.map(|s| [s]);
        let (_, cache) = self.forward_batch(x, steps.as_ref().map(|s| &s[..]))?;
        if upstream.len() != self.spec.output_dim {
            return Err(RadError::DimensionMismatch {
                expected: self.spec.output_dim,
                got: upstream.len(),
            });
        }
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("1-row view");
        let (grads, gx) = self.backward_batch(&cache, up)?;
        Ok((grads, gx.into_raw_vec_and_offset().0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: NetParams,
    pub second_moment: NetParams,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn adam(spec: &NetSpec, lr: f64) -> Self {
        Self {
            first_moment: NetParams::zeros(spec),
            second_moment: NetParams::zeros(spec),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any parameter.
pub fn adam_step(params: &mut NetParams, grads: &NetParams, state: &mut OptimizerState) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(RadError::DimensionMismatch {
            expected: params.layers.len(),
            got: grads.layers.len(),
        });
    }
    for (l, (g, p)) in grads.layers.iter().zip(&params.layers).enumerate() {
        if g.weight.dim() != p.weight.dim() || g.bias.len() != p.bias.len() {
            return Err(RadError::Training {
                layer: l,
                msg: "gradient shape does not match parameters".into(),
            });
        }
        if !(g.weight.iter().all(|v| v.is_finite()) && g.bias.iter().all(|v| v.is_finite())) {
            return Err(RadError::Training {
                layer: l,
                msg: "non-finite gradient".into(),
            });
        }
    }
    state.step += 1;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.lr);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (((p, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.first_moment.layers.iter_mut())
        .zip(state.second_moment.layers.iter_mut())
    {
        ndarray::Zip::from(&mut p.weight)
            .and(&g.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        ndarray::Zip::from(&mut p.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut NetParams, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Network plus Adam state, trained on masked mean-squared error.
pub struct Trainer {
    pub net: Mlp,
    pub opt: OptimizerState,
    pub grad_clip: f64,
}

impl Trainer {
    pub fn new(net: Mlp, lr: f64, grad_clip: f64) -> Self {
        let opt = OptimizerState::adam(&net.spec, lr);
        Self { net, opt, grad_clip }
    }

    /// Masked MSE `sum(mask * (pred - target)^2) / sum(mask)` without updating.
    pub fn loss(
        &self,
        inputs: ArrayView2<f64>,
        steps: Option<&[usize]>,
        targets: ArrayView2<f64>,
        mask: Option<ArrayView2<f64>>,
    ) -> Result<f64> {
        let (pred, _) = self.net.forward_batch(inputs, steps)?;
        Ok(masked_mse(&pred, targets, mask).0)
    }

    /// One optimizer step; returns the loss before the update.
    pub fn step(
        &mut self,
        inputs: ArrayView2<f64>,
        steps: Option<&[usize]>,
        targets: ArrayView2<f64>,
        mask: Option<ArrayView2<f64>>,
    ) -> Result<f64> {
        let (pred, cache) = self.net.forward_batch(inputs, steps)?;
        if pred.dim() != targets.dim() {
            return Err(RadError::DimensionMismatch {
                expected: pred.ncols(),
                got: targets.ncols(),
            });
        }
        let (loss, upstream) = masked_mse(&pred, targets, mask);
        let (mut grads, _) = self.net.backward_batch(&cache, upstream.view())?;
        clip_grad_norm(&mut grads, self.grad_clip);
        adam_step(&mut self.net.params, &grads, &mut self.opt)?;
        Ok(loss)
    }
}

fn masked_mse(
    pred: &Array2<f64>,
    targets: ArrayView2<f64>,
    mask: Option<ArrayView2<f64>>,
) -> (f64, Array2<f64>) {
    let mut diff = pred - &targets;
    let count = match mask {
        Some(m) => {
            diff *= &m;
            m.sum()
        }
        None => diff.len() as f64,
    };
    let count = count.max(1.0);
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
    diff *= 2.0 / count;
    (loss, diff)
}
