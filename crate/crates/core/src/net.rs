//! Dense tensors and a small feed-forward classifier with exact manual
//! backpropagation. Everything is 64-bit and deterministic; attacks rely on
//! the input gradients computed here.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
}

/// Row-major dense tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length mismatch");
        debug_assert!(data.iter().all(|x| x.is_finite()), "non-finite tensor entry");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[r * c..(r + 1) * c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::ReLU => z.max(0.0),
            // Stable softplus: ln(1 + e^z) = max(z, 0) + ln(1 + e^-|z|).
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Identity => z,
        }
    }

    /// Derivative evaluated at the pre-activation.
    pub fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::ReLU => "relu",
            Activation::Softplus => "softplus",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self, NetError> {
        match s {
            "relu" => Ok(Activation::ReLU),
            "softplus" => Ok(Activation::Softplus),
            "identity" => Ok(Activation::Identity),
            other => Err(NetError::InvalidArch(format!("unknown activation `{other}`"))),
        }
    }
}

/// Fully-connected layer: `a = act(x W + b)` with `W` of shape `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// Feed-forward classifier; the final layer always emits raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<DenseLayer>,
}

impl Network {
    /// Builds a network from a layer-size chain, e.g. `[20, 64, 64, 2]`.
    /// Weights are Glorot-uniform, biases zero, hidden layers use
    /// `activation`, the last layer is Identity.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self, NetError> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(NetError::InvalidArch(format!("bad layer chain {dims:?}")));
        }
        if *dims.last().unwrap() < 2 {
            return Err(NetError::InvalidArch("need at least 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> =
                (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            layers.push(DenseLayer {
                weights: Tensor::new(vec![fan_in, fan_out], data),
                bias: Tensor::zeros(vec![fan_out]),
                activation,
            });
        }
        layers.last_mut().unwrap().activation = Activation::Identity;
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.shape[0]
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().weights.shape[1]
    }

    /// Textual layer descriptor, e.g. `20-64-64-2:relu` (hidden activation).
    pub fn arch_string(&self) -> String {
        let mut dims: Vec<String> = vec![self.input_dim().to_string()];
        for l in &self.layers {
            dims.push(l.weights.shape[1].to_string());
        }
        let act = if self.layers.len() > 1 {
            self.layers[0].activation.name()
        } else {
            "identity"
        };
        format!("{}:{}", dims.join("-"), act)
    }

    /// Parses an `in-h1-...-K:activation` descriptor into a layer chain.
    pub fn parse_arch(s: &str) -> Result<(Vec<usize>, Activation), NetError> {
        let (chain, act) = s
            .split_once(':')
            .ok_or_else(|| NetError::InvalidArch(format!("missing `:activation` in `{s}`")))?;
        let dims: Result<Vec<usize>, _> = chain.split('-').map(|t| t.parse::<usize>()).collect();
        let dims = dims.map_err(|_| NetError::InvalidArch(format!("bad layer chain `{chain}`")))?;
        if dims.len() < 2 {
            return Err(NetError::InvalidArch(format!("layer chain too short in `{s}`")));
        }
        Ok((dims, Activation::parse(act)?))
    }

    /// Flat parameter tensors in layer order: `w0, b0, w1, b1, ...`.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias]).collect()
    }
}

/// Inputs (rows in `[0,1]^d`) plus labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Self {
        assert_eq!(inputs.shape.len(), 2);
        assert_eq!(inputs.rows(), labels.len());
        debug_assert!(
            inputs.data.iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)),
            "inputs must lie in the unit box"
        );
        Self { inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Batch { inputs: Tensor::new(vec![idx.len(), d], data), labels }
    }
}

/// `out[r][j] = sum_k x[r][k] w[k][j] + b[j]`, accumulated in a fixed order
/// per row so batched and single-row evaluation are bit-identical.
fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, din, dout) = (x.rows(), w.shape[0], w.shape[1]);
    assert_eq!(x.cols(), din);
    let mut out = Tensor::zeros(vec![n, dout]);
    for r in 0..n {
        let xr = x.row(r);
        let or = out.row_mut(r);
        or.copy_from_slice(&b.data);
        for (k, &xk) in xr.iter().enumerate() {
            let wrow = &w.data[k * dout..(k + 1) * dout];
            for j in 0..dout {
                or[j] += xk * wrow[j];
            }
        }
    }
    out
}

struct ForwardCache {
    /// Pre-activations per layer.
    pre: Vec<Tensor>,
    /// Post-activations per layer (last entry = logits).
    post: Vec<Tensor>,
}

fn forward_cached(net: &Network, inputs: &Tensor) -> Result<ForwardCache, NetError> {
    if inputs.shape.len() != 2 || inputs.cols() != net.input_dim() {
        return Err(NetError::ShapeMismatch {
            expected: format!("[n, {}]", net.input_dim()),
            got: format!("{:?}", inputs.shape),
        });
    }
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut post = Vec::with_capacity(net.layers.len());
    let mut x = inputs;
    for layer in &net.layers {
        let z = affine(x, &layer.weights, &layer.bias);
        let mut a = z.clone();
        for v in &mut a.data {
            *v = layer.activation.apply(*v);
        }
        pre.push(z);
        post.push(a);
        x = post.last().unwrap();
    }
    Ok(ForwardCache { pre, post })
}

/// Logits of shape `[n, K]`.
pub fn forward(net: &Network, inputs: &Tensor) -> Result<Tensor, NetError> {
    let mut cache = forward_cached(net, inputs)?;
    Ok(cache.post.pop().expect("non-empty network"))
}

/// Predicted class per row (argmax, lowest index on ties).
pub fn predict(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Mean negative log-softmax of the true class, plus its gradient
/// `(softmax - onehot) / n` with respect to the logits.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NetError> {
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(NetError::ShapeMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    let mut grad = Tensor::zeros(vec![n, k]);
    let mut loss = 0.0;
    for r in 0..n {
        let y = labels[r];
        if y >= k {
            return Err(NetError::LabelOutOfRange { label: y, classes: k });
        }
        let row = logits.row(r);
        let g = grad.row_mut(r);
        softmax_row(row, g);
        loss += -(g[y].max(f64::MIN_POSITIVE)).ln();
        g[y] -= 1.0;
        for v in g.iter_mut() {
            *v /= n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Gradients of one dense layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

fn backprop(
    net: &Network,
    inputs: &Tensor,
    cache: &ForwardCache,
    mut delta: Tensor,
) -> (Vec<LayerGrads>, Tensor) {
    let n = inputs.rows();
    let mut grads: Vec<LayerGrads> = Vec::with_capacity(net.layers.len());
    for (li, layer) in net.layers.iter().enumerate().rev() {
        // delta currently holds dL/d(post-activation of layer li); fold in
        // the activation derivative to get dL/d(pre-activation).
        let z = &cache.pre[li];
        for (dv, &zv) in delta.data.iter_mut().zip(&z.data) {
            *dv *= layer.activation.derivative(zv);
        }
        let prev: &Tensor = if li == 0 { inputs } else { &cache.post[li - 1] };
        let (din, dout) = (layer.weights.shape[0], layer.weights.shape[1]);
        let mut gw = Tensor::zeros(vec![din, dout]);
        let mut gb = Tensor::zeros(vec![dout]);
        for r in 0..n {
            let dr = delta.row(r);
            let pr = prev.row(r);
            for j in 0..dout {
                gb.data[j] += dr[j];
            }
            for (k, &pk) in pr.iter().enumerate() {
                let gwr = &mut gw.data[k * dout..(k + 1) * dout];
                for j in 0..dout {
                    gwr[j] += pk * dr[j];
                }
            }
        }
        // Propagate: new_delta[r][k] = sum_j delta[r][j] * w[k][j].
        let mut nd = Tensor::zeros(vec![n, din]);
        for r in 0..n {
            let dr = delta.row(r);
            let ndr = nd.row_mut(r);
            for k in 0..din {
                let wrow = &layer.weights.data[k * dout..(k + 1) * dout];
                let mut acc = 0.0;
                for j in 0..dout {
                    acc += dr[j] * wrow[j];
                }
                ndr[k] = acc;
            }
        }
        grads.push(LayerGrads { weights: gw, bias: gb });
        delta = nd;
    }
    grads.reverse();
    (grads, delta)
}

/// Exact reverse-mode gradients of the mean cross-entropy with respect to all
/// parameters and to the inputs.
pub fn backward(net: &Network, batch: &Batch) -> Result<(f64, Vec<LayerGrads>, Tensor), NetError> {
    let cache = forward_cached(net, &batch.inputs)?;
    let logits = cache.post.last().unwrap();
    let (loss, delta) = cross_entropy_loss(logits, &batch.labels)?;
    let (grads, grad_inputs) = backprop(net, &batch.inputs, &cache, delta);
    Ok((loss, grads, grad_inputs))
}

/// Per-example cross-entropy losses, predictions, and input gradients
/// (gradient of the *per-example* loss, no `1/n` factor). Rows are mutually
/// independent, so batched and per-example evaluation agree bit-for-bit.
pub fn per_example_grads(
    net: &Network,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<(Vec<f64>, Vec<usize>, Tensor), NetError> {
    let cache = forward_cached(net, inputs)?;
    let logits = cache.post.last().unwrap();
    let n = logits.rows();
    let k = logits.cols();
    let preds = predict(logits);
    let mut losses = Vec::with_capacity(n);
    let mut delta = Tensor::zeros(vec![n, k]);
    for r in 0..n {
        let y = labels[r];
        if y >= k {
            return Err(NetError::LabelOutOfRange { label: y, classes: k });
        }
        let g = delta.row_mut(r);
        softmax_row(logits.row(r), g);
        losses.push(-(g[y].max(f64::MIN_POSITIVE)).ln());
        g[y] -= 1.0;
    }
    let (_, grad_inputs) = backprop(net, inputs, &cache, delta);
    Ok((losses, preds, grad_inputs))
}

/// Per-example losses and predictions only (no gradients).
pub fn per_example_losses(
    net: &Network,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<(Vec<f64>, Vec<usize>), NetError> {
    let logits = forward(net, inputs)?;
    let preds = predict(&logits);
    let n = logits.rows();
    let k = logits.cols();
    let mut losses = Vec::with_capacity(n);
    let mut buf = vec![0.0; k];
    for r in 0..n {
        let y = labels[r];
        if y >= k {
            return Err(NetError::LabelOutOfRange { label: y, classes: k });
        }
        softmax_row(logits.row(r), &mut buf);
        losses.push(-(buf[y].max(f64::MIN_POSITIVE)).ln());
    }
    Ok((losses, preds))
}

/// Fraction of rows classified correctly.
pub fn accuracy(net: &Network, batch: &Batch) -> Result<f64, NetError> {
    let logits = forward(net, &batch.inputs)?;
    let preds = predict(&logits);
    let correct = preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / batch.len().max(1) as f64)
}

/// Central finite-difference check: max over 100 sampled coordinates
/// (parameters and inputs) of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check(net: &Network, batch: &Batch, step: f64) -> Result<f64, NetError> {
    assert!(step > 1e-8 && step < 1e-3, "step outside (1e-8, 1e-3)");
    let (_, grads, grad_inputs) = backward(net, batch)?;
    let n_params: usize = net.layers.iter().map(|l| l.weights.data.len() + l.bias.data.len()).sum();
    let n_inputs = batch.inputs.data.len();
    let total = n_params + n_inputs;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let idx = rng.gen_range(0..total);
        let analytic = if idx < n_params {
            flat_param_grad(&grads, idx)
        } else {
            grad_inputs.data[idx - n_params]
        };
        let probe = |v: f64| -> f64 {
            let mut net2 = net.clone();
            let mut inputs2 = batch.inputs.clone();
            if idx < n_params {
                *flat_param_mut(&mut net2, idx) = v;
            } else {
                inputs2.data[idx - n_params] = v;
            }
            let cache = forward_cached(&net2, &inputs2).unwrap();
            cross_entropy_loss(cache.post.last().unwrap(), &batch.labels).unwrap().0
        };
        let base = if idx < n_params {
            flat_param_get(net, idx)
        } else {
            batch.inputs.data[idx - n_params]
        };
        let numeric = (probe(base + step) - probe(base - step)) / (2.0 * step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn flat_param_grad(grads: &[LayerGrads], mut idx: usize) -> f64 {
    for g in grads {
        if idx < g.weights.data.len() {
            return g.weights.data[idx];
        }
        idx -= g.weights.data.len();
        if idx < g.bias.data.len() {
            return g.bias.data[idx];
        }
        idx -= g.bias.data.len();
    }
    unreachable!("index out of parameter range")
}

fn flat_param_get(net: &Network, mut idx: usize) -> f64 {
    for l in &net.layers {
        if idx < l.weights.data.len() {
            return l.weights.data[idx];
        }
        idx -= l.weights.data.len();
        if idx < l.bias.data.len() {
            return l.bias.data[idx];
        }
        idx -= l.bias.data.len();
    }
    unreachable!("index out of parameter range")
}

fn flat_param_mut(net: &mut Network, mut idx: usize) -> &mut f64 {
    for l in &mut net.layers {
        if idx < l.weights.data.len() {
            return &mut l.weights.data[idx];
        }
        idx -= l.weights.data.len();
        if idx < l.bias.data.len() {
            return &mut l.bias.data[idx];
        }
        idx -= l.bias.data.len();
    }
    unreachable!("index out of parameter range")
}
