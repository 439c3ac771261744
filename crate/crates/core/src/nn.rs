//! Dense multilayer perceptrons with hand-written reverse-mode gradients.
//!
//! Batches are row-major: each row of an input matrix is one sample. The
//! forward pass can cache per-layer activations, and [`DenseNet::backward`]
//! consumes that cache to produce parameter gradients plus the gradient with
//! respect to the network input (needed when a loss flows through a net into
//! another net, as in the actor update or the reparameterized latent).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Element-wise nonlinearity applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Tanh),
            t => Err(Error::Snapshot(format!("unknown activation tag {t}"))),
        }
    }

    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the post-activation output.
    fn backprop(self, output: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.zip_mut_with(output, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_mut_with(output, |g, &a| *g *= 1.0 - a * a),
        }
    }
}

/// One affine layer `y = act(W x + b)` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..=bound));
        let bias = Array1::from_shape_fn(output, |_| rng.random_range(-bound..=bound));
        Dense { weight, bias, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Fully connected feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Activations recorded by [`DenseNet::forward_cached`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Final network output for the cached batch.
    pub fn output(&self) -> Option<&Array2<f64>> {
        self.outputs.last()
    }
}

impl DenseNet {
    /// Builds a net with layer sizes `dims` (input first), `hidden` activation on
    /// every hidden layer and `output` activation on the last one.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("invalid layer sizes {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { output } else { hidden };
                Dense::random(dims[k], dims[k + 1], act, rng)
            })
            .collect();
        Ok(DenseNet { layers })
    }

    /// Wraps explicit layers after checking that dimensions chain and values are finite.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(shape_err(&format!("bias length of layer {k}"), layer.output_dim(), layer.bias.len()));
            }
            if layer.input_dim() == 0 || layer.output_dim() == 0 {
                return Err(Error::InvalidArgument(format!("layer {k} has a zero dimension")));
            }
            if k > 0 && layers[k - 1].output_dim() != layer.input_dim() {
                return Err(shape_err(&format!("input of layer {k}"), layers[k - 1].output_dim(), layer.input_dim()));
            }
            if !layer.weight.iter().chain(layer.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("layer {k} has non-finite parameters")));
            }
        }
        Ok(DenseNet { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer (weights row-major, then bias).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(shape_err("parameter vector", self.param_count(), values.len()));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = it.next().unwrap_or(0.0));
        }
        Ok(())
    }

    /// Evaluates a single input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(shape_err("network input", self.input_dim(), x.len()));
        }
        let batch = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    /// Evaluates a batch without recording activations.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut h = x.to_owned();
        for l in &self.layers {
            h = self.affine(l, &h);
        }
        Ok(h)
    }

    /// Evaluates a batch and records what [`DenseNet::backward`] needs.
    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x.ncols())?;
        let mut cache = ForwardCache::default();
        let mut h = x.to_owned();
        for l in &self.layers {
            let out = self.affine(l, &h);
            cache.inputs.push(h);
            cache.outputs.push(out.clone());
            h = out;
        }
        Ok((h, cache))
    }

    fn affine(&self, l: &Dense, h: &Array2<f64>) -> Array2<f64> {
        let mut z = h.dot(&l.weight.t());
        z += &l.bias;
        l.activation.apply(&mut z);
        z
    }

    fn check_input(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(shape_err("network input", self.input_dim(), got));
        }
        Ok(())
    }

    /// Reverse pass: gradient of a scalar loss w.r.t. every parameter and the input.
    ///
    /// `grad_out` holds ∂loss/∂output for each cached row.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> Result<(GradientTape, Array2<f64>)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::State(format!(
                "forward cache holds {} layers, network has {}",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        let out = &cache.outputs[self.layers.len() - 1];
        if grad_out.dim() != out.dim() {
            return Err(Error::Shape(format!("loss gradient {:?} vs output {:?}", grad_out.dim(), out.dim())));
        }
        let mut tape = GradientTape::zeros_like(self);
        let mut g = grad_out.to_owned();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            if cache.inputs[k].ncols() != l.input_dim() {
                return Err(Error::State(format!("cache for layer {k} does not match the network")));
            }
            l.activation.backprop(&cache.outputs[k], &mut g);
            tape.grads[k].0 = g.t().dot(&cache.inputs[k]);
            tape.grads[k].1 = g.sum_axis(Axis(0));
            g = g.dot(&l.weight);
        }
        Ok((tape, g))
    }

    fn same_shape(&self, other: &DenseNet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.activation == b.activation)
    }

    /// Serializes to the snapshot format: an 8-byte magic, a `u32` layer count,
    /// one `(u32 in, u32 out, u8 activation)` record per layer, then every
    /// parameter as little-endian `f64` in [`DenseNet::params`] order.
    pub fn to_snapshot(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 9 * self.layers.len() + 8 * self.param_count());
        buf.extend_from_slice(NET_MAGIC);
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            buf.extend_from_slice(&(l.input_dim() as u32).to_le_bytes());
            buf.extend_from_slice(&(l.output_dim() as u32).to_le_bytes());
            buf.push(l.activation.tag());
        }
        for v in self.params() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    /// Parses a snapshot, returning the net and the number of bytes consumed.
    pub fn from_snapshot(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(NET_MAGIC.len())? != NET_MAGIC {
            return Err(Error::Snapshot("bad network magic".into()));
        }
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let input = r.u32()? as usize;
            let output = r.u32()? as usize;
            let act = Activation::from_tag(r.u8()?)?;
            layers.push(Dense {
                weight: Array2::zeros((output, input)),
                bias: Array1::zeros(output),
                activation: act,
            });
        }
        for l in &mut layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = r.f64()?;
            }
        }
        Ok((DenseNet::from_layers(layers)?, r.pos))
    }
}

const NET_MAGIC: &[u8; 8] = b"CEANET\x00\x01";

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Snapshot("truncated snapshot".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Per-parameter gradient buffers, shaped like a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    grads: Vec<(Array2<f64>, Array1<f64>)>,
}

impl GradientTape {
    pub fn zeros_like(net: &DenseNet) -> Self {
        GradientTape {
            grads: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for (w, b) in &mut self.grads {
            w.fill(0.0);
            b.fill(0.0);
        }
    }

    /// Weight and bias gradients of layer `k`.
    pub fn layer(&self, k: usize) -> (&Array2<f64>, &Array1<f64>) {
        let (w, b) = &self.grads[k];
        (w, b)
    }

    /// Gradients flattened in [`DenseNet::params`] order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.grads {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn add_assign(&mut self, other: &GradientTape) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape("gradient tapes differ in shape".into()));
        }
        for ((w, b), (ow, ob)) in self.grads.iter_mut().zip(&other.grads) {
            *w += ow;
            *b += ob;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for (w, b) in &mut self.grads {
            *w *= c;
            *b *= c;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.grads
            .iter()
            .map(|(w, b)| w.iter().chain(b.iter()).map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }

    fn same_shape(&self, other: &GradientTape) -> bool {
        self.grads.len() == other.grads.len()
            && self.grads.iter().zip(&other.grads).all(|(a, b)| a.0.dim() == b.0.dim() && a.1.len() == b.1.len())
    }

    fn matches(&self, net: &DenseNet) -> bool {
        self.grads.len() == net.layers.len()
            && self
                .grads
                .iter()
                .zip(&net.layers)
                .all(|((w, b), l)| w.dim() == l.weight.dim() && b.len() == l.bias.len())
    }
}

/// Scales a set of tapes together so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(tapes: &mut [&mut GradientTape], max_norm: f64) -> f64 {
    let norm = tapes.iter().map(|t| t.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let c = max_norm / norm;
        for t in tapes.iter_mut() {
            t.scale(c);
        }
    }
    norm
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: GradientTape,
    v: GradientTape,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip applied to the incoming gradient; `None` disables it.
    pub clip_norm: Option<f64>,
}

impl AdamState {
    pub fn new(net: &DenseNet, lr: f64) -> Self {
        AdamState {
            m: GradientTape::zeros_like(net),
            v: GradientTape::zeros_like(net),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }

    pub fn without_clipping(mut self) -> Self {
        self.clip_norm = None;
        self
    }

    /// Applies one Adam update. Non-finite gradients are refused and leave
    /// both the net and the optimizer untouched.
    pub fn step(&mut self, net: &mut DenseNet, tape: &GradientTape) -> Result<()> {
        if !tape.matches(net) || !self.m.matches(net) {
            return Err(Error::Shape("gradient tape does not match network".into()));
        }
        if !tape.is_finite() {
            return Err(Error::Numeric("non-finite gradient, step refused".into()));
        }
        let mut g = tape.clone();
        if let Some(max) = self.clip_norm {
            clip_global_norm(&mut [&mut g], max);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &g.grads[k];
            let (mw, mb) = &mut self.m.grads[k];
            let (vw, vb) = &mut self.v.grads[k];
            adam_update(layer.weight.iter_mut(), gw.iter(), mw.iter_mut(), vw.iter_mut(), b1, b2, c1, c2, lr, eps);
            adam_update(layer.bias.iter_mut(), gb.iter(), mb.iter_mut(), vb.iter_mut(), b1, b2, c1, c2, lr, eps);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update<'a>(
    params: impl Iterator<Item = &'a mut f64>,
    grads: impl Iterator<Item = &'a f64>,
    m: impl Iterator<Item = &'a mut f64>,
    v: impl Iterator<Item = &'a mut f64>,
    b1: f64,
    b2: f64,
    c1: f64,
    c2: f64,
    lr: f64,
    eps: f64,
) {
    for (((p, &g), m), v) in params.zip(grads).zip(m).zip(v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Copies every parameter of `source` into `target`.
pub fn hard_update(source: &DenseNet, target: &mut DenseNet) -> Result<()> {
    if !source.same_shape(target) {
        return Err(Error::Shape("hard update between differently shaped networks".into()));
    }
    for (t, s) in target.layers.iter_mut().zip(&source.layers) {
        t.weight.assign(&s.weight);
        t.bias.assign(&s.bias);
    }
    Ok(())
}

/// Polyak blend `target ← tau·source + (1−tau)·target`, `tau ∈ (0, 1]`.
pub fn soft_update(source: &DenseNet, target: &mut DenseNet, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("soft update tau {tau} outside (0, 1]")));
    }
    if tau == 1.0 {
        return hard_update(source, target);
    }
    if !source.same_shape(target) {
        return Err(Error::Shape("soft update between differently shaped networks".into()));
    }
    for (t, s) in target.layers.iter_mut().zip(&source.layers) {
        t.weight.zip_mut_with(&s.weight, |a, &b| *a = tau * b + (1.0 - tau) * *a);
        t.bias.zip_mut_with(&s.bias, |a, &b| *a = tau * b + (1.0 - tau) * *a);
    }
    Ok(())
}

/// Stacks equal-length rows into a matrix.
pub fn rows_to_matrix(rows: &[&[f64]], width: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(shape_err("batch row", width, r.len()));
        }
        m.row_mut(i).iter_mut().zip(r.iter()).for_each(|(d, s)| *d = *s);
    }
    Ok(m)
}
