//! Dense plain and residual networks with SiLU activations, trained in
//! 64-bit arithmetic and checkpointed as 32-bit weights.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFNN";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum AutonetError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cache was produced by different parameters")]
    StaleCache,
    #[error("non-finite gradient in layer {layer} ({tensor}) at optimizer step {step}")]
    NonFiniteGradient {
        layer: usize,
        tensor: &'static str,
        step: u64,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint architecture {found:?} does not match requested {expected:?}")]
    ArchMismatch {
        found: NetworkArch,
        expected: NetworkArch,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    /// Fully connected: `depth` linear layers with SiLU between them.
    Plain,
    /// Input projection, `depth` residual blocks, output projection.
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkArch {
    pub kind: NetworkKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_width: usize,
    pub depth: usize,
}

impl NetworkArch {
    pub fn plain(layers: usize, hidden_width: usize) -> Self {
        Self {
            kind: NetworkKind::Plain,
            input_dim: 6,
            output_dim: 1,
            hidden_width,
            depth: layers,
        }
    }

    pub fn residual(blocks: usize, hidden_width: usize) -> Self {
        Self {
            kind: NetworkKind::Residual,
            input_dim: 6,
            output_dim: 1,
            hidden_width,
            depth: blocks,
        }
    }

    pub fn validate(&self) -> Result<(), AutonetError> {
        if self.hidden_width == 0 || self.depth == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(AutonetError::InvalidArch(format!("{self:?}")));
        }
        Ok(())
    }

    /// `FCN-L6-H128` / `FCRN-B3-H64` style label.
    pub fn label(&self) -> String {
        match self.kind {
            NetworkKind::Plain => format!("FCN-L{}-H{}", self.depth, self.hidden_width),
            NetworkKind::Residual => format!("FCRN-B{}-H{}", self.depth, self.hidden_width),
        }
    }

    pub fn linear_layers(&self) -> usize {
        match self.kind {
            NetworkKind::Plain => self.depth,
            NetworkKind::Residual => 2 * self.depth + 2,
        }
    }

    /// `(fan_out, fan_in)` of every linear layer, in evaluation order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let (i, h, o) = (self.input_dim, self.hidden_width, self.output_dim);
        match self.kind {
            NetworkKind::Plain => {
                if self.depth == 1 {
                    return vec![(o, i)];
                }
                let mut shapes = vec![(h, i)];
                shapes.extend(std::iter::repeat((h, h)).take(self.depth - 2));
                shapes.push((o, h));
                shapes
            }
            NetworkKind::Residual => {
                let mut shapes = vec![(h, i)];
                shapes.extend(std::iter::repeat((h, h)).take(2 * self.depth));
                shapes.push((o, h));
                shapes
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_out x fan_in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// `x W^T + b` for row-major batch `x`.
    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub arch: NetworkArch,
    pub layers: Vec<Layer>,
    /// Identifies this set of values; changes on every update.
    version: u64,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.layers == other.layers
    }
}

impl NetworkParams {
    pub fn zeros(arch: NetworkArch) -> Self {
        Self {
            arch,
            layers: arch.layer_shapes().into_iter().map(|(o, i)| Layer::zeros(o, i)).collect(),
            version: fresh_version(),
        }
    }

    pub fn from_layers(arch: NetworkArch, layers: Vec<Layer>) -> Result<Self, AutonetError> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(AutonetError::Shape(format!(
                "{} layers given, architecture has {}",
                layers.len(),
                shapes.len()
            )));
        }
        for (k, ((o, i), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.weight.dim() != (*o, *i) || layer.bias.len() != *o {
                return Err(AutonetError::Shape(format!("layer {k} is not {o}x{i}")));
            }
        }
        Ok(Self {
            arch,
            layers,
            version: fresh_version(),
        })
    }

    /// Marks the values as changed, invalidating existing caches.
    pub fn touch(&mut self) {
        self.version = fresh_version();
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn flat_len(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weights then bias of every layer in order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Copy with every value rounded to checkpoint (f32) precision.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.weight.mapv_inplace(|v| v as f32 as f64);
            l.bias.mapv_inplace(|v| v as f32 as f64);
        }
        out.touch();
        out
    }
}

/// Glorot-uniform weights from a seeded ChaCha8 stream, zero biases.
pub fn init_params(arch: NetworkArch, seed: u64) -> Result<NetworkParams, AutonetError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(o, i)| {
            let limit = (6.0 / (o + i) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            Layer {
                weight: Array2::from_shape_simple_fn((o, i), || dist.sample(&mut rng)),
                bias: Array1::zeros(o),
            }
        })
        .collect();
    NetworkParams::from_layers(arch, layers)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// Input of every linear layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every SiLU, in evaluation order.
    pre_activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    /// Input of every linear layer, in layer order.
    pub fn layer_inputs(&self) -> &[Array2<f64>] {
        &self.inputs
    }
}

fn check_batch(arch: &NetworkArch, batch: &ArrayView2<f64>) -> Result<(), AutonetError> {
    if batch.ncols() != arch.input_dim {
        return Err(AutonetError::Shape(format!(
            "batch has {} columns, network expects {}",
            batch.ncols(),
            arch.input_dim
        )));
    }
    Ok(())
}

/// Forward pass over a `B x input_dim` batch, keeping what `backward` needs.
pub fn forward(params: &NetworkParams, batch: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache), AutonetError> {
    check_batch(&params.arch, &batch)?;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::new();
    let layers = &params.layers;
    let output = match params.arch.kind {
        NetworkKind::Plain => {
            let mut h = batch.to_owned();
            for (k, layer) in layers.iter().enumerate() {
                let z = layer.apply(&h.view());
                inputs.push(h);
                if k + 1 == layers.len() {
                    h = z;
                } else {
                    h = z.mapv(silu);
                    pre_activations.push(z);
                }
            }
            h
        }
        NetworkKind::Residual => {
            let input = batch.to_owned();
            let mut h = layers[0].apply(&input.view());
            inputs.push(input);
            for block in layers[1..layers.len() - 1].chunks_exact(2) {
                let u = block[0].apply(&h.view());
                let a = u.mapv(silu);
                let update = block[1].apply(&a.view());
                inputs.push(h.clone());
                inputs.push(a);
                pre_activations.push(u);
                h += &update;
            }
            let out = layers[layers.len() - 1].apply(&h.view());
            inputs.push(h);
            out
        }
    };
    Ok((
        output,
        ForwardCache {
            version: params.version,
            inputs,
            pre_activations,
        },
    ))
}

/// Forward pass without a cache.
pub fn predict(params: &NetworkParams, batch: ArrayView2<f64>) -> Result<Array2<f64>, AutonetError> {
    check_batch(&params.arch, &batch)?;
    let layers = &params.layers;
    Ok(match params.arch.kind {
        NetworkKind::Plain => {
            let mut h = batch.to_owned();
            for (k, layer) in layers.iter().enumerate() {
                h = layer.apply(&h.view());
                if k + 1 < layers.len() {
                    h.mapv_inplace(silu);
                }
            }
            h
        }
        NetworkKind::Residual => {
            let mut h = layers[0].apply(&batch);
            for block in layers[1..layers.len() - 1].chunks_exact(2) {
                let mut a = block[0].apply(&h.view());
                a.mapv_inplace(silu);
                h += &block[1].apply(&a.view());
            }
            layers[layers.len() - 1].apply(&h.view())
        }
    })
}

/// Predictions in chunks of `batch_size` rows.
pub fn predict_batched(
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    batch_size: usize,
) -> Result<Array2<f64>, AutonetError> {
    let batch_size = batch_size.max(1);
    let mut out = Array2::zeros((inputs.nrows(), params.arch.output_dim));
    let mut start = 0;
    while start < inputs.nrows() {
        let end = (start + batch_size).min(inputs.nrows());
        let y = predict(params, inputs.slice(s![start..end, ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&y);
        start = end;
    }
    Ok(out)
}

/// Rows per tile of [`InferenceNet::predict`]; keeps the activations of a
/// tile resident in cache.
pub const INFERENCE_TILE: usize = 256;

/// Read-only 32-bit copy of a network for batched inference.
///
/// Weights are stored transposed (`fan_in x fan_out`) and rounded the same
/// way as a checkpoint. Rows are processed in fixed tiles with reused
/// buffers, so each output depends only on its own input row.
#[derive(Debug, Clone)]
pub struct InferenceNet {
    arch: NetworkArch,
    weights: Vec<Array2<f32>>,
    biases: Vec<Array1<f32>>,
}

/// Branch-free `e^x` for f32 (Cody-Waite reduction, degree-6 polynomial),
/// within a few ulp of `f32::exp` on `[-87, 88]`. The exponent is read from
/// the bits of the rounded sum so loops over slices vectorize.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.max(-87.0).min(88.0);
    let t = x * std::f32::consts::LOG2_E + ROUND;
    let n_bits = t.to_bits() as i32 - 0x4B40_0000;
    let n = t - ROUND;
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
        + 1.666_666_5e-1)
        * r
        + 5.000_000_1e-1;
    let p = p * r * r + r + 1.0;
    p * f32::from_bits(((n_bits + 127) as u32) << 23)
}

#[inline(always)]
fn silu_kernel(values: &mut [f32]) {
    for v in values {
        *v /= 1.0 + exp_f32(-*v);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn silu_avx2(values: &mut [f32]) {
    silu_kernel(values)
}

/// In-place SiLU, using 8-lane code when the CPU supports it.
fn silu_slice(values: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: both target features were detected at runtime.
        return unsafe { silu_avx2(values) };
    }
    silu_kernel(values)
}

/// `out += x w` through faer's runtime-dispatched f32 kernels.
fn gemm_add(x: ArrayView2<f32>, w: ArrayView2<f32>, mut out: ArrayViewMut2<f32>) {
    let (xs, ws, os) = (x.strides(), w.strides(), out.strides().to_vec());
    // SAFETY: each matrix is built from a live ndarray view with its own
    // shape and strides, and `out` is borrowed mutably for the whole call.
    let (x, w, out) = unsafe {
        (
            faer::MatRef::from_raw_parts(x.as_ptr(), x.nrows(), x.ncols(), xs[0], xs[1]),
            faer::MatRef::from_raw_parts(w.as_ptr(), w.nrows(), w.ncols(), ws[0], ws[1]),
            faer::MatMut::from_raw_parts_mut(out.as_mut_ptr(), out.nrows(), out.ncols(), os[0], os[1]),
        )
    };
    faer::linalg::matmul::matmul(out, faer::Accum::Add, x, w, 1.0, faer::Par::Seq);
}

impl InferenceNet {
    pub fn new(params: &NetworkParams) -> Self {
        Self {
            arch: params.arch,
            weights: params.layers.iter().map(|l| l.weight.t().mapv(|v| v as f32)).collect(),
            biases: params.layers.iter().map(|l| l.bias.mapv(|v| v as f32)).collect(),
        }
    }

    pub fn arch(&self) -> NetworkArch {
        self.arch
    }

    /// `out = x W + b`, overwriting `out`.
    fn linear(&self, k: usize, x: ArrayView2<f32>, mut out: ArrayViewMut2<f32>) {
        out.assign(&self.biases[k]);
        gemm_add(x, self.weights[k].view(), out);
    }

    fn tile(&self, x: ArrayView2<f32>, a: &mut Array2<f32>, b: &mut Array2<f32>, y: ArrayViewMut2<f32>) {
        let n_layers = self.weights.len();
        if n_layers == 1 {
            self.linear(0, x, y);
            return;
        }
        self.linear(0, x, a.view_mut());
        match self.arch.kind {
            NetworkKind::Plain => {
                silu_slice(a.as_slice_mut().expect("tile buffers are contiguous"));
                for k in 1..n_layers - 1 {
                    self.linear(k, a.view(), b.view_mut());
                    silu_slice(b.as_slice_mut().expect("tile buffers are contiguous"));
                    std::mem::swap(a, b);
                }
            }
            NetworkKind::Residual => {
                for k in (1..n_layers - 1).step_by(2) {
                    self.linear(k, a.view(), b.view_mut());
                    silu_slice(b.as_slice_mut().expect("tile buffers are contiguous"));
                    *a += &self.biases[k + 1];
                    gemm_add(b.view(), self.weights[k + 1].view(), a.view_mut());
                }
            }
        }
        self.linear(n_layers - 1, a.view(), y);
    }

    /// Outputs for a `rows x input_dim` batch.
    pub fn predict(&self, inputs: ArrayView2<f32>) -> Result<Array2<f32>, AutonetError> {
        if inputs.ncols() != self.arch.input_dim {
            return Err(AutonetError::Shape(format!(
                "batch has {} columns, network expects {}",
                inputs.ncols(),
                self.arch.input_dim
            )));
        }
        let width = self.arch.hidden_width;
        let mut out = Array2::zeros((inputs.nrows(), self.arch.output_dim));
        let mut a = Array2::zeros((INFERENCE_TILE, width));
        let mut b = Array2::zeros((INFERENCE_TILE, width));
        let full = inputs.nrows() / INFERENCE_TILE * INFERENCE_TILE;
        for start in (0..full).step_by(INFERENCE_TILE) {
            let rows = s![start..start + INFERENCE_TILE, ..];
            self.tile(inputs.slice(rows), &mut a, &mut b, out.slice_mut(rows));
        }
        if full < inputs.nrows() {
            // The last partial tile is zero-padded so every GEMM has the same shape.
            let tail = inputs.nrows() - full;
            let mut x = Array2::zeros((INFERENCE_TILE, inputs.ncols()));
            x.slice_mut(s![..tail, ..]).assign(&inputs.slice(s![full.., ..]));
            let mut y = Array2::zeros((INFERENCE_TILE, self.arch.output_dim));
            self.tile(x.view(), &mut a, &mut b, y.view_mut());
            out.slice_mut(s![full.., ..]).assign(&y.slice(s![..tail, ..]));
        }
        Ok(out)
    }
}

/// Gradients with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }
}

fn linear_backward(layer: &Layer, input: &Array2<f64>, grad: &Array2<f64>) -> (Layer, Array2<f64>) {
    let d = Layer {
        weight: grad.t().dot(input),
        bias: grad.sum_axis(Axis(0)),
    };
    (d, grad.dot(&layer.weight))
}

/// Reverse-mode gradients of `sum(output_grad * output)` with respect to
/// every parameter.
pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    output_grad: ArrayView2<f64>,
) -> Result<Gradients, AutonetError> {
    if cache.version != params.version {
        return Err(AutonetError::StaleCache);
    }
    let rows = cache.inputs[0].nrows();
    if output_grad.dim() != (rows, params.arch.output_dim) {
        return Err(AutonetError::Shape(format!(
            "output gradient is {:?}, expected ({rows}, {})",
            output_grad.dim(),
            params.arch.output_dim
        )));
    }
    let layers = &params.layers;
    let n = layers.len();
    let mut grads: Vec<Option<Layer>> = vec![None; n];
    let mut g = output_grad.to_owned();
    match params.arch.kind {
        NetworkKind::Plain => {
            for k in (0..n).rev() {
                let (d, g_in) = linear_backward(&layers[k], &cache.inputs[k], &g);
                grads[k] = Some(d);
                if k > 0 {
                    let z = &cache.pre_activations[k - 1];
                    g = g_in;
                    g.zip_mut_with(z, |gv, &zv| *gv *= silu_grad(zv));
                }
            }
        }
        NetworkKind::Residual => {
            let (d, g_h) = linear_backward(&layers[n - 1], &cache.inputs[n - 1], &g);
            grads[n - 1] = Some(d);
            g = g_h;
            let blocks = (n - 2) / 2;
            for b in (0..blocks).rev() {
                let (k1, k2) = (1 + 2 * b, 2 + 2 * b);
                let (d2, mut g_u) = linear_backward(&layers[k2], &cache.inputs[k2], &g);
                g_u.zip_mut_with(&cache.pre_activations[b], |gv, &uv| *gv *= silu_grad(uv));
                let (d1, g_skip) = linear_backward(&layers[k1], &cache.inputs[k1], &g_u);
                grads[k1] = Some(d1);
                grads[k2] = Some(d2);
                g += &g_skip;
            }
            let (d, _) = linear_backward(&layers[0], &cache.inputs[0], &g);
            grads[0] = Some(d);
        }
    }
    Ok(Gradients {
        layers: grads.into_iter().map(|d| d.expect("every layer visited")).collect(),
    })
}

/// Mean squared error and its gradient `2 (pred - target) / B`.
pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>), AutonetError> {
    if pred.dim() != target.dim() {
        return Err(AutonetError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let count = pred.len().max(1) as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
    Ok((loss, diff * (2.0 / count)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Layer>,
    pub second_moment: Vec<Layer>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(arch: &NetworkArch) -> Self {
        let zeros: Vec<Layer> = arch.layer_shapes().into_iter().map(|(o, i)| Layer::zeros(o, i)).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam step. Rejects non-finite gradients before
/// touching any state.
pub fn adam_update(
    params: &mut NetworkParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), AutonetError> {
    if grads.layers.len() != params.layers.len() {
        return Err(AutonetError::Shape("gradient layer count".into()));
    }
    for (k, (g, p)) in grads.layers.iter().zip(&params.layers).enumerate() {
        if g.weight.dim() != p.weight.dim() || g.bias.dim() != p.bias.dim() {
            return Err(AutonetError::Shape(format!("gradient of layer {k}")));
        }
        for (tensor, finite) in [
            ("weight", g.weight.iter().all(|v| v.is_finite())),
            ("bias", g.bias.iter().all(|v| v.is_finite())),
        ] {
            if !finite {
                return Err(AutonetError::NonFiniteGradient {
                    layer: k,
                    tensor,
                    step: state.step,
                });
            }
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let update = |theta: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *theta -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (((p, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        ndarray::Zip::from(&mut p.weight)
            .and(&g.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .for_each(|t, &gv, mv, vv| update(t, gv, mv, vv));
        ndarray::Zip::from(&mut p.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(|t, &gv, mv, vv| update(t, gv, mv, vv));
    }
    params.touch();
    Ok(())
}

/// Step decay: `initial * factor^floor(epoch / period)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub period: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 5e-4,
            factor: 0.6,
            period: 50,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        self.initial * self.factor.powi((epoch / self.period.max(1)) as i32)
    }
}

pub fn lr_schedule(epoch: usize) -> f64 {
    LrSchedule::default().at(epoch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: NetworkArch,
    parameter_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epoch: Option<usize>,
}

/// Writes `SFNN`, the version byte, the header length (`u32` LE), a JSON
/// header and the weights as little-endian `f32` in layer order (weight
/// rows, then bias, per layer).
pub fn save_params(params: &NetworkParams, epoch: Option<usize>, path: &Path) -> Result<(), AutonetError> {
    let header = CheckpointHeader {
        arch: params.arch,
        parameter_count: params.flat_len(),
        epoch,
    };
    let json = serde_json::to_vec(&header).map_err(|e| AutonetError::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(9 + json.len() + 4 * header.parameter_count);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.push(CHECKPOINT_VERSION);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in params.to_flat() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Loads a checkpoint and the epoch recorded in it.
pub fn load_params(path: &Path) -> Result<(NetworkParams, Option<usize>), AutonetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_params(&bytes)
}

/// As [`load_params`], failing unless the stored architecture is `expected`.
pub fn load_params_expecting(path: &Path, expected: &NetworkArch) -> Result<(NetworkParams, Option<usize>), AutonetError> {
    let (params, epoch) = load_params(path)?;
    if params.arch != *expected {
        return Err(AutonetError::ArchMismatch {
            found: params.arch,
            expected: *expected,
        });
    }
    Ok((params, epoch))
}

pub fn decode_params(bytes: &[u8]) -> Result<(NetworkParams, Option<usize>), AutonetError> {
    let bad = |msg: &str| AutonetError::Checkpoint(msg.to_string());
    if bytes.len() < 9 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic or truncated header"));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(AutonetError::Checkpoint(format!("unsupported version {}", bytes[4])));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let header_end = 9 + header_len;
    if bytes.len() < header_end {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[9..header_end]).map_err(|e| AutonetError::Checkpoint(e.to_string()))?;
    header.arch.validate()?;
    if header.parameter_count != header.arch.parameter_count() {
        return Err(bad("parameter count does not match the architecture"));
    }
    let payload = &bytes[header_end..];
    if payload.len() != 4 * header.parameter_count {
        return Err(AutonetError::Checkpoint(format!(
            "{} weight bytes, expected {}",
            payload.len(),
            4 * header.parameter_count
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
    let layers = header
        .arch
        .layer_shapes()
        .into_iter()
        .map(|(o, i)| Layer {
            weight: Array2::from_shape_simple_fn((o, i), || values.next().unwrap()),
            bias: Array1::from_shape_simple_fn(o, || values.next().unwrap()),
        })
        .collect();
    Ok((NetworkParams::from_layers(header.arch, layers)?, header.epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert_eq!(silu_grad(0.0), 0.5);
        assert!((silu(20.0) - 20.0).abs() < 1e-7);
        assert!((silu(1.0) - 0.731_058_578_6).abs() < 1e-10);
        assert!(silu(-800.0).abs() < 1e-300 && silu(-800.0).is_finite());
        for x in [-3.0, -0.4, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_layout() {
        let arch = NetworkArch::residual(3, 16);
        assert_eq!(arch.linear_layers(), 8);
        assert_eq!(arch.layer_shapes().len(), 8);
        assert_eq!(arch.layer_shapes()[0], (16, 6));
        assert_eq!(arch.layer_shapes()[7], (1, 16));
        let plain = NetworkArch::plain(6, 16);
        assert_eq!(plain.layer_shapes().len(), 6);
        assert_eq!(NetworkArch::plain(1, 16).layer_shapes(), vec![(1, 6)]);
        assert!(NetworkArch::residual(0, 16).validate().is_err());
        assert!(NetworkArch::plain(3, 0).validate().is_err());
    }

    /// H = 2, one block, weights set by hand.
    fn tiny_network() -> NetworkParams {
        let arch = NetworkArch {
            kind: NetworkKind::Residual,
            input_dim: 2,
            output_dim: 1,
            hidden_width: 2,
            depth: 1,
        };
        let layers = vec![
            Layer { weight: array![[1.0, -1.0], [0.5, 2.0]], bias: array![0.1, -0.2] },
            Layer { weight: array![[0.3, 0.0], [-0.4, 1.0]], bias: array![0.0, 0.5] },
            Layer { weight: array![[2.0, 1.0], [0.0, -1.0]], bias: array![-0.1, 0.2] },
            Layer { weight: array![[1.5, -0.5]], bias: array![0.05] },
        ];
        NetworkParams::from_layers(arch, layers).unwrap()
    }

    #[test]
    fn tiny_network_matches_hand_evaluation() {
        let params = tiny_network();
        let (x1, x2) = (0.3, -0.7);
        // Input projection.
        let h1 = x1 - x2 + 0.1;
        let h2 = 0.5 * x1 + 2.0 * x2 - 0.2;
        // Block: u = W1 h + b1, a = silu(u), h += W2 a + b2.
        let u1 = 0.3 * h1;
        let u2 = -0.4 * h1 + h2 + 0.5;
        let (a1, a2) = (silu(u1), silu(u2));
        let g1 = h1 + 2.0 * a1 + a2 - 0.1;
        let g2 = h2 - a2 + 0.2;
        let expected = 1.5 * g1 - 0.5 * g2 + 0.05;
        let (out, _) = forward(&params, array![[x1, x2]].view()).unwrap();
        assert!((out[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn zeroed_second_layers_make_identity_trunk() {
        let mut params = init_params(NetworkArch::residual(3, 8), 5).unwrap();
        let n = params.layers.len();
        for b in 0..3 {
            let l = &mut params.layers[2 + 2 * b];
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        params.touch();
        let x = random_batch(5, 6, 1);
        let (_, cache) = forward(&params, x.view()).unwrap();
        let projected = params.layers[0].apply(&x.view());
        assert_eq!(cache.inputs[n - 1], projected);
    }

    fn loss_of(params: &NetworkParams, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let (out, _) = forward(params, x.view()).unwrap();
        mse(out.view(), y.view()).unwrap().0
    }

    fn check_gradients(arch: NetworkArch) {
        let params = init_params(arch, 11).unwrap();
        let x = random_batch(32, 6, 2);
        let y = random_batch(32, 1, 3);
        let (out, cache) = forward(&params, x.view()).unwrap();
        let (_, g) = mse(out.view(), y.view()).unwrap();
        let analytic = backward(&params, &cache, g.view()).unwrap();

        let h = 1e-6;
        for (k, layer) in analytic.layers.iter().enumerate() {
            let entries = layer
                .weight
                .indexed_iter()
                .map(|((i, j), &v)| ((i, Some(j)), v))
                .chain(layer.bias.indexed_iter().map(|(i, &v)| ((i, None), v)));
            for (idx, ga) in entries {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let (i, j) = idx;
                let bump = |p: &mut NetworkParams, d: f64| {
                    match j {
                        Some(j) => p.layers[k].weight[[i, j]] += d,
                        None => p.layers[k].bias[i] += d,
                    }
                    p.touch();
                };
                bump(&mut plus, h);
                bump(&mut minus, -h);
                let fd = (loss_of(&plus, &x, &y) - loss_of(&minus, &x, &y)) / (2.0 * h);
                let scale = ga.abs().max(fd.abs()).max(1e-3);
                assert!(
                    (ga - fd).abs() / scale < 1e-5,
                    "{} layer {k} {:?}: analytic {ga} vs fd {fd}",
                    arch.label(),
                    idx
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(NetworkArch::residual(3, 16));
        check_gradients(NetworkArch::plain(6, 16));
    }

    #[test]
    fn backward_linearity_and_stale_cache() {
        let mut params = init_params(NetworkArch::residual(2, 8), 4).unwrap();
        let x = random_batch(4, 6, 9);
        let (_, cache) = forward(&params, x.view()).unwrap();
        let zero = backward(&params, &cache, Array2::zeros((4, 1)).view()).unwrap();
        assert!(zero.to_flat().iter().all(|&v| v == 0.0));

        // A duplicated row doubles its contribution.
        let single = x.slice(s![0..1, ..]).to_owned();
        let doubled = ndarray::concatenate![Axis(0), single, single];
        let (_, c1) = forward(&params, single.view()).unwrap();
        let (_, c2) = forward(&params, doubled.view()).unwrap();
        let g1 = backward(&params, &c1, Array2::ones((1, 1)).view()).unwrap().to_flat();
        let g2 = backward(&params, &c2, Array2::ones((2, 1)).view()).unwrap().to_flat();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }

        let grads = backward(&params, &cache, Array2::ones((4, 1)).view()).unwrap();
        let mut state = AdamState::new(&params.arch);
        adam_update(&mut params, &grads, &mut state, 1e-3).unwrap();
        assert!(matches!(
            backward(&params, &cache, Array2::ones((4, 1)).view()),
            Err(AutonetError::StaleCache)
        ));
        assert!(matches!(forward(&params, Array2::zeros((2, 5)).view()), Err(AutonetError::Shape(_))));
    }

    #[test]
    fn mse_values() {
        let (l, _) = mse(array![[0.0], [1.0]].view(), array![[1.0], [1.0]].view()).unwrap();
        assert_eq!(l, 0.5);
        let p = array![[0.2], [0.4], [-1.0]];
        assert_eq!(mse(p.view(), p.view()).unwrap().0, 0.0);
        let (l, g) = mse((&p + 0.5).view(), p.view()).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        assert!(g.iter().all(|&v| (v - 2.0 * 0.5 / 3.0).abs() < 1e-15));
        assert!(mse(p.view(), array![[1.0]].view()).is_err());
    }

    /// Independent scalar Adam.
    fn scalar_adam(theta0: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut theta) = (0.0, 0.0, theta0);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            theta -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        theta
    }

    fn one_param_network(value: f64) -> NetworkParams {
        let arch = NetworkArch { kind: NetworkKind::Plain, input_dim: 1, output_dim: 1, hidden_width: 1, depth: 1 };
        NetworkParams::from_layers(arch, vec![Layer { weight: array![[value]], bias: array![0.0] }]).unwrap()
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 0.4, 1e-3, -3.0, 0.9];
        let mut params = one_param_network(0.25);
        let mut state = AdamState::new(&params.arch);
        for &g in &grads {
            let gr = Gradients { layers: vec![Layer { weight: array![[g]], bias: array![0.0] }] };
            adam_update(&mut params, &gr, &mut state, 1e-2).unwrap();
        }
        let expected = scalar_adam(0.25, &grads, 1e-2);
        assert!((params.layers[0].weight[[0, 0]] - expected).abs() < 1e-12);
        assert_eq!(state.step, 10);
        assert!(state.second_moment[0].weight[[0, 0]] >= 0.0);
    }

    #[test]
    fn adam_edge_cases() {
        let mut params = one_param_network(1.0);
        let mut state = AdamState::new(&params.arch);
        let zero = Gradients { layers: vec![Layer { weight: array![[0.0]], bias: array![0.0] }] };
        for _ in 0..5 {
            adam_update(&mut params, &zero, &mut state, 0.1).unwrap();
        }
        assert_eq!(params.layers[0].weight[[0, 0]], 1.0);

        let mut params = one_param_network(1.0);
        let mut state = AdamState::new(&params.arch);
        state.epsilon = 0.0;
        let g = Gradients { layers: vec![Layer { weight: array![[-4.0]], bias: array![0.0] }] };
        adam_update(&mut params, &g, &mut state, 0.1).unwrap();
        assert!((params.layers[0].weight[[0, 0]] - 1.1).abs() < 1e-15);

        let bad = Gradients { layers: vec![Layer { weight: array![[f64::NAN]], bias: array![0.0] }] };
        let err = adam_update(&mut params, &bad, &mut state, 0.1).unwrap_err();
        assert!(matches!(err, AutonetError::NonFiniteGradient { layer: 0, tensor: "weight", .. }));
        assert_eq!(state.step, 1);
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0), 5e-4);
        assert_eq!(lr_schedule(49), 5e-4);
        assert!((lr_schedule(50) - 3e-4).abs() < 1e-18);
        assert!((lr_schedule(100) - 1.8e-4).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn schedule_is_non_increasing_step(epoch in 0usize..5000) {
            prop_assert!(lr_schedule(epoch + 1) <= lr_schedule(epoch));
            prop_assert_eq!(lr_schedule(epoch), lr_schedule(epoch / 50 * 50));
        }

        #[test]
        fn mse_non_negative(values in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20)) {
            let p = Array2::from_shape_fn((values.len(), 1), |(i, _)| values[i].0);
            let t = Array2::from_shape_fn((values.len(), 1), |(i, _)| values[i].1);
            let (l, _) = mse(p.view(), t.view()).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, values.iter().all(|(a, b)| a == b));
        }
    }

    #[test]
    fn init_is_seeded_glorot() {
        let arch = NetworkArch::residual(1, 512);
        let a = init_params(arch, 7).unwrap();
        let b = init_params(arch, 7).unwrap();
        let c = init_params(arch, 8).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        assert_ne!(a.to_flat(), c.to_flat());
        let w = &a.layers[1].weight;
        let mean = w.mean().unwrap();
        let var = w.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        let expected = 2.0 / (512.0 + 512.0);
        assert!((var / expected - 1.0).abs() < 0.1, "variance {var} vs {expected}");
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn fast_exp_matches_std() {
        let mut worst = 0.0f32;
        for i in -86_990..=87_990 {
            let x = i as f32 * 1e-3;
            let (a, b) = (exp_f32(x), x.exp());
            worst = worst.max((a - b).abs() / b);
        }
        assert!(worst < 4.0 * f32::EPSILON, "worst relative error {worst:e}");
        assert!(exp_f32(-1e4) >= 0.0 && exp_f32(-1e4) < 1e-37);
        assert!(exp_f32(1e4).is_finite());
    }

    #[test]
    fn inference_net_matches_forward_pass() {
        for arch in [NetworkArch::residual(3, 16), NetworkArch::plain(4, 16), NetworkArch::plain(1, 8)] {
            let params = init_params(arch, 9).unwrap();
            let rows = 3 * INFERENCE_TILE + 17;
            let x = random_batch(rows, 6, 4);
            let reference = predict(&params, x.view()).unwrap();
            let net = InferenceNet::new(&params);
            let xf = x.mapv(|v| v as f32);
            let y = net.predict(xf.view()).unwrap();
            assert_eq!(y.dim(), (rows, 1));
            let scale = reference.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (a, b) in y.iter().zip(reference.iter()) {
                assert!((*a as f64 - b).abs() <= 1e-5 * scale, "{} {a} vs {b}", arch.label());
            }
            // Each row depends only on its own input.
            for i in [0, INFERENCE_TILE - 1, INFERENCE_TILE, rows - 1] {
                let single = net.predict(xf.slice(s![i..i + 1, ..])).unwrap();
                assert_eq!(single[[0, 0]].to_bits(), y[[i, 0]].to_bits(), "{} row {i}", arch.label());
            }
            assert!(net.predict(Array2::<f32>::zeros((4, 5)).view()).is_err());
            assert_eq!(net.predict(Array2::<f32>::zeros((0, 6)).view()).unwrap().nrows(), 0);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let params = init_params(NetworkArch::residual(2, 16), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model_epoch0007.sfnn");
        save_params(&params, Some(7), &path).unwrap();
        let (loaded, epoch) = load_params_expecting(&path, &params.arch).unwrap();
        assert_eq!(epoch, Some(7));
        let x = random_batch(16, 6, 5);
        let a = predict(&params, x.view()).unwrap();
        let b = predict(&loaded, x.view()).unwrap();
        // Stored values are exactly the 32-bit roundings.
        let rounded: Vec<f64> = params.to_flat().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(loaded.to_flat(), rounded);
        assert_eq!(loaded, params.rounded_to_f32());
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() <= 1e-6 * scale, "{u} vs {v}");
        }

        assert!(matches!(
            load_params_expecting(&path, &NetworkArch::residual(3, 16)),
            Err(AutonetError::ArchMismatch { .. })
        ));
        let bytes = std::fs::read(&path).unwrap();
        assert!(decode_params(&bytes[..bytes.len() - 4]).is_err());
        assert!(decode_params(&bytes[..6]).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 2;
        assert!(decode_params(&wrong_version).is_err());
    }

    #[test]
    fn batched_prediction_is_batch_independent() {
        let params = init_params(NetworkArch::plain(4, 8), 1).unwrap();
        let x = random_batch(37, 6, 4);
        let whole = predict(&params, x.view()).unwrap();
        let chunks = predict_batched(&params, x.view(), 5).unwrap();
        let ones = predict_batched(&params, x.view(), 1).unwrap();
        let (out, _) = forward(&params, x.view()).unwrap();
        assert_eq!(whole, out);
        for ((a, b), c) in whole.iter().zip(chunks.iter()).zip(ones.iter()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            assert!((a - c).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }
}
