//! Frame-level predictor: a small per-frame MLP over a temporal context
//! window, with a sigmoid class head, a sigmoid confidence head, and a
//! pooling stage that turns frame probabilities into clip probabilities.
//!
//! The backward pass is written by hand and is checked against finite
//! differences over every parameter, including the pooling parameters and
//! the gradient that attention pooling sends back into the hidden state.
//!
//! Parameter layout (used by the flat views, the optimizer, weight
//! averaging, and checkpoints): hidden layers in order (weights row-major
//! input x output, then bias), class head (weights, bias), confidence head
//! (weights, bias), then pooling parameters (exponents, beta, attention head
//! row-major).

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{stream, Matrix, RngStream};
use crate::pooling::{pool_backward, pool_forward, PoolInput, PoolingKind, PoolingSpec};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Features per frame.
    pub input_dim: usize,
    /// Widths of the per-frame hidden layers; may be empty, in which case
    /// the heads read the windowed input directly.
    pub hidden_dims: Vec<usize>,
    /// The first layer sees 2 * radius + 1 consecutive frames, edges
    /// clamped to the clip boundary.
    pub context_radius: usize,
    pub num_classes: usize,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn context_window(&self) -> usize {
        2 * self.context_radius + 1
    }

    pub fn windowed_input_dim(&self) -> usize {
        self.input_dim * self.context_window()
    }

    /// Width of the hidden state the heads and attention pooling read.
    pub fn hidden_width(&self) -> usize {
        self.hidden_dims
            .last()
            .copied()
            .unwrap_or_else(|| self.windowed_input_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidInput(
                "model needs input_dim > 0 and num_classes > 0",
            ));
        }
        if self.hidden_dims.iter().any(|&w| w == 0) {
            return Err(Error::InvalidInput("hidden layer widths must be > 0"));
        }
        Ok(())
    }
}

/// One affine layer; weights are stored input-major (rows = inputs,
/// cols = outputs) so the forward pass accumulates along contiguous rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl DenseLayer {
    fn init(rng: &mut RngStream, inputs: usize, outputs: usize) -> Result<Self> {
        let std = libm::sqrt(1.0 / inputs as f64);
        let mut w = Matrix::zeros(inputs, outputs);
        for v in w.data_mut() {
            *v = rng.gaussian(0.0, std)?;
        }
        Ok(Self {
            w,
            b: vec![0.0; outputs],
        })
    }

    /// z = W^T x + b, accumulated input-by-input.
    #[inline]
    fn forward_into(&self, x: &[f64], z: &mut [f64]) {
        z.copy_from_slice(&self.b);
        for (xi, wrow) in x.iter().zip((0..x.len()).map(|r| self.w.row(r))) {
            let xv = *xi;
            for (zo, wo) in z.iter_mut().zip(wrow) {
                *zo += wo * xv;
            }
        }
    }
}

/// Every trainable tensor of the model. The same container carries
/// gradients and optimizer-shaped buffers; for those, only the numeric
/// fields matter and the aggregator metadata (kind, clamps) is inert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<DenseLayer>,
    pub class_head: DenseLayer,
    pub conf_head: DenseLayer,
    pub pooling: PoolingSpec,
}

/// Gradients reuse the parameter container.
pub type ModelGrads = ModelParams;

/// Coarse parameter groups for freezing and for learning-rate scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Hidden,
    ClassHead,
    ConfHead,
    Pooling,
}

impl ModelParams {
    /// Fresh parameters: weights N(0, 1/fan_in), biases zero, drawn from the
    /// config seed in layout order (hidden layers, class head, confidence
    /// head, attention head if the pooling spec asks for one).
    pub fn init(cfg: &ModelConfig, pooling: PoolingSpec) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(cfg.seed, [stream::INIT, 0, 0]);
        let mut layers = Vec::with_capacity(cfg.hidden_dims.len());
        let mut width = cfg.windowed_input_dim();
        for &next in &cfg.hidden_dims {
            layers.push(DenseLayer::init(&mut rng, width, next)?);
            width = next;
        }
        let class_head = DenseLayer::init(&mut rng, width, cfg.num_classes)?;
        let conf_head = DenseLayer::init(&mut rng, width, cfg.num_classes)?;
        let mut pooling = pooling;
        if pooling.kind == PoolingKind::Attention && pooling.attention.is_none() {
            let fan_in = width + 1;
            let std = libm::sqrt(1.0 / fan_in as f64);
            let mut att = Matrix::zeros(cfg.num_classes, fan_in);
            for v in att.data_mut() {
                *v = rng.gaussian(0.0, std)?;
            }
            pooling.attention = Some(att);
        }
        pooling.validate(cfg.num_classes)?;
        Ok(Self {
            layers,
            class_head,
            conf_head,
            pooling,
        })
    }

    /// Same structure with every numeric entry zeroed (gradient buffer).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_params_mut(&mut |v| *v = 0.0);
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_| n += 1);
        n
    }

    /// Visits every trainable scalar in layout order.
    pub fn visit_params(&self, f: &mut dyn FnMut(f64)) {
        self.visit_blocks(&mut |_, xs| {
            for &x in xs {
                f(x);
            }
        });
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.visit_blocks_mut(&mut |_, xs| {
            for x in xs {
                f(x);
            }
        });
    }

    /// Visits every trainable slice in layout order with its group tag.
    pub fn visit_blocks(&self, f: &mut dyn FnMut(BlockKind, &[f64])) {
        for layer in &self.layers {
            f(BlockKind::Hidden, layer.w.data());
            f(BlockKind::Hidden, &layer.b);
        }
        f(BlockKind::ClassHead, self.class_head.w.data());
        f(BlockKind::ClassHead, &self.class_head.b);
        f(BlockKind::ConfHead, self.conf_head.w.data());
        f(BlockKind::ConfHead, &self.conf_head.b);
        f(BlockKind::Pooling, &self.pooling.n);
        f(
            BlockKind::Pooling,
            core::slice::from_ref(&self.pooling.beta),
        );
        if let Some(att) = &self.pooling.attention {
            f(BlockKind::Pooling, att.data());
        }
    }

    pub fn visit_blocks_mut(&mut self, f: &mut dyn FnMut(BlockKind, &mut [f64])) {
        for layer in &mut self.layers {
            f(BlockKind::Hidden, layer.w.data_mut());
            f(BlockKind::Hidden, &mut layer.b);
        }
        f(BlockKind::ClassHead, self.class_head.w.data_mut());
        f(BlockKind::ClassHead, &mut self.class_head.b);
        f(BlockKind::ConfHead, self.conf_head.w.data_mut());
        f(BlockKind::ConfHead, &mut self.conf_head.b);
        f(BlockKind::Pooling, &mut self.pooling.n);
        f(
            BlockKind::Pooling,
            core::slice::from_mut(&mut self.pooling.beta),
        );
        if let Some(att) = &mut self.pooling.attention {
            f(BlockKind::Pooling, att.data_mut());
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |v| out.push(v));
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidInput("flat parameter length mismatch"));
        }
        let mut i = 0;
        self.visit_params_mut(&mut |v| {
            *v = flat[i];
            i += 1;
        });
        Ok(())
    }

    /// self += scale * other, entry by entry in layout order. Both sides
    /// must have identical structure.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) -> Result<()> {
        let flat = other.to_flat();
        if flat.len() != self.param_count() {
            return Err(Error::InvalidInput("parameter structure mismatch"));
        }
        let mut i = 0;
        self.visit_params_mut(&mut |v| {
            *v += scale * flat[i];
            i += 1;
        });
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.visit_params_mut(&mut |v| *v *= k);
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |v| ok &= v.is_finite());
        ok
    }
}

/// Model outputs for one clip.
#[derive(Clone, Debug)]
pub struct PredictionBundle {
    /// Sigmoid class probabilities, frames x classes.
    pub frame_probs: Matrix,
    /// Pooled clip probability per class.
    pub clip_probs: Vec<f64>,
    /// Sigmoid confidence per frame and class.
    pub confidence: Matrix,
    /// Hidden state the heads read, frames x hidden width.
    pub hidden: Matrix,
}

/// Loss gradients with respect to the model outputs.
#[derive(Clone, Debug)]
pub struct BundleGrads {
    pub frame: Matrix,
    pub clip: Vec<f64>,
    pub conf: Matrix,
}

impl BundleGrads {
    pub fn zeros(frames: usize, classes: usize) -> Self {
        Self {
            frame: Matrix::zeros(frames, classes),
            clip: vec![0.0; classes],
            conf: Matrix::zeros(frames, classes),
        }
    }
}

/// Per-frame activations kept for the backward pass.
pub struct ForwardTrace {
    /// Context-windowed input, frames x windowed_input_dim.
    windowed: Matrix,
    /// Post-activation output of each hidden layer.
    acts: Vec<Matrix>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn build_windowed(features: &Matrix, cfg: &ModelConfig) -> Matrix {
    let t_frames = features.rows();
    let radius = cfg.context_radius as isize;
    let f_dim = cfg.input_dim;
    let mut windowed = Matrix::zeros(t_frames, cfg.windowed_input_dim());
    for t in 0..t_frames {
        let dst = windowed.row_mut(t);
        for (slot, dt) in (-radius..=radius).enumerate() {
            let src = (t as isize + dt).clamp(0, t_frames as isize - 1) as usize;
            dst[slot * f_dim..(slot + 1) * f_dim].copy_from_slice(features.row(src));
        }
    }
    windowed
}

fn forward_impl(
    features: &Matrix,
    cfg: &ModelConfig,
    params: &ModelParams,
    want_trace: bool,
) -> Result<(PredictionBundle, Option<ForwardTrace>)> {
    cfg.validate()?;
    params.pooling.validate(cfg.num_classes)?;
    if features.cols() != cfg.input_dim {
        return Err(Error::ShapeMismatch {
            context: "model input",
            expected: (features.rows(), cfg.input_dim),
            got: features.shape(),
        });
    }
    let t_frames = features.rows();
    if t_frames < cfg.context_window() {
        return Err(Error::InvalidInput(
            "clip shorter than the temporal context window",
        ));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("model input features"));
    }

    let windowed = build_windowed(features, cfg);
    let mut acts: Vec<Matrix> = Vec::with_capacity(params.layers.len());
    for (li, layer) in params.layers.iter().enumerate() {
        let prev: &Matrix = if li == 0 { &windowed } else { &acts[li - 1] };
        let mut out = Matrix::zeros(t_frames, layer.b.len());
        for t in 0..t_frames {
            layer.forward_into(prev.row(t), out.row_mut(t));
            for v in out.row_mut(t) {
                *v = leaky(*v);
            }
        }
        acts.push(out);
    }
    let hidden: &Matrix = acts.last().unwrap_or(&windowed);

    let c = cfg.num_classes;
    let mut frame_probs = Matrix::zeros(t_frames, c);
    let mut confidence = Matrix::zeros(t_frames, c);
    for t in 0..t_frames {
        let h = hidden.row(t);
        params.class_head.forward_into(h, frame_probs.row_mut(t));
        params.conf_head.forward_into(h, confidence.row_mut(t));
    }
    for v in frame_probs.data_mut() {
        *v = sigmoid(*v);
    }
    for v in confidence.data_mut() {
        *v = sigmoid(*v);
    }

    let mut clip_probs = Vec::with_capacity(c);
    let mut col = Vec::with_capacity(t_frames);
    for k in 0..c {
        frame_probs.copy_col_into(k, &mut col);
        clip_probs.push(pool_forward(
            &col,
            &params.pooling,
            k,
            PoolInput::with_features(hidden),
        )?);
    }

    let hidden_owned = hidden.clone();
    let bundle = PredictionBundle {
        frame_probs,
        clip_probs,
        confidence,
        hidden: hidden_owned,
    };
    let trace = want_trace.then_some(ForwardTrace { windowed, acts });
    Ok((bundle, trace))
}

/// Inference-mode forward pass.
pub fn forward(
    features: &Matrix,
    cfg: &ModelConfig,
    params: &ModelParams,
) -> Result<PredictionBundle> {
    forward_impl(features, cfg, params, false).map(|(b, _)| b)
}

/// Forward pass that also keeps the activations needed by [`backward`].
pub fn forward_traced(
    features: &Matrix,
    cfg: &ModelConfig,
    params: &ModelParams,
) -> Result<(PredictionBundle, ForwardTrace)> {
    forward_impl(features, cfg, params, true).map(|(b, t)| (b, t.expect("trace requested")))
}

/// Backpropagates output gradients to every trainable parameter.
///
/// `bgrads` holds dL/d(frame_probs), dL/d(clip_probs), dL/d(confidence) for
/// the bundle produced by [`forward_traced`] with these exact parameters.
pub fn backward(
    cfg: &ModelConfig,
    params: &ModelParams,
    bundle: &PredictionBundle,
    trace: &ForwardTrace,
    bgrads: &BundleGrads,
) -> Result<ModelGrads> {
    let t_frames = bundle.frame_probs.rows();
    let c = cfg.num_classes;
    if bgrads.frame.shape() != (t_frames, c)
        || bgrads.conf.shape() != (t_frames, c)
        || bgrads.clip.len() != c
    {
        return Err(Error::ShapeMismatch {
            context: "bundle gradients",
            expected: (t_frames, c),
            got: bgrads.frame.shape(),
        });
    }

    let mut grads = params.zeros_like();
    let hidden: &Matrix = trace.acts.last().unwrap_or(&trace.windowed);
    let hidden_width = hidden.cols();

    // Clip path: route dL/dclip through the aggregator, collecting the
    // induced frame gradients plus the aggregator's own parameter grads.
    let mut d_frame = bgrads.frame.clone();
    let mut d_hidden = Matrix::zeros(t_frames, hidden_width);
    let mut col = Vec::with_capacity(t_frames);
    for k in 0..c {
        let upstream = bgrads.clip[k];
        if upstream == 0.0 {
            continue;
        }
        bundle.frame_probs.copy_col_into(k, &mut col);
        let pg = pool_backward(
            &col,
            &params.pooling,
            k,
            upstream,
            PoolInput::with_features(hidden),
        )?;
        for t in 0..t_frames {
            let v = d_frame.get(t, k) + pg.frames[t];
            d_frame.set(t, k, v);
        }
        let slot = params.pooling.exponent_slot(k);
        if params.pooling.kind == PoolingKind::Power {
            grads.pooling.n[slot] += pg.n;
        }
        grads.pooling.beta += pg.beta;
        if let Some(row) = pg.attention_row {
            let att = grads
                .pooling
                .attention
                .as_mut()
                .expect("attention grads need an attention head");
            for (dst, src) in att.row_mut(k).iter_mut().zip(&row) {
                *dst += src;
            }
        }
        if let Some(feat) = pg.features {
            d_hidden.add_scaled(&feat, 1.0)?;
        }
    }

    // Head path: sigmoid derivative then affine backward, frame by frame.
    for t in 0..t_frames {
        let h = hidden.row(t);

        let probs = bundle.frame_probs.row(t);
        let dz: Vec<f64> = d_frame
            .row(t)
            .iter()
            .zip(probs)
            .map(|(g, p)| g * p * (1.0 - p))
            .collect();
        accumulate_affine(
            &mut grads.class_head,
            &params.class_head,
            h,
            &dz,
            d_hidden.row_mut(t),
        );

        let confs = bundle.confidence.row(t);
        let dzc: Vec<f64> = bgrads
            .conf
            .row(t)
            .iter()
            .zip(confs)
            .map(|(g, p)| g * p * (1.0 - p))
            .collect();
        accumulate_affine(
            &mut grads.conf_head,
            &params.conf_head,
            h,
            &dzc,
            d_hidden.row_mut(t),
        );
    }

    // Hidden layers in reverse. The activation sign recovers the leaky-ReLU
    // branch: outputs above zero came from the identity branch.
    let mut d_out = d_hidden;
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let act = &trace.acts[li];
        let prev: &Matrix = if li == 0 {
            &trace.windowed
        } else {
            &trace.acts[li - 1]
        };
        let mut d_prev = Matrix::zeros(t_frames, prev.cols());
        for t in 0..t_frames {
            let dz: Vec<f64> = d_out
                .row(t)
                .iter()
                .zip(act.row(t))
                .map(|(g, a)| if *a > 0.0 { *g } else { g * LEAKY_SLOPE })
                .collect();
            accumulate_affine(
                &mut grads.layers[li],
                layer,
                prev.row(t),
                &dz,
                d_prev.row_mut(t),
            );
        }
        d_out = d_prev;
    }

    Ok(grads)
}

/// dW += x outer dz, db += dz, dx += W dz for one frame.
#[inline]
fn accumulate_affine(
    grad: &mut DenseLayer,
    layer: &DenseLayer,
    x: &[f64],
    dz: &[f64],
    dx: &mut [f64],
) {
    for (gb, g) in grad.b.iter_mut().zip(dz) {
        *gb += g;
    }
    for (i, &xi) in x.iter().enumerate() {
        let grow = grad.w.row_mut(i);
        for (gw, g) in grow.iter_mut().zip(dz) {
            *gw += xi * g;
        }
        let wrow = layer.w.row(i);
        let mut acc = 0.0;
        for (w, g) in wrow.iter().zip(dz) {
            acc += w * g;
        }
        dx[i] += acc;
    }
}
