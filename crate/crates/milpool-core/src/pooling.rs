//! Aggregation of frame-level probabilities into one clip-level probability
//! per class, with analytic gradients for every trainable parameter.
//!
//! Six aggregators are provided. Max and Mean are the fixed extremes. Linear
//! pooling weights each frame by its own probability. Auto pooling weights
//! frames by exp(beta * y) with a trainable beta. Attention pooling derives
//! weights from the hidden state through a per-class affine head. Power
//! pooling generalizes Linear by weighting frames with y^n for a trainable
//! exponent n: n = 0 reproduces Mean, n = 1 reproduces Linear, and large n
//! approaches Max.
//!
//! The power aggregator's frame gradient changes sign exactly at
//! y = theta * clip_prob with theta = n / (n + 1): frames above that
//! threshold are pushed up during training, frames below are pushed down.
//! Because n is trained jointly with the model, the threshold adapts to the
//! data instead of being fixed by the choice of aggregator.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Frame probabilities are clamped to [PROB_FLOOR, 1] before any
/// exponentiation so 0^n and log(0) never appear.
pub const PROB_FLOOR: f64 = 1e-7;

/// Default upper clamp for the trainable exponent.
pub const DEFAULT_N_MAX: f64 = 20.0;

/// Default initial exponent. Small positive values train stably; starting
/// near Max (n around 10 or more) yields near-zero gradients for most
/// frames and tends to freeze training.
pub const DEFAULT_N_INIT: f64 = 1.2;

/// Lower clamp used when negative exponents are explicitly enabled. The
/// exponent must stay above -1 for the aggregate to remain a weighted mean,
/// so a small safety margin is kept.
pub const NEGATIVE_N_FLOOR: f64 = -1.0 + 0.05;

/// Attention logits are clamped to this magnitude before exponentiation.
pub const ATTENTION_LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolingKind {
    Max,
    Mean,
    Linear,
    Auto,
    Attention,
    Power,
}

/// Whether one exponent is shared by all classes or each class trains its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExponentSharing {
    Shared,
    PerClass,
}

/// Aggregator choice plus its trainable parameters.
///
/// `n` holds one entry when shared and one per class otherwise; entries stay
/// inside [n_min, n_max] (re-clamped after every optimizer step). `beta`
/// belongs to Auto pooling. `attention` holds one affine row per class over
/// the hidden state plus a bias column (shape classes x (hidden + 1)).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolingSpec {
    pub kind: PoolingKind,
    pub n: Vec<f64>,
    pub n_sharing: ExponentSharing,
    pub n_min: f64,
    pub n_max: f64,
    pub beta: f64,
    pub attention: Option<Matrix>,
}

impl PoolingSpec {
    pub fn new(kind: PoolingKind) -> Self {
        Self {
            kind,
            n: vec![DEFAULT_N_INIT],
            n_sharing: ExponentSharing::Shared,
            n_min: 0.0,
            n_max: DEFAULT_N_MAX,
            beta: 0.0,
            attention: None,
        }
    }

    pub fn power(n_init: f64) -> Self {
        let mut spec = Self::new(PoolingKind::Power);
        spec.n = vec![n_init];
        spec
    }

    pub fn power_per_class(n_init: f64, num_classes: usize) -> Self {
        let mut spec = Self::new(PoolingKind::Power);
        spec.n = vec![n_init; num_classes];
        spec.n_sharing = ExponentSharing::PerClass;
        spec
    }

    /// Widens the exponent clamp to allow negative values (above -1).
    pub fn allow_negative_exponent(&mut self) {
        self.n_min = NEGATIVE_N_FLOOR;
    }

    /// Exponent used for `class`, honoring the sharing mode.
    pub fn exponent(&self, class: usize) -> Result<f64> {
        match self.n_sharing {
            ExponentSharing::Shared => self
                .n
                .first()
                .copied()
                .ok_or(Error::InvalidInput("pooling spec has no exponent entries")),
            ExponentSharing::PerClass => self.n.get(class).copied().ok_or(Error::InvalidInput(
                "class index out of range for per-class exponents",
            )),
        }
    }

    /// Index into `n` that `class` trains, honoring the sharing mode.
    pub fn exponent_slot(&self, class: usize) -> usize {
        match self.n_sharing {
            ExponentSharing::Shared => 0,
            ExponentSharing::PerClass => class,
        }
    }

    /// Re-applies parameter clamps; called after every optimizer step.
    pub fn clamp_params(&mut self) {
        for n in &mut self.n {
            *n = n.clamp(self.n_min, self.n_max);
        }
    }

    /// Gradient sign-crossover threshold for `class` (power pooling).
    pub fn threshold(&self, class: usize) -> Result<f64> {
        Ok(power_threshold(self.exponent(class)?))
    }

    /// Number of trainable parameters carried by the aggregator itself.
    pub fn param_count(&self) -> usize {
        match self.kind {
            PoolingKind::Max | PoolingKind::Mean | PoolingKind::Linear => 0,
            PoolingKind::Auto => 1,
            PoolingKind::Attention => self
                .attention
                .as_ref()
                .map(|m| m.rows() * m.cols())
                .unwrap_or(0),
            PoolingKind::Power => self.n.len(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.n_min.is_nan() || self.n_max.is_nan() || self.n_min >= self.n_max {
            return Err(Error::InvalidInput("pooling n_min must be below n_max"));
        }
        if self.n_min < NEGATIVE_N_FLOOR {
            return Err(Error::InvalidInput(
                "pooling exponents below -0.95 are not supported",
            ));
        }
        let expected = match self.n_sharing {
            ExponentSharing::Shared => 1,
            ExponentSharing::PerClass => num_classes,
        };
        if self.n.len() != expected {
            return Err(Error::InvalidInput(
                "pooling exponent count does not match sharing mode",
            ));
        }
        if self.n.iter().any(|n| !n.is_finite()) || !self.beta.is_finite() {
            return Err(Error::NonFinite("pooling parameters"));
        }
        if self.kind == PoolingKind::Attention {
            match &self.attention {
                None => {
                    return Err(Error::InvalidInput(
                        "attention pooling needs an attention head",
                    ))
                }
                Some(m) => {
                    if m.rows() != num_classes {
                        return Err(Error::ShapeMismatch {
                            context: "attention head rows",
                            expected: (num_classes, m.cols()),
                            got: m.shape(),
                        });
                    }
                    if !m.is_finite() {
                        return Err(Error::NonFinite("attention head"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// theta = n / (n + 1), the fraction of the clip probability at which the
/// power aggregator's frame gradient changes sign.
pub fn power_threshold(n: f64) -> f64 {
    n / (n + 1.0)
}

/// Gradients of one pooled clip probability, already multiplied by the
/// upstream factor dL/d(clip_prob).
#[derive(Clone, Debug)]
pub struct PoolGrads {
    pub clip_prob: f64,
    /// dL/dy for every frame probability of this class.
    pub frames: Vec<f64>,
    /// dL/dn for this class's exponent (power pooling, else 0).
    pub n: f64,
    /// dL/dbeta (auto pooling, else 0).
    pub beta: f64,
    /// dL/d(attention row) for this class: hidden + 1 entries (attention pooling).
    pub attention_row: Option<Vec<f64>>,
    /// dL/d(hidden state) contributions through the attention weights.
    pub features: Option<Matrix>,
}

/// Context handed to the attention aggregator; other kinds ignore it.
#[derive(Clone, Copy)]
pub struct PoolInput<'a> {
    /// Hidden state, one row per frame. Required for attention pooling.
    pub features: Option<&'a Matrix>,
}

impl<'a> PoolInput<'a> {
    pub fn none() -> Self {
        Self { features: None }
    }

    pub fn with_features(features: &'a Matrix) -> Self {
        Self {
            features: Some(features),
        }
    }
}

fn check_probs(frame_probs: &[f64]) -> Result<()> {
    if frame_probs.is_empty() {
        return Err(Error::InvalidInput("pooling needs at least one frame"));
    }
    if frame_probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("frame probabilities"));
    }
    Ok(())
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0)
}

/// Clip probability for `class`. See [`pool_backward`] for the gradients.
pub fn pool_forward(
    frame_probs: &[f64],
    spec: &PoolingSpec,
    class: usize,
    input: PoolInput<'_>,
) -> Result<f64> {
    check_probs(frame_probs)?;
    let t = frame_probs.len() as f64;
    match spec.kind {
        PoolingKind::Max => Ok(frame_probs
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
            .clamp(0.0, 1.0)),
        PoolingKind::Mean => {
            let s1: f64 = frame_probs.iter().map(|&p| clamp_prob(p)).sum();
            Ok(s1 / t)
        }
        PoolingKind::Linear => {
            let (mut s0, mut s1) = (0.0, 0.0);
            for &p in frame_probs {
                let y = clamp_prob(p);
                s0 += y;
                s1 += y * y;
            }
            Ok(s1 / s0)
        }
        PoolingKind::Power => {
            let n = spec.exponent(class)?;
            let (mut s0, mut s1) = (0.0, 0.0);
            for &p in frame_probs {
                let y = clamp_prob(p);
                let w = libm::exp(n * libm::log(y));
                s0 += w;
                s1 += w * y;
            }
            Ok(s1 / s0)
        }
        PoolingKind::Auto => {
            let beta = spec.beta;
            let m = frame_probs
                .iter()
                .map(|&p| beta * clamp_prob(p))
                .fold(f64::NEG_INFINITY, f64::max);
            let (mut s0, mut s1) = (0.0, 0.0);
            for &p in frame_probs {
                let y = clamp_prob(p);
                let w = libm::exp(beta * y - m);
                s0 += w;
                s1 += w * y;
            }
            Ok(s1 / s0)
        }
        PoolingKind::Attention => {
            let (w, _logit_live) = attention_weights(frame_probs.len(), spec, class, &input)?;
            let (mut s0, mut s1) = (0.0, 0.0);
            for (&p, &wi) in frame_probs.iter().zip(&w) {
                let y = clamp_prob(p);
                s0 += wi;
                s1 += wi * y;
            }
            Ok(s1 / s0)
        }
    }
}

/// Stabilized attention weights plus a mask of logits inside the clamp
/// (clamped logits have zero gradient).
fn attention_weights(
    t_frames: usize,
    spec: &PoolingSpec,
    class: usize,
    input: &PoolInput<'_>,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let head = spec
        .attention
        .as_ref()
        .ok_or(Error::InvalidInput("attention pooling needs a head"))?;
    let features = input.features.ok_or(Error::InvalidInput(
        "attention pooling needs hidden features",
    ))?;
    if class >= head.rows() {
        return Err(Error::InvalidInput("attention class index out of range"));
    }
    if features.rows() != t_frames || features.cols() + 1 != head.cols() {
        return Err(Error::ShapeMismatch {
            context: "attention features",
            expected: (t_frames, head.cols() - 1),
            got: features.shape(),
        });
    }
    let row = head.row(class);
    let (coef, bias) = row.split_at(row.len() - 1);
    let mut w = Vec::with_capacity(t_frames);
    let mut live = Vec::with_capacity(t_frames);
    for tf in 0..t_frames {
        let h = features.row(tf);
        let mut logit = bias[0];
        for (a, x) in coef.iter().zip(h) {
            logit += a * x;
        }
        live.push(logit.abs() <= ATTENTION_LOGIT_CLAMP);
        w.push(libm::exp(
            logit.clamp(-ATTENTION_LOGIT_CLAMP, ATTENTION_LOGIT_CLAMP),
        ));
    }
    Ok((w, live))
}

/// Clip probability plus every gradient, scaled by `upstream`.
///
/// Gradients are taken at the clamped frame values; the clamp itself is not
/// differentiated. Max pooling uses the subgradient that assigns everything
/// to the first maximal frame.
pub fn pool_backward(
    frame_probs: &[f64],
    spec: &PoolingSpec,
    class: usize,
    upstream: f64,
    input: PoolInput<'_>,
) -> Result<PoolGrads> {
    check_probs(frame_probs)?;
    if !upstream.is_finite() {
        return Err(Error::NonFinite("upstream gradient"));
    }
    let t_len = frame_probs.len();
    let t = t_len as f64;
    let mut grads = PoolGrads {
        clip_prob: 0.0,
        frames: vec![0.0; t_len],
        n: 0.0,
        beta: 0.0,
        attention_row: None,
        features: None,
    };
    match spec.kind {
        PoolingKind::Max => {
            let mut best = 0usize;
            for (i, &p) in frame_probs.iter().enumerate() {
                if p > frame_probs[best] {
                    best = i;
                }
            }
            grads.clip_prob = clamp_prob(frame_probs[best]).clamp(0.0, 1.0);
            grads.frames[best] = upstream;
        }
        PoolingKind::Mean => {
            let s1: f64 = frame_probs.iter().map(|&p| clamp_prob(p)).sum();
            grads.clip_prob = s1 / t;
            for g in &mut grads.frames {
                *g = upstream / t;
            }
        }
        PoolingKind::Linear => {
            let (mut s0, mut s1) = (0.0, 0.0);
            for &p in frame_probs {
                let y = clamp_prob(p);
                s0 += y;
                s1 += y * y;
            }
            let clip = s1 / s0;
            grads.clip_prob = clip;
            for (g, &p) in grads.frames.iter_mut().zip(frame_probs) {
                let y = clamp_prob(p);
                *g = upstream * (2.0 * y - clip) / s0;
            }
        }
        PoolingKind::Power => {
            let n = spec.exponent(class)?;
            let theta = power_threshold(n);
            // Two passes: accumulate the weighted sums, then emit gradients.
            // ln y is reused for both y^n and the exponent gradient.
            let mut ln_y = Vec::with_capacity(t_len);
            let mut pow_n = Vec::with_capacity(t_len);
            let (mut s0, mut s1) = (0.0, 0.0);
            for &p in frame_probs {
                let y = clamp_prob(p);
                let l = libm::log(y);
                let w = libm::exp(n * l);
                ln_y.push(l);
                pow_n.push(w);
                s0 += w;
                s1 += w * y;
            }
            let clip = s1 / s0;
            grads.clip_prob = clip;
            // Frame gradient in factored form,
            //   (n + 1) * y^(n-1) * (y - theta * clip) / s0,
            // equal to ((n+1) y^n - n y^(n-1) clip) / s0 but with the sign
            // crossover at y = theta * clip exact by construction.
            let scale = upstream * (n + 1.0) / s0;
            for i in 0..t_len {
                let y = clamp_prob(frame_probs[i]);
                grads.frames[i] = scale * (pow_n[i] / y) * (y - theta * clip);
            }
            // d(clip)/dn = (sum y^(n+1) ln y - clip * sum y^n ln y) / s0,
            // the weighted covariance of y and ln y: never negative inputs
            // push n toward Max, dominant-low inputs push it toward Mean.
            let (mut d1, mut d0) = (0.0, 0.0);
            for i in 0..t_len {
                let y = clamp_prob(frame_probs[i]);
                d1 += pow_n[i] * y * ln_y[i];
                d0 += pow_n[i] * ln_y[i];
            }
            grads.n = upstream * (d1 - clip * d0) / s0;
        }
        PoolingKind::Auto => {
            let beta = spec.beta;
            let m = frame_probs
                .iter()
                .map(|&p| beta * clamp_prob(p))
                .fold(f64::NEG_INFINITY, f64::max);
            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
            let mut w = Vec::with_capacity(t_len);
            for &p in frame_probs {
                let y = clamp_prob(p);
                let wi = libm::exp(beta * y - m);
                w.push(wi);
                s0 += wi;
                s1 += wi * y;
                s2 += wi * y * y;
            }
            let clip = s1 / s0;
            grads.clip_prob = clip;
            for i in 0..t_len {
                let y = clamp_prob(frame_probs[i]);
                grads.frames[i] = upstream * w[i] * (1.0 + beta * (y - clip)) / s0;
            }
            // d(clip)/dbeta is the weighted variance of y, so raising beta
            // always moves the aggregate toward Max.
            grads.beta = upstream * (s2 / s0 - clip * clip);
        }
        PoolingKind::Attention => {
            let (w, live) = attention_weights(t_len, spec, class, &input)?;
            let features = input.features.expect("checked by attention_weights");
            let hidden = features.cols();
            let (mut s0, mut s1) = (0.0, 0.0);
            for (&p, &wi) in frame_probs.iter().zip(&w) {
                s0 += wi;
                s1 += wi * clamp_prob(p);
            }
            let clip = s1 / s0;
            grads.clip_prob = clip;
            let mut row_grad = vec![0.0; hidden + 1];
            let mut feat = Matrix::zeros(t_len, hidden);
            let head = spec.attention.as_ref().expect("checked");
            let coef = &head.row(class)[..hidden];
            for i in 0..t_len {
                let y = clamp_prob(frame_probs[i]);
                grads.frames[i] = upstream * w[i] / s0;
                if !live[i] {
                    continue;
                }
                // d(clip)/d(logit_i) = w_i * (y_i - clip) / s0.
                let dlogit = upstream * w[i] * (y - clip) / s0;
                let h = features.row(i);
                for (rg, x) in row_grad[..hidden].iter_mut().zip(h) {
                    *rg += dlogit * x;
                }
                row_grad[hidden] += dlogit;
                let frow = feat.row_mut(i);
                for (fg, a) in frow.iter_mut().zip(coef) {
                    *fg = dlogit * a;
                }
            }
            grads.attention_row = Some(row_grad);
            grads.features = Some(feat);
        }
    }
    Ok(grads)
}
