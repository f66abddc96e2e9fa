//! Loss functions for the two training stages.
//!
//! Stage one trains a student against clip labels (and frame labels where
//! available) plus a consistency term that keeps it close to the averaged
//! teacher. A confidence head is trained in a second phase through an
//! interpolation trick: the class output is blended toward the target by
//! the predicted confidence, and a log penalty stops the head from simply
//! claiming full confidence everywhere. Stage two retrains from pseudo
//! labels with per-entry confidence weights.
//!
//! Normalization conventions, used consistently everywhere: frame-level
//! terms average over frames x classes, clip-level terms average over
//! classes, and the weighted stage-two loss divides by the weight sum.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BundleGrads, PredictionBundle};
use crate::numerics::Matrix;

/// Probabilities are clamped to [BCE_CLAMP, 1 - BCE_CLAMP] inside the
/// cross-entropy so log never sees zero. Gradients are taken at the
/// clamped value.
pub const BCE_CLAMP: f64 = 1e-7;

/// Binary cross-entropy, safe at p = 0 and p = 1.
pub fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(t * libm::log(p) + (1.0 - t) * libm::log(1.0 - p))
}

/// d bce / dp at the clamped probability.
pub fn bce_grad(p: f64, t: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -t / p + (1.0 - t) / (1.0 - p)
}

/// Label availability for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FrameTargets {
    /// Frame-level labels plus the clip labels they imply.
    Strong {
        frames: Matrix,
        clip: Vec<f64>,
    },
    /// Clip-level labels only.
    Weak {
        clip: Vec<f64>,
    },
    Unlabeled,
}

impl FrameTargets {
    /// Strong targets with clip labels derived as the per-class maximum of
    /// the frame labels, so the two can never disagree.
    pub fn strong_from_frames(frames: Matrix) -> Self {
        let mut clip = vec![0.0; frames.cols()];
        for t in 0..frames.rows() {
            for (c, v) in clip.iter_mut().zip(frames.row(t)) {
                if *v > *c {
                    *c = *v;
                }
            }
        }
        FrameTargets::Strong { frames, clip }
    }

    pub fn is_strong(&self) -> bool {
        matches!(self, FrameTargets::Strong { .. })
    }

    pub fn clip_targets(&self) -> Option<&[f64]> {
        match self {
            FrameTargets::Strong { clip, .. } => Some(clip),
            FrameTargets::Weak { clip } => Some(clip),
            FrameTargets::Unlabeled => None,
        }
    }

    pub fn frame_targets(&self) -> Option<&Matrix> {
        match self {
            FrameTargets::Strong { frames, .. } => Some(frames),
            _ => None,
        }
    }
}

/// Scalar weights of the combined losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the confidence penalty. Smaller values let confidence
    /// spread out more; larger values push it toward 1 everywhere.
    pub lambda: f64,
    /// Final weight of the consistency term once the ramp completes.
    pub mu_max: f64,
    /// Epochs over which the consistency weight ramps up.
    pub ramp_epochs: u32,
    /// Stage-two interpolation between confidence weighting (1) and
    /// uniform weighting (0).
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.03,
            mu_max: 1.0,
            ramp_epochs: 15,
            alpha: 1.0,
        }
    }
}

/// Consistency weight for an epoch: mu_max * exp(-5 (1 - min(e/ramp, 1))^2),
/// the usual sigmoid-shaped warm-up. A zero ramp means full weight from the
/// first epoch.
pub fn mu_schedule(epoch: u32, weights: &LossWeights) -> f64 {
    if weights.ramp_epochs == 0 {
        return weights.mu_max;
    }
    let progress = (epoch as f64 / weights.ramp_epochs as f64).min(1.0);
    let gap = 1.0 - progress;
    weights.mu_max * libm::exp(-5.0 * gap * gap)
}

/// Confidence-blended output y' = (1 - c) * t + c * y, entrywise.
pub fn hinted_output(y: &Matrix, c: &Matrix, t: &Matrix) -> Result<Matrix> {
    if y.shape() != c.shape() || y.shape() != t.shape() {
        return Err(Error::ShapeMismatch {
            context: "hinted_output",
            expected: y.shape(),
            got: c.shape(),
        });
    }
    let mut out = y.clone();
    for ((o, cv), tv) in out.data_mut().iter_mut().zip(c.data()).zip(t.data()) {
        *o = (1.0 - cv) * tv + cv * *o;
    }
    Ok(out)
}

/// Classification loss pieces and their gradients.
#[derive(Clone, Debug)]
pub struct ClassificationParts {
    /// Mean frame-level cross-entropy (0 unless strong labels).
    pub frame_term: f64,
    /// Mean clip-level cross-entropy (0 for unlabeled clips).
    pub clip_term: f64,
    pub d_frame: Matrix,
    pub d_clip: Vec<f64>,
    pub d_conf: Matrix,
}

/// Frame plus clip cross-entropy for one clip, honoring label availability.
///
/// With `use_hint`, the frame output is first blended toward the target by
/// the confidence head, which requires strong labels: requesting the hint
/// on weak or unlabeled clips is an error.
pub fn classification_loss(
    bundle: &PredictionBundle,
    targets: &FrameTargets,
    use_hint: bool,
) -> Result<ClassificationParts> {
    let (t_frames, classes) = bundle.frame_probs.shape();
    if bundle.clip_probs.len() != classes || bundle.confidence.shape() != (t_frames, classes) {
        return Err(Error::ShapeMismatch {
            context: "classification_loss bundle",
            expected: (t_frames, classes),
            got: bundle.confidence.shape(),
        });
    }
    let mut parts = ClassificationParts {
        frame_term: 0.0,
        clip_term: 0.0,
        d_frame: Matrix::zeros(t_frames, classes),
        d_clip: vec![0.0; classes],
        d_conf: Matrix::zeros(t_frames, classes),
    };
    if use_hint && !targets.is_strong() {
        return Err(Error::InvalidInput(
            "confidence hint needs frame-level labels",
        ));
    }

    if let Some(frames) = targets.frame_targets() {
        if frames.shape() != (t_frames, classes) {
            return Err(Error::ShapeMismatch {
                context: "frame targets",
                expected: (t_frames, classes),
                got: frames.shape(),
            });
        }
        let norm = 1.0 / (t_frames * classes) as f64;
        let mut acc = 0.0;
        for i in 0..t_frames {
            let y = bundle.frame_probs.row(i);
            let c = bundle.confidence.row(i);
            let tr = frames.row(i);
            let dy = parts.d_frame.row_mut(i);
            for k in 0..classes {
                if use_hint {
                    let blended = (1.0 - c[k]) * tr[k] + c[k] * y[k];
                    acc += bce(blended, tr[k]);
                    let g = bce_grad(blended, tr[k]) * norm;
                    dy[k] = g * c[k];
                    parts.d_conf.set(i, k, g * (y[k] - tr[k]));
                } else {
                    acc += bce(y[k], tr[k]);
                    dy[k] = bce_grad(y[k], tr[k]) * norm;
                }
            }
        }
        parts.frame_term = acc * norm;
    }

    if let Some(clip) = targets.clip_targets() {
        if clip.len() != classes {
            return Err(Error::ShapeMismatch {
                context: "clip targets",
                expected: (1, classes),
                got: (1, clip.len()),
            });
        }
        let norm = 1.0 / classes as f64;
        let mut acc = 0.0;
        for k in 0..classes {
            acc += bce(bundle.clip_probs[k], clip[k]);
            parts.d_clip[k] = bce_grad(bundle.clip_probs[k], clip[k]) * norm;
        }
        parts.clip_term = acc * norm;
    }

    Ok(parts)
}

/// Mean squared distance between student and teacher outputs, frame level
/// plus clip level. Gradients flow to the student only.
pub fn consistency_loss(
    student: &PredictionBundle,
    teacher: &PredictionBundle,
) -> Result<(f64, Matrix, Vec<f64>)> {
    let (t_frames, classes) = student.frame_probs.shape();
    if teacher.frame_probs.shape() != (t_frames, classes)
        || teacher.clip_probs.len() != student.clip_probs.len()
    {
        return Err(Error::ShapeMismatch {
            context: "consistency_loss",
            expected: (t_frames, classes),
            got: teacher.frame_probs.shape(),
        });
    }
    let frame_norm = 1.0 / (t_frames * classes) as f64;
    let mut value = 0.0;
    let mut d_frame = Matrix::zeros(t_frames, classes);
    for ((d, s), t) in d_frame
        .data_mut()
        .iter_mut()
        .zip(student.frame_probs.data())
        .zip(teacher.frame_probs.data())
    {
        let diff = s - t;
        value += diff * diff * frame_norm;
        *d = 2.0 * diff * frame_norm;
    }
    let clip_norm = 1.0 / classes as f64;
    let mut d_clip = vec![0.0; classes];
    for (k, d) in d_clip.iter_mut().enumerate() {
        let diff = student.clip_probs[k] - teacher.clip_probs[k];
        value += diff * diff * clip_norm;
        *d = 2.0 * diff * clip_norm;
    }
    Ok((value, d_frame, d_clip))
}

/// Mean negative log confidence: drives confidence up, balancing the hint
/// blend which rewards low confidence.
pub fn confidence_penalty(confidence: &Matrix) -> Result<(f64, Matrix)> {
    if confidence.data().iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("confidence"));
    }
    let norm = 1.0 / (confidence.rows() * confidence.cols()) as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(confidence.rows(), confidence.cols());
    for (g, &c) in grad.data_mut().iter_mut().zip(confidence.data()) {
        let cc = c.clamp(BCE_CLAMP, 1.0);
        value += -libm::log(cc) * norm;
        *g = -norm / cc;
    }
    Ok((value, grad))
}

/// Which stage-one phase is running.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Classification and consistency; the confidence head is frozen and
    /// the penalty term is dropped.
    Classification,
    /// Full objective with the hint blend; only the confidence head trains.
    Confidence,
}

/// Loss values of one clip, by term. `total` is always the exact sum of the
/// weighted terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub class_frame: f64,
    pub class_clip: f64,
    pub consistency: f64,
    pub confidence: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn accumulate(&mut self, other: &LossTerms) {
        self.class_frame += other.class_frame;
        self.class_clip += other.class_clip;
        self.consistency += other.consistency;
        self.confidence += other.confidence;
        self.total += other.total;
    }

    pub fn scale(&mut self, k: f64) {
        self.class_frame *= k;
        self.class_clip *= k;
        self.consistency *= k;
        self.confidence *= k;
        self.total *= k;
    }
}

/// Stage-one objective for one clip.
///
/// Classification phase: class terms (no hint) + mu(epoch) * consistency;
/// confidence gradients are zero. Confidence phase: class terms with the
/// hint + mu * consistency + lambda * confidence penalty; the penalty needs
/// strong labels, so only strongly labeled clips may be passed.
pub fn stage1_loss(
    student: &PredictionBundle,
    teacher: &PredictionBundle,
    targets: &FrameTargets,
    epoch: u32,
    weights: &LossWeights,
    phase: Phase,
) -> Result<(LossTerms, BundleGrads)> {
    let mu = mu_schedule(epoch, weights);
    let use_hint = phase == Phase::Confidence;
    let cl = classification_loss(student, targets, use_hint)?;
    let (con_value, con_frame, con_clip) = consistency_loss(student, teacher)?;

    let mut grads = BundleGrads {
        frame: cl.d_frame,
        clip: cl.d_clip,
        conf: cl.d_conf,
    };
    grads.frame.add_scaled(&con_frame, mu)?;
    for (g, c) in grads.clip.iter_mut().zip(&con_clip) {
        *g += mu * c;
    }

    let mut terms = LossTerms {
        class_frame: cl.frame_term,
        class_clip: cl.clip_term,
        consistency: con_value,
        confidence: 0.0,
        total: cl.frame_term + cl.clip_term + mu * con_value,
    };

    if phase == Phase::Confidence {
        let (pen_value, pen_grad) = confidence_penalty(&student.confidence)?;
        terms.confidence = pen_value;
        terms.total += weights.lambda * pen_value;
        grads.conf.add_scaled(&pen_grad, weights.lambda)?;
    }

    Ok((terms, grads))
}

/// c' = alpha * c + (1 - alpha): full confidence weighting at alpha = 1,
/// uniform weights at alpha = 0.
pub fn interpolate_confidence(confidence: &Matrix, alpha: f64) -> Result<Matrix> {
    if !alpha.is_finite() {
        return Err(Error::NonFinite("alpha"));
    }
    let mut out = confidence.clone();
    for v in out.data_mut() {
        *v = alpha * *v + (1.0 - alpha);
    }
    Ok(out)
}

/// Weighted mean cross-entropy: sum w * bce(y, t) / sum w, with the
/// gradient w.r.t. y. All-zero weights are an error.
pub fn weighted_frame_loss(
    frame_probs: &Matrix,
    targets: &Matrix,
    weights: &Matrix,
) -> Result<(f64, Matrix)> {
    if frame_probs.shape() != targets.shape() || frame_probs.shape() != weights.shape() {
        return Err(Error::ShapeMismatch {
            context: "weighted_frame_loss",
            expected: frame_probs.shape(),
            got: targets.shape(),
        });
    }
    if weights.data().iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput("weights must be finite and >= 0"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&y, &t), &w) in frame_probs
        .data()
        .iter()
        .zip(targets.data())
        .zip(weights.data())
    {
        num += w * bce(y, t);
        den += w;
    }
    if den == 0.0 {
        return Err(Error::InvalidInput("weighted loss needs a nonzero weight"));
    }
    let mut grad = Matrix::zeros(frame_probs.rows(), frame_probs.cols());
    for ((g, (&y, &t)), &w) in grad
        .data_mut()
        .iter_mut()
        .zip(frame_probs.data().iter().zip(targets.data()))
        .zip(weights.data())
    {
        *g = w * bce_grad(y, t) / den;
    }
    Ok((num / den, grad))
}
