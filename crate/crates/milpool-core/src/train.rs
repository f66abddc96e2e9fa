//! Per-clip training steps for both stages and pseudo-label construction.
//!
//! Each step is a pure function of (parameters, clip, epoch): the input
//! perturbations come from a stream keyed by the experiment seed, the epoch
//! and the clip id, so a step can be recomputed bit-exactly in isolation,
//! which is what checkpoint resume and parallel gradient evaluation rely
//! on. Draw order per step is part of the contract: one full noise draw
//! for the student view, then one for the teacher view.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    consistency_loss, interpolate_confidence, mu_schedule, stage1_loss, weighted_frame_loss,
    FrameTargets, LossTerms, LossWeights, Phase,
};
use crate::model::{backward, forward, forward_traced, ModelConfig, ModelGrads, ModelParams};
use crate::numerics::{stream, Matrix, RngStream};
use crate::teacher::{apply_noise, NoiseConfig};

/// Offset added to the epoch word of stage-two noise streams so the two
/// stages never reuse perturbations even under one seed.
pub const STAGE2_EPOCH_KEY_BASE: u64 = 1 << 32;

/// A clip as the trainer sees it: features plus the targets its split
/// exposes, nothing else.
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub id: u64,
    pub features: Matrix,
    pub targets: FrameTargets,
}

/// The perturbation stream for one (epoch, clip) pair.
pub fn noise_stream(seed: u64, epoch_key: u64, clip_id: u64) -> RngStream {
    RngStream::new(seed, [stream::NOISE, epoch_key, clip_id])
}

/// Shared read-only settings for a training stage.
#[derive(Clone, Copy, Debug)]
pub struct StageContext<'a> {
    pub model: &'a ModelConfig,
    pub noise: &'a NoiseConfig,
    pub weights: &'a LossWeights,
    pub seed: u64,
}

fn noisy_views(
    ctx: &StageContext,
    features: &Matrix,
    aligned: &[&Matrix],
    epoch_key: u64,
    clip_id: u64,
) -> Result<(crate::teacher::NoisyClip, Matrix)> {
    let mut rng = noise_stream(ctx.seed, epoch_key, clip_id);
    let student = apply_noise(features, aligned, ctx.noise, &mut rng)?;
    let teacher = apply_noise(features, &[], ctx.noise, &mut rng)?;
    Ok((student, teacher.features))
}

/// One stage-one step: loss terms plus student gradients for one clip.
/// The caller applies the optimizer with the phase's parameter mask and
/// then advances the teacher.
pub fn stage1_clip_grads(
    ctx: &StageContext,
    student: &ModelParams,
    teacher: &ModelParams,
    clip: &TrainClip,
    epoch: u32,
    phase: Phase,
) -> Result<(LossTerms, ModelGrads)> {
    let aligned: Vec<&Matrix> = match &clip.targets {
        FrameTargets::Strong { frames, .. } => vec![frames],
        _ => Vec::new(),
    };
    let (student_view, teacher_view) =
        noisy_views(ctx, &clip.features, &aligned, epoch as u64, clip.id)?;
    // Frame labels follow the student's time shift; clip labels are
    // invariant under it, so rebuilding them from the shifted frames
    // reproduces the originals.
    let targets = match &clip.targets {
        FrameTargets::Strong { .. } => {
            FrameTargets::strong_from_frames(student_view.aligned[0].clone())
        }
        other => other.clone(),
    };

    let (student_bundle, trace) = forward_traced(&student_view.features, ctx.model, student)?;
    let teacher_bundle = forward(&teacher_view, ctx.model, teacher)?;
    let (terms, bgrads) = stage1_loss(
        &student_bundle,
        &teacher_bundle,
        &targets,
        epoch,
        ctx.weights,
        phase,
    )?;
    let grads = backward(ctx.model, student, &student_bundle, &trace, &bgrads)?;
    Ok((terms, grads))
}

/// Where a pseudo-label entry came from, which fixes its revision rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    StrongGroundtruth,
    WeakRevised,
    UnlabeledRaw,
}

/// How pseudo-label targets and weights are constructed from the stage-one
/// model's outputs. The three `Prob*` variants are self-training baselines;
/// they bake their weights directly into the confidence channel and are
/// meant to be trained with alpha = 1 so dropped frames keep weight zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    /// Soft posteriors as targets, confidence head as weights, weak-label
    /// revision applied.
    Confidence,
    /// Hard positive labels where the posterior reaches 0.9, uniform
    /// weight there, everything else dropped.
    Prob09,
    /// Soft posteriors as targets, the posterior itself as the weight.
    ProbWeighted,
    /// Soft posteriors where they reach 0.5, weighted by the confidence
    /// head, everything else dropped.
    Prob05,
}

impl PseudoMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PseudoMode::Confidence => "confidence",
            PseudoMode::Prob09 => "prob09",
            PseudoMode::ProbWeighted => "prob_weighted",
            PseudoMode::Prob05 => "prob05",
        }
    }
}

/// Frame targets and weights for one clip of the retraining corpus. For
/// weak and unlabeled provenances this carries model outputs only; ground
/// truth never enters, so the retraining stage cannot read labels it is
/// not entitled to.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PseudoClip {
    pub id: u64,
    pub targets: Matrix,
    pub confidence: Matrix,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub clips: Vec<PseudoClip>,
    pub mode: PseudoMode,
    /// Frame-class entries with nonzero weight, over all clips.
    pub kept_frames: u64,
    pub total_frames: u64,
}

impl PseudoLabelSet {
    pub fn validate(&self) -> Result<()> {
        for clip in &self.clips {
            if clip.targets.shape() != clip.confidence.shape() {
                return Err(Error::ShapeMismatch {
                    context: "pseudo clip",
                    expected: clip.targets.shape(),
                    got: clip.confidence.shape(),
                });
            }
            for (&t, &c) in clip.targets.data().iter().zip(clip.confidence.data()) {
                if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&c) {
                    return Err(Error::InvalidInput(
                        "pseudo targets and confidence must lie in [0, 1]",
                    ));
                }
            }
            if clip.provenance == Provenance::StrongGroundtruth
                && clip.confidence.data().iter().any(|&c| c != 1.0)
            {
                return Err(Error::InvalidInput(
                    "strong pseudo clips must carry confidence 1",
                ));
            }
        }
        Ok(())
    }
}

/// Builds the retraining corpus from a trained model's noise-free outputs.
///
/// Strong clips pass through as ground truth with confidence 1. Weak clips
/// keep model outputs for their labeled-present classes; classes absent
/// from the weak label are revised to target 0 with confidence 1. Unlabeled
/// clips keep model outputs untouched. The `Prob*` baselines replace the
/// weak/unlabeled construction wholesale (no revision).
pub fn generate_pseudo_labels(
    cfg: &ModelConfig,
    params: &ModelParams,
    clips: &[TrainClip],
    mode: PseudoMode,
) -> Result<PseudoLabelSet> {
    let mut out = Vec::with_capacity(clips.len());
    let mut kept = 0u64;
    let mut total = 0u64;
    for clip in clips {
        let entry = match &clip.targets {
            FrameTargets::Strong { frames, .. } => PseudoClip {
                id: clip.id,
                targets: frames.clone(),
                confidence: Matrix::filled(frames.rows(), frames.cols(), 1.0),
                provenance: Provenance::StrongGroundtruth,
            },
            FrameTargets::Weak { clip: weak } => {
                let bundle = forward(&clip.features, cfg, params)?;
                let (mut targets, mut confidence) = mode_outputs(mode, &bundle);
                if mode == PseudoMode::Confidence {
                    for (k, &label) in weak.iter().enumerate() {
                        if label == 0.0 {
                            for t in 0..targets.rows() {
                                targets.set(t, k, 0.0);
                                confidence.set(t, k, 1.0);
                            }
                        }
                    }
                }
                PseudoClip {
                    id: clip.id,
                    targets,
                    confidence,
                    provenance: Provenance::WeakRevised,
                }
            }
            FrameTargets::Unlabeled => {
                let bundle = forward(&clip.features, cfg, params)?;
                let (targets, confidence) = mode_outputs(mode, &bundle);
                PseudoClip {
                    id: clip.id,
                    targets,
                    confidence,
                    provenance: Provenance::UnlabeledRaw,
                }
            }
        };
        total += entry.confidence.data().len() as u64;
        kept += entry.confidence.data().iter().filter(|&&c| c > 0.0).count() as u64;
        out.push(entry);
    }
    let set = PseudoLabelSet {
        clips: out,
        mode,
        kept_frames: kept,
        total_frames: total,
    };
    set.validate()?;
    Ok(set)
}

fn mode_outputs(mode: PseudoMode, bundle: &crate::model::PredictionBundle) -> (Matrix, Matrix) {
    let p = &bundle.frame_probs;
    match mode {
        PseudoMode::Confidence => (p.clone(), bundle.confidence.clone()),
        PseudoMode::Prob09 => {
            let targets = Matrix::from_fn(p.rows(), p.cols(), |t, k| {
                if p.get(t, k) >= 0.9 {
                    1.0
                } else {
                    0.0
                }
            });
            let weights = targets.clone();
            (targets, weights)
        }
        PseudoMode::ProbWeighted => (p.clone(), p.clone()),
        PseudoMode::Prob05 => {
            let weights = Matrix::from_fn(p.rows(), p.cols(), |t, k| {
                if p.get(t, k) >= 0.5 {
                    bundle.confidence.get(t, k)
                } else {
                    0.0
                }
            });
            (p.clone(), weights)
        }
    }
}

/// Outcome of one stage-two step. `frame_term_used` is false when every
/// weight in the clip was zero (possible under the `Prob*` baselines), in
/// which case only the consistency term contributed.
#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub terms: LossTerms,
    pub grads: ModelGrads,
    pub frame_term_used: bool,
}

/// One stage-two step: confidence-weighted frame loss on pseudo-labels
/// plus (optionally) the consistency term. No clip-level classification
/// term and no confidence penalty; the confidence head receives no
/// gradient. With `uniform_weights` the stored confidence is ignored and
/// every frame weighs 1, the reference point the alpha = 0 setting must
/// reproduce bit for bit.
pub fn stage2_clip_grads(
    ctx: &StageContext,
    student: &ModelParams,
    teacher: &ModelParams,
    features: &Matrix,
    pseudo: &PseudoClip,
    epoch: u32,
    use_consistency: bool,
    uniform_weights: bool,
) -> Result<Stage2Outcome> {
    if pseudo.targets.shape() != (features.rows(), ctx.model.num_classes) {
        return Err(Error::ShapeMismatch {
            context: "stage2 pseudo targets",
            expected: (features.rows(), ctx.model.num_classes),
            got: pseudo.targets.shape(),
        });
    }
    let aligned = [&pseudo.targets, &pseudo.confidence];
    let (student_view, teacher_view) = noisy_views(
        ctx,
        features,
        &aligned,
        STAGE2_EPOCH_KEY_BASE + epoch as u64,
        pseudo.id,
    )?;
    let targets = &student_view.aligned[0];
    let weights = if uniform_weights {
        Matrix::filled(targets.rows(), targets.cols(), 1.0)
    } else {
        interpolate_confidence(&student_view.aligned[1], ctx.weights.alpha)?
    };

    let (student_bundle, trace) = forward_traced(&student_view.features, ctx.model, student)?;
    let mut bgrads = crate::model::BundleGrads::zeros(features.rows(), ctx.model.num_classes);

    let frame_term_used = weights.data().iter().sum::<f64>() > 0.0;
    let mut frame_value = 0.0;
    if frame_term_used {
        let (value, d_frame) = weighted_frame_loss(&student_bundle.frame_probs, targets, &weights)?;
        frame_value = value;
        bgrads.frame = d_frame;
    }

    let mu = mu_schedule(epoch, ctx.weights);
    let mut con_value = 0.0;
    if use_consistency {
        let teacher_bundle = forward(&teacher_view, ctx.model, teacher)?;
        let (value, d_frame, d_clip) = consistency_loss(&student_bundle, &teacher_bundle)?;
        con_value = value;
        bgrads.frame.add_scaled(&d_frame, mu)?;
        for (g, c) in bgrads.clip.iter_mut().zip(&d_clip) {
            *g = mu * c;
        }
    }

    let terms = LossTerms {
        class_frame: frame_value,
        class_clip: 0.0,
        consistency: con_value,
        confidence: 0.0,
        total: frame_value + mu * con_value,
    };
    let grads = backward(ctx.model, student, &student_bundle, &trace, &bgrads)?;
    Ok(Stage2Outcome {
        terms,
        grads,
        frame_term_used,
    })
}
