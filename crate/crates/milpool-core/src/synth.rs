//! Deterministic synthetic polyphonic audio-like corpus.
//!
//! Each clip is a frames x features matrix built from class signatures laid
//! over a Gaussian noise floor. Every class k has a fixed signature vector;
//! an event of class k adds that signature to the frames it covers, so
//! events of different classes (and overlapping events of one class)
//! superpose additively. Event positions, durations and counts come from a
//! per-clip random stream keyed by the corpus seed and the clip id, so any
//! clip can be regenerated in isolation and the corpus is reproducible
//! byte for byte across runs and machines.
//!
//! Draw order inside a clip is part of the format: for each class in index
//! order, one Poisson count, then per event one standard normal (duration)
//! and one bounded integer (onset frame); after all events, one Gaussian
//! per feature entry in row-major order for the noise floor. Features are
//! rounded through f32 at the end so stored and in-memory corpora agree
//! exactly.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::FrameTargets;
use crate::metrics::{rasterize_events, Event};
use crate::numerics::{stream, Matrix, RngStream};

/// Shortest event the generator will emit, in frames.
pub const MIN_EVENT_FRAMES: usize = 2;
/// Log-scale spread of event durations around the class mean.
pub const DURATION_LOG_STD: f64 = 0.3;

/// Sound class shape: how long its events last on average and how many
/// occur per clip on average.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub mean_duration_sec: f64,
    pub occurrence_rate: f64,
    /// Third key word of the signature stream, letting two corpora share a
    /// seed but use different signatures.
    pub signature_seed: u64,
}

/// Clip counts per annotation tier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub strong: usize,
    pub weak: usize,
    pub unlabeled: usize,
    pub validation: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Strong,
    Weak,
    Unlabeled,
    Validation,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Strong => "strong",
            Split::Weak => "weak",
            Split::Unlabeled => "unlabeled",
            Split::Validation => "validation",
        }
    }
}

/// Full corpus description; two equal specs generate identical corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub frames_per_clip: usize,
    pub feature_dim: usize,
    pub frame_rate: f64,
    pub noise_floor_std: f64,
    pub profiles: Vec<ClassProfile>,
    pub counts: SplitCounts,
}

impl DatasetSpec {
    /// The standard desk-scale corpus: ten classes whose mean durations
    /// rise from 0.4 s to 2.2 s while their rates fall from 1.2 to 0.66
    /// events per clip, 10 s clips at 25 fps with 32 features.
    pub fn standard(seed: u64) -> Self {
        let profiles = (0..10)
            .map(|k| ClassProfile {
                mean_duration_sec: 0.4 + 0.2 * k as f64,
                occurrence_rate: 1.2 - 0.06 * k as f64,
                signature_seed: k as u64,
            })
            .collect();
        Self {
            seed,
            frames_per_clip: 250,
            feature_dim: 32,
            frame_rate: 25.0,
            noise_floor_std: 1.0,
            profiles,
            counts: SplitCounts {
                strong: 200,
                weak: 150,
                unlabeled: 1400,
                validation: 100,
            },
        }
    }

    pub fn num_classes(&self) -> usize {
        self.profiles.len()
    }

    pub fn clip_len_sec(&self) -> f64 {
        self.frames_per_clip as f64 / self.frame_rate
    }

    pub fn mean_durations(&self) -> Vec<f64> {
        self.profiles.iter().map(|p| p.mean_duration_sec).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(Error::InvalidInput("spec needs at least one class"));
        }
        if self.frames_per_clip < MIN_EVENT_FRAMES || self.feature_dim == 0 {
            return Err(Error::InvalidInput("spec dimensions too small"));
        }
        if !(self.frame_rate > 0.0) || !self.frame_rate.is_finite() {
            return Err(Error::InvalidInput("frame rate must be positive"));
        }
        if self.noise_floor_std.is_nan() || self.noise_floor_std < 0.0 {
            return Err(Error::InvalidInput("noise floor std must be >= 0"));
        }
        for p in &self.profiles {
            if !(p.mean_duration_sec > 0.0) || !p.mean_duration_sec.is_finite() {
                return Err(Error::InvalidInput("class mean duration must be positive"));
            }
            if p.occurrence_rate < 0.0 || !p.occurrence_rate.is_finite() {
                return Err(Error::InvalidInput("class rate must be >= 0"));
            }
        }
        Ok(())
    }
}

/// One generated clip. `truth_events` is the complete ground truth;
/// `targets` is the view a training run is allowed to see for this split.
#[derive(Clone, Debug)]
pub struct GeneratedClip {
    /// Index within the clip's random stream family; unique within the
    /// training splits and, separately, within validation.
    pub id: u64,
    pub split: Split,
    pub features: Matrix,
    pub truth_events: Vec<Event>,
    pub targets: FrameTargets,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub clips: Vec<GeneratedClip>,
}

impl Dataset {
    pub fn clips_in(&self, split: Split) -> impl Iterator<Item = &GeneratedClip> {
        self.clips.iter().filter(move |c| c.split == split)
    }
}

/// Per-class signature matrix (classes x features), standard normal
/// entries, keyed independently of clip content.
pub fn class_signatures(spec: &DatasetSpec) -> Result<Matrix> {
    spec.validate()?;
    let mut sig = Matrix::zeros(spec.num_classes(), spec.feature_dim);
    for (k, prof) in spec.profiles.iter().enumerate() {
        let mut rng = RngStream::new(
            spec.seed,
            [stream::SIGNATURE, k as u64, prof.signature_seed],
        );
        for f in 0..spec.feature_dim {
            sig.set(k, f, rng.gaussian(0.0, 1.0)?);
        }
    }
    Ok(sig)
}

fn round_through_f32(m: &mut Matrix) {
    for v in m.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// Generates one clip. The stream family is `DATA` for the three training
/// splits and `VALIDATION` for held-out clips, so validation content never
/// shifts when training split sizes change.
pub fn generate_clip(
    spec: &DatasetSpec,
    signatures: &Matrix,
    split: Split,
    id: u64,
) -> Result<GeneratedClip> {
    let family = match split {
        Split::Validation => stream::VALIDATION,
        _ => stream::DATA,
    };
    let mut rng = RngStream::new(spec.seed, [family, id, 0]);
    let t_frames = spec.frames_per_clip;
    let fr = spec.frame_rate;

    let mut truth_events = Vec::new();
    for (k, prof) in spec.profiles.iter().enumerate() {
        let count = rng.poisson(prof.occurrence_rate)?;
        for _ in 0..count {
            let z = rng.gaussian(0.0, 1.0)?;
            // Log-normal duration with the mean correction baked in, so the
            // expected duration equals the profile mean exactly.
            let dur_sec = prof.mean_duration_sec
                * libm::exp(DURATION_LOG_STD * z - 0.5 * DURATION_LOG_STD * DURATION_LOG_STD);
            let dur_frames = (libm::round(dur_sec * fr) as i64)
                .clamp(MIN_EVENT_FRAMES as i64, t_frames as i64)
                as usize;
            let start = rng.below(t_frames - dur_frames + 1)?;
            truth_events.push(Event::new(
                k,
                start as f64 / fr,
                (start + dur_frames) as f64 / fr,
            )?);
        }
    }

    let mut features = Matrix::zeros(t_frames, spec.feature_dim);
    for v in features.data_mut() {
        *v = rng.gaussian(0.0, spec.noise_floor_std)?;
    }
    for e in &truth_events {
        let start = libm::round(e.onset_sec * fr) as usize;
        let end = libm::round(e.offset_sec * fr) as usize;
        for t in start..end {
            let row = features.row_mut(t);
            for (x, s) in row.iter_mut().zip(signatures.row(e.class)) {
                *x += *s;
            }
        }
    }
    round_through_f32(&mut features);

    let raster = rasterize_events(&truth_events, t_frames, spec.num_classes(), fr)?;
    let targets = match split {
        Split::Strong | Split::Validation => FrameTargets::strong_from_frames(raster),
        Split::Weak => {
            let mut clip = vec![0.0; spec.num_classes()];
            for t in 0..t_frames {
                for (c, v) in clip.iter_mut().zip(raster.row(t)) {
                    if *v > *c {
                        *c = *v;
                    }
                }
            }
            FrameTargets::Weak { clip }
        }
        Split::Unlabeled => FrameTargets::Unlabeled,
    };

    Ok(GeneratedClip {
        id,
        split,
        features,
        truth_events,
        targets,
    })
}

/// Generates the full corpus. Training clips take ids 0..S+W+U in split
/// order (strong, weak, unlabeled); validation clips take ids 0..V in
/// their own stream family.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let signatures = class_signatures(spec)?;
    let total =
        spec.counts.strong + spec.counts.weak + spec.counts.unlabeled + spec.counts.validation;
    let mut clips = Vec::with_capacity(total);
    let mut id = 0u64;
    for (split, n) in [
        (Split::Strong, spec.counts.strong),
        (Split::Weak, spec.counts.weak),
        (Split::Unlabeled, spec.counts.unlabeled),
    ] {
        for _ in 0..n {
            clips.push(generate_clip(spec, &signatures, split, id)?);
            id += 1;
        }
    }
    for vid in 0..spec.counts.validation as u64 {
        clips.push(generate_clip(spec, &signatures, Split::Validation, vid)?);
    }
    Ok(Dataset {
        spec: spec.clone(),
        clips,
    })
}
