//! Mean-teacher machinery: stochastic input perturbations and the
//! exponential moving average that turns a student into its teacher.
//!
//! Student and teacher each receive an independently drawn perturbation of
//! the same clip: a circular time shift (rounded from a centered normal)
//! plus iid Gaussian feature noise. Frame-aligned label matrices are shifted
//! together with the features so supervision stays aligned; they are never
//! noised.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation of the circular time shift, in frames.
    pub shift_std_frames: f64,
    /// Standard deviation of the additive feature noise.
    pub gaussian_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            shift_std_frames: 16.0,
            gaussian_std: 0.1,
        }
    }
}

/// Rows moved down by `shift` positions, wrapping: out[t] = in[(t - shift) mod T].
pub fn circular_shift_rows(m: &Matrix, shift: i64) -> Matrix {
    let t_rows = m.rows() as i64;
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for t in 0..m.rows() {
        let src = (t as i64 - shift).rem_euclid(t_rows) as usize;
        out.row_mut(t).copy_from_slice(m.row(src));
    }
    out
}

/// One perturbed view of a clip.
pub struct NoisyClip {
    pub features: Matrix,
    /// The row-aligned matrices, shifted exactly like the features.
    pub aligned: Vec<Matrix>,
    pub shift: i64,
}

/// Draws one perturbation: first the shift, then one Gaussian per feature
/// entry in row-major order (both drawn even at zero std, so the stream
/// position never depends on the configuration).
pub fn apply_noise(
    features: &Matrix,
    aligned: &[&Matrix],
    cfg: &NoiseConfig,
    rng: &mut RngStream,
) -> Result<NoisyClip> {
    for m in aligned {
        if m.rows() != features.rows() {
            return Err(Error::ShapeMismatch {
                context: "apply_noise aligned rows",
                expected: (features.rows(), m.cols()),
                got: m.shape(),
            });
        }
    }
    let shift = libm::round(rng.gaussian(0.0, cfg.shift_std_frames)?) as i64;
    let mut out = circular_shift_rows(features, shift);
    for v in out.data_mut() {
        *v += rng.gaussian(0.0, cfg.gaussian_std)?;
    }
    let aligned = aligned
        .iter()
        .map(|m| circular_shift_rows(m, shift))
        .collect();
    Ok(NoisyClip {
        features: out,
        aligned,
        shift,
    })
}

/// teacher = decay * teacher + (1 - decay) * student, across every
/// trainable value including the pooling parameters.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::InvalidInput("ema decay must be in [0, 1)"));
    }
    let flat = student.to_flat();
    if flat.len() != teacher.param_count() {
        return Err(Error::InvalidInput("teacher/student structure mismatch"));
    }
    let mut i = 0;
    teacher.visit_params_mut(&mut |t| {
        *t = decay * *t + (1.0 - decay) * flat[i];
        i += 1;
    });
    Ok(())
}

/// Teacher weights plus their averaging rate.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub params: ModelParams,
    pub decay: f64,
}

impl TeacherState {
    /// Starts the teacher as an exact copy of the student.
    pub fn new(student: &ModelParams, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidInput("ema decay must be in [0, 1)"));
        }
        Ok(Self {
            params: student.clone(),
            decay,
        })
    }

    pub fn update(&mut self, student: &ModelParams) -> Result<()> {
        ema_update(&mut self.params, student, self.decay)
    }
}
