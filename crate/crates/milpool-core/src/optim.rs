//! Adam with parameter-group freezing.
//!
//! Freezing skips a group entirely: its moment estimates stay untouched, so
//! a frozen parameter is bit-identical before and after a step. Masking
//! gradients to zero instead would let stale momentum keep moving weights,
//! which is exactly what phased training must not do.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{BlockKind, ModelGrads, ModelParams};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Extra factor on the learning rate of pooling parameters.
    pub pooling_lr_scale: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            pooling_lr_scale: 1.0,
        }
    }
}

/// Which parameter groups a step is allowed to move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainMask {
    pub hidden: bool,
    pub class_head: bool,
    pub conf_head: bool,
    pub pooling: bool,
}

impl TrainMask {
    pub fn all() -> Self {
        Self {
            hidden: true,
            class_head: true,
            conf_head: true,
            pooling: true,
        }
    }

    /// Everything except the confidence head.
    pub fn classification_phase() -> Self {
        Self {
            conf_head: false,
            ..Self::all()
        }
    }

    /// Only the confidence head.
    pub fn confidence_phase() -> Self {
        Self {
            hidden: false,
            class_head: false,
            conf_head: true,
            pooling: false,
        }
    }

    /// Hidden layers and class head; pooling and confidence stay fixed.
    pub fn retraining() -> Self {
        Self {
            hidden: true,
            class_head: true,
            conf_head: false,
            pooling: false,
        }
    }

    pub fn allows(&self, block: BlockKind) -> bool {
        match block {
            BlockKind::Hidden => self.hidden,
            BlockKind::ClassHead => self.class_head,
            BlockKind::ConfHead => self.conf_head,
            BlockKind::Pooling => self.pooling,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Moment buffers in layout order, for checkpointing.
    pub fn state(&self) -> (&[f64], &[f64], u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn restore(m: Vec<f64>, v: Vec<f64>, t: u64) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::InvalidInput(
                "adam moment buffers disagree in length",
            ));
        }
        Ok(Self { m, v, t })
    }

    /// One update. Gradients must be finite; pooling clamps are re-applied
    /// afterwards so the exponent stays inside its configured range.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &ModelGrads,
        cfg: &AdamConfig,
        mask: &TrainMask,
    ) -> Result<()> {
        let flat = grads.to_flat();
        if flat.len() != self.m.len() {
            return Err(Error::InvalidInput(
                "gradient length does not match optimizer state",
            ));
        }
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradients"));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_blocks_mut(&mut |block, xs| {
            let lr = if block == BlockKind::Pooling {
                cfg.lr * cfg.pooling_lr_scale
            } else {
                cfg.lr
            };
            if mask.allows(block) {
                for x in xs.iter_mut() {
                    let g = flat[i];
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    *x -= lr * mhat / (libm::sqrt(vhat) + cfg.eps);
                    i += 1;
                }
            } else {
                i += xs.len();
            }
        });
        params.pooling.clamp_params();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};
    use crate::pooling::PoolingSpec;

    fn tiny_params() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig {
            input_dim: 2,
            hidden_dims: alloc::vec![3],
            context_radius: 0,
            num_classes: 2,
            seed: 4,
        };
        let params = ModelParams::init(&cfg, PoolingSpec::power(1.2)).unwrap();
        (cfg, params)
    }

    /// Scalar Adam written independently of the implementation under test.
    fn reference_adam(w0: f64, grads: &[f64], cfg: &AdamConfig) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for (step, g) in grads.iter().enumerate() {
            let t = (step + 1) as f64;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mhat = m / (1.0 - cfg.beta1.powf(t));
            let vhat = v / (1.0 - cfg.beta2.powf(t));
            w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        w
    }

    #[test]
    fn first_step_matches_hand_value() {
        let (_, mut params) = tiny_params();
        params.visit_params_mut(&mut |v| *v = 0.0);
        params.pooling.n[0] = 1.0;
        let mut grads = params.zeros_like();
        grads.visit_params_mut(&mut |v| *v = 1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(params.param_count());
        adam.step(&mut params, &grads, &cfg, &TrainMask::all())
            .unwrap();
        // mhat = 1, vhat = 1: every parameter moves by -lr / (1 + eps).
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((params.class_head.b[0] - expect).abs() < 1e-15);
        assert!((params.pooling.n[0] - (1.0 + expect)).abs() < 1e-15);
    }

    #[test]
    fn multi_step_matches_reference() {
        let (_, mut params) = tiny_params();
        params.visit_params_mut(&mut |v| *v = 0.25);
        params.pooling.n[0] = 1.5;
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(params.param_count());
        let gseq = [1.0, -0.5, 2.0, 0.1, -1.5];
        for g in gseq {
            let mut grads = params.zeros_like();
            grads.visit_params_mut(&mut |v| *v = g);
            adam.step(&mut params, &grads, &cfg, &TrainMask::all())
                .unwrap();
        }
        let expect = reference_adam(0.25, &gseq, &cfg);
        assert!(
            (params.class_head.w.get(0, 0) - expect).abs() < 1e-14,
            "{} vs {expect}",
            params.class_head.w.get(0, 0)
        );
    }

    #[test]
    fn frozen_blocks_stay_bit_identical() {
        let (_, mut params) = tiny_params();
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.visit_params_mut(&mut |v| *v = 0.7);
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(params.param_count());
        for _ in 0..3 {
            adam.step(&mut params, &grads, &cfg, &TrainMask::confidence_phase())
                .unwrap();
        }
        assert_eq!(params.layers, before.layers);
        assert_eq!(params.class_head, before.class_head);
        assert_eq!(params.pooling, before.pooling);
        assert_ne!(params.conf_head, before.conf_head);
    }

    #[test]
    fn pooling_clamp_reapplied_after_step() {
        let (_, mut params) = tiny_params();
        params.pooling.n[0] = 0.0004;
        let mut grads = params.zeros_like();
        grads.pooling.n[0] = 1.0;
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(params.param_count());
        adam.step(&mut params, &grads, &cfg, &TrainMask::all())
            .unwrap();
        // A positive gradient pushes n down past zero; the clamp holds it.
        assert_eq!(params.pooling.n[0], 0.0);
    }

    #[test]
    fn pooling_lr_scale_applies_only_to_pooling() {
        let (_, mut params) = tiny_params();
        params.visit_params_mut(&mut |v| *v = 0.5);
        params.pooling.n[0] = 1.5;
        let mut grads = params.zeros_like();
        grads.visit_params_mut(&mut |v| *v = 1.0);
        let cfg = AdamConfig {
            lr: 0.01,
            pooling_lr_scale: 3.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(params.param_count());
        adam.step(&mut params, &grads, &cfg, &TrainMask::all())
            .unwrap();
        let dense_delta = 0.5 - params.class_head.w.get(0, 0);
        let pool_delta = 1.5 - params.pooling.n[0];
        assert!((pool_delta / dense_delta - 3.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let (_, mut params) = tiny_params();
        let mut grads = params.zeros_like();
        grads.class_head.b[0] = f64::NAN;
        let mut adam = Adam::new(params.param_count());
        let err = adam.step(
            &mut params,
            &grads,
            &AdamConfig::default(),
            &TrainMask::all(),
        );
        assert!(err.is_err());
    }
}
