//! Flat `key = value` experiment configuration.
//!
//! One file drives data generation, both training stages, and evaluation.
//! Every run directory gets a resolved copy written next to its results,
//! so the file is complete provenance for the run: diff two of them and
//! you have diffed the experiments. Lines are `key = value`; `#` starts a
//! comment; unknown keys are errors so typos cannot silently fall back to
//! defaults. The seed has no default: every run names its randomness.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use milpool_core::losses::LossWeights;
use milpool_core::metrics::CollarConfig;
use milpool_core::model::ModelConfig;
use milpool_core::optim::AdamConfig;
use milpool_core::pooling::{PoolingKind, PoolingSpec};
use milpool_core::synth::DatasetSpec;
use milpool_core::teacher::NoiseConfig;
use milpool_core::train::PseudoMode;

use crate::{LabError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    seed_set: bool,

    // Corpus generation.
    pub strong_clips: usize,
    pub weak_clips: usize,
    pub unlabeled_clips: usize,
    pub validation_clips: usize,
    pub num_classes: usize,
    pub frames_per_clip: usize,
    pub feature_dim: usize,
    pub frame_rate: f64,
    pub noise_floor_std: f64,
    /// Multiplier on every class's event occurrence rate; below 1 the
    /// corpus gets sparser and most clip-class pairs are negative.
    pub event_rate_scale: f64,

    // Model shape.
    pub hidden_dims: Vec<usize>,
    pub context_radius: usize,

    // Aggregator.
    pub pooling: PoolingKind,
    pub n_init: f64,
    pub per_class_n: bool,
    pub allow_negative_n: bool,

    // Optimizer.
    pub lr: f64,
    pub pooling_lr_scale: f64,
    pub batch_size: usize,

    // Stage one.
    pub class_epochs: u32,
    pub conf_epochs: u32,
    pub ema_decay: f64,
    pub lambda: f64,
    pub mu_max: f64,
    pub ramp_epochs: u32,

    // Input perturbation.
    pub shift_std_frames: f64,
    pub feature_noise_std: f64,

    // Stage two.
    pub alpha: f64,
    pub stage2_epochs: u32,
    pub pseudo_mode: PseudoMode,
    pub stage2_consistency: bool,
    pub cold_start: bool,
    /// Diagnostic reference: ignore pseudo-label weights entirely and use
    /// weight 1 everywhere. The alpha = 0 setting must reproduce this run
    /// bit for bit.
    pub stage2_uniform: bool,

    // Decoding and scoring.
    pub threshold: f64,
    pub median_ratio: f64,
    pub segment_length: f64,
    pub onset_collar: f64,
    pub offset_collar: f64,
    pub offset_collar_ratio: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seed_set: false,
            strong_clips: 200,
            weak_clips: 150,
            unlabeled_clips: 1400,
            validation_clips: 100,
            num_classes: 10,
            frames_per_clip: 250,
            feature_dim: 32,
            frame_rate: 25.0,
            noise_floor_std: 1.0,
            event_rate_scale: 1.0,
            hidden_dims: vec![32],
            context_radius: 1,
            pooling: PoolingKind::Power,
            n_init: 1.2,
            per_class_n: false,
            allow_negative_n: false,
            lr: 1e-3,
            pooling_lr_scale: 1.0,
            batch_size: 1,
            class_epochs: 40,
            conf_epochs: 5,
            ema_decay: 0.999,
            lambda: 0.03,
            mu_max: 1.0,
            ramp_epochs: 15,
            shift_std_frames: 16.0,
            feature_noise_std: 0.1,
            alpha: 1.0,
            stage2_epochs: 20,
            pseudo_mode: PseudoMode::Confidence,
            stage2_consistency: true,
            cold_start: false,
            stage2_uniform: false,
            threshold: 0.5,
            median_ratio: 1.0 / 3.0,
            segment_length: 1.0,
            onset_collar: 0.2,
            offset_collar: 0.2,
            offset_collar_ratio: 0.2,
        }
    }
}

fn bad_value(key: &str, value: &str) -> LabError {
    LabError::data(format!("config key '{key}': cannot parse value '{value}'"))
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad_value(key, value))
}

fn parse_dims(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| parse_as(key, part.trim()))
        .collect()
}

fn parse_pooling(value: &str) -> Result<PoolingKind> {
    Ok(match value {
        "max" => PoolingKind::Max,
        "mean" => PoolingKind::Mean,
        "linear" => PoolingKind::Linear,
        "auto" => PoolingKind::Auto,
        "attention" => PoolingKind::Attention,
        "power" => PoolingKind::Power,
        other => return Err(bad_value("pooling", other)),
    })
}

fn pooling_name(kind: PoolingKind) -> &'static str {
    match kind {
        PoolingKind::Max => "max",
        PoolingKind::Mean => "mean",
        PoolingKind::Linear => "linear",
        PoolingKind::Auto => "auto",
        PoolingKind::Attention => "attention",
        PoolingKind::Power => "power",
    }
}

fn parse_pseudo_mode(value: &str) -> Result<PseudoMode> {
    Ok(match value {
        "confidence" => PseudoMode::Confidence,
        "prob09" => PseudoMode::Prob09,
        "prob_weighted" => PseudoMode::ProbWeighted,
        "prob05" => PseudoMode::Prob05,
        other => return Err(bad_value("pseudo_mode", other)),
    })
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => {
                self.seed = parse_as(key, value)?;
                self.seed_set = true;
            }
            "strong_clips" => self.strong_clips = parse_as(key, value)?,
            "weak_clips" => self.weak_clips = parse_as(key, value)?,
            "unlabeled_clips" => self.unlabeled_clips = parse_as(key, value)?,
            "validation_clips" => self.validation_clips = parse_as(key, value)?,
            "num_classes" => self.num_classes = parse_as(key, value)?,
            "frames_per_clip" => self.frames_per_clip = parse_as(key, value)?,
            "feature_dim" => self.feature_dim = parse_as(key, value)?,
            "frame_rate" => self.frame_rate = parse_as(key, value)?,
            "noise_floor_std" => self.noise_floor_std = parse_as(key, value)?,
            "event_rate_scale" => self.event_rate_scale = parse_as(key, value)?,
            "hidden_dims" => self.hidden_dims = parse_dims(key, value)?,
            "context_radius" => self.context_radius = parse_as(key, value)?,
            "pooling" => self.pooling = parse_pooling(value)?,
            "n_init" => self.n_init = parse_as(key, value)?,
            "per_class_n" => self.per_class_n = parse_as(key, value)?,
            "allow_negative_n" => self.allow_negative_n = parse_as(key, value)?,
            "lr" => self.lr = parse_as(key, value)?,
            "pooling_lr_scale" => self.pooling_lr_scale = parse_as(key, value)?,
            "batch_size" => self.batch_size = parse_as(key, value)?,
            "class_epochs" => self.class_epochs = parse_as(key, value)?,
            "conf_epochs" => self.conf_epochs = parse_as(key, value)?,
            "ema_decay" => self.ema_decay = parse_as(key, value)?,
            "lambda" => self.lambda = parse_as(key, value)?,
            "mu_max" => self.mu_max = parse_as(key, value)?,
            "ramp_epochs" => self.ramp_epochs = parse_as(key, value)?,
            "shift_std_frames" => self.shift_std_frames = parse_as(key, value)?,
            "feature_noise_std" => self.feature_noise_std = parse_as(key, value)?,
            "alpha" => self.alpha = parse_as(key, value)?,
            "stage2_epochs" => self.stage2_epochs = parse_as(key, value)?,
            "pseudo_mode" => self.pseudo_mode = parse_pseudo_mode(value)?,
            "stage2_consistency" => self.stage2_consistency = parse_as(key, value)?,
            "cold_start" => self.cold_start = parse_as(key, value)?,
            "stage2_uniform" => self.stage2_uniform = parse_as(key, value)?,
            "threshold" => self.threshold = parse_as(key, value)?,
            "median_ratio" => self.median_ratio = parse_as(key, value)?,
            "segment_length" => self.segment_length = parse_as(key, value)?,
            "onset_collar" => self.onset_collar = parse_as(key, value)?,
            "offset_collar" => self.offset_collar = parse_as(key, value)?,
            "offset_collar_ratio" => self.offset_collar_ratio = parse_as(key, value)?,
            other => return Err(LabError::data(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                LabError::data(format!("{origin}:{}: expected 'key = value'", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| LabError::data(format!("{origin}:{}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Builds a config from an optional file, an optional seed flag, and
    /// `key=value` override pairs, then validates it.
    pub fn from_sources(
        path: Option<&Path>,
        seed: Option<u64>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
            cfg.parse_text(&text, &path.display().to_string())?;
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
            cfg.seed_set = true;
        }
        for pair in overrides {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| LabError::usage(format!("--set expects key=value, got '{pair}'")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like `from_sources` for scoring-only commands: no seed needed and
    /// only the decoding keys are range-checked.
    pub fn eval_sources(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
            cfg.parse_text(&text, &path.display().to_string())?;
        }
        for pair in overrides {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| LabError::usage(format!("--set expects key=value, got '{pair}'")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
            return Err(LabError::data(
                "config: threshold must lie strictly between 0 and 1",
            ));
        }
        if !(cfg.median_ratio >= 0.0) || !cfg.median_ratio.is_finite() {
            return Err(LabError::data("config: median_ratio must be nonnegative"));
        }
        if !(cfg.segment_length > 0.0) {
            return Err(LabError::data("config: segment_length must be positive"));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(LabError::data(format!("config: {msg}")));
        if !self.seed_set {
            return fail("seed must be set explicitly (config file or --seed)");
        }
        if self.num_classes == 0 || self.num_classes > 10 {
            return fail("num_classes must be in 1..=10");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.class_epochs + self.conf_epochs == 0 {
            return fail("stage one needs at least one epoch");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail("threshold must lie strictly between 0 and 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail("ema_decay must lie in [0, 1)");
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return fail("lr must be positive");
        }
        if self.lambda < 0.0 || self.mu_max < 0.0 {
            return fail("lambda and mu_max must be nonnegative");
        }
        if !self.n_init.is_finite() {
            return fail("n_init must be finite");
        }
        if !(self.event_rate_scale > 0.0) || !self.event_rate_scale.is_finite() {
            return fail("event_rate_scale must be positive");
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let mut spec = DatasetSpec::standard(self.seed);
        spec.profiles.truncate(self.num_classes);
        for p in &mut spec.profiles {
            p.occurrence_rate *= self.event_rate_scale;
        }
        spec.frames_per_clip = self.frames_per_clip;
        spec.feature_dim = self.feature_dim;
        spec.frame_rate = self.frame_rate;
        spec.noise_floor_std = self.noise_floor_std;
        spec.counts.strong = self.strong_clips;
        spec.counts.weak = self.weak_clips;
        spec.counts.unlabeled = self.unlabeled_clips;
        spec.counts.validation = self.validation_clips;
        spec
    }

    /// Model shape against the corpus actually on disk.
    pub fn model_config(&self, spec: &DatasetSpec) -> ModelConfig {
        ModelConfig {
            input_dim: spec.feature_dim,
            hidden_dims: self.hidden_dims.clone(),
            context_radius: self.context_radius,
            num_classes: spec.num_classes(),
            seed: self.seed,
        }
    }

    pub fn pooling_spec(&self, num_classes: usize) -> PoolingSpec {
        let mut spec = match (self.pooling, self.per_class_n) {
            (PoolingKind::Power, false) => PoolingSpec::power(self.n_init),
            (PoolingKind::Power, true) => PoolingSpec::power_per_class(self.n_init, num_classes),
            (kind, _) => PoolingSpec::new(kind),
        };
        if self.allow_negative_n {
            spec.allow_negative_exponent();
        }
        spec
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            mu_max: self.mu_max,
            ramp_epochs: self.ramp_epochs,
            alpha: self.alpha,
        }
    }

    pub fn noise_config(&self) -> NoiseConfig {
        NoiseConfig {
            shift_std_frames: self.shift_std_frames,
            gaussian_std: self.feature_noise_std,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            pooling_lr_scale: self.pooling_lr_scale,
            ..AdamConfig::default()
        }
    }

    pub fn collar_config(&self) -> CollarConfig {
        CollarConfig {
            onset_collar_sec: self.onset_collar,
            offset_collar_sec: self.offset_collar,
            offset_collar_ratio: self.offset_collar_ratio,
        }
    }

    /// Renders the full key set in the file format, suitable both as
    /// provenance next to results and as a template.
    pub fn to_flat_text(&self) -> String {
        let mut s = String::new();
        let dims = self
            .hidden_dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "# corpus");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "strong_clips = {}", self.strong_clips);
        let _ = writeln!(s, "weak_clips = {}", self.weak_clips);
        let _ = writeln!(s, "unlabeled_clips = {}", self.unlabeled_clips);
        let _ = writeln!(s, "validation_clips = {}", self.validation_clips);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "frames_per_clip = {}", self.frames_per_clip);
        let _ = writeln!(s, "feature_dim = {}", self.feature_dim);
        let _ = writeln!(s, "frame_rate = {}", self.frame_rate);
        let _ = writeln!(s, "noise_floor_std = {}", self.noise_floor_std);
        let _ = writeln!(s, "event_rate_scale = {}", self.event_rate_scale);
        let _ = writeln!(s, "\n# model");
        let _ = writeln!(s, "hidden_dims = {dims}");
        let _ = writeln!(s, "context_radius = {}", self.context_radius);
        let _ = writeln!(s, "pooling = {}", pooling_name(self.pooling));
        let _ = writeln!(s, "n_init = {}", self.n_init);
        let _ = writeln!(s, "per_class_n = {}", self.per_class_n);
        let _ = writeln!(s, "allow_negative_n = {}", self.allow_negative_n);
        let _ = writeln!(s, "\n# optimizer");
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "pooling_lr_scale = {}", self.pooling_lr_scale);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "\n# stage one");
        let _ = writeln!(s, "class_epochs = {}", self.class_epochs);
        let _ = writeln!(s, "conf_epochs = {}", self.conf_epochs);
        let _ = writeln!(s, "ema_decay = {}", self.ema_decay);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "mu_max = {}", self.mu_max);
        let _ = writeln!(s, "ramp_epochs = {}", self.ramp_epochs);
        let _ = writeln!(s, "shift_std_frames = {}", self.shift_std_frames);
        let _ = writeln!(s, "feature_noise_std = {}", self.feature_noise_std);
        let _ = writeln!(s, "\n# stage two");
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "stage2_epochs = {}", self.stage2_epochs);
        let _ = writeln!(s, "pseudo_mode = {}", self.pseudo_mode.as_str());
        let _ = writeln!(s, "stage2_consistency = {}", self.stage2_consistency);
        let _ = writeln!(s, "cold_start = {}", self.cold_start);
        let _ = writeln!(s, "stage2_uniform = {}", self.stage2_uniform);
        let _ = writeln!(s, "\n# decoding and scoring");
        let _ = writeln!(s, "threshold = {}", self.threshold);
        let _ = writeln!(s, "median_ratio = {}", self.median_ratio);
        let _ = writeln!(s, "segment_length = {}", self.segment_length);
        let _ = writeln!(s, "onset_collar = {}", self.onset_collar);
        let _ = writeln!(s, "offset_collar = {}", self.offset_collar);
        let _ = writeln!(s, "offset_collar_ratio = {}", self.offset_collar_ratio);
        s
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.to_flat_text().as_bytes())
    }
}
