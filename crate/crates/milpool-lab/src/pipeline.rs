//! Training stages, evaluation, and built-in self-checks.
//!
//! Both stages share one loop shape: shuffle the active clips with an
//! epoch-keyed stream, fan per-clip gradients out to workers, reduce them
//! in deterministic clip order, take one optimizer step per batch, and
//! advance the teacher average after every step. All randomness is keyed
//! by (seed, purpose, epoch, clip), never by call order or thread timing,
//! so results are independent of the worker count and a resumed run is
//! bit-identical to an uninterrupted one.

use std::fs;
use std::path::Path;
use std::time::Instant;

use milpool_core::losses::{LossTerms, LossWeights, Phase};
use milpool_core::metrics::{
    class_windows_from_durations, decode_events, rasterize_events, CollarConfig, EventScorer,
    ReliabilityAccumulator, ReliabilityReport, ScoreBlock, SegmentScorer,
};
use milpool_core::model::{forward, ModelConfig, ModelParams};
use milpool_core::numerics::{stream, RngStream};
use milpool_core::optim::{Adam, TrainMask};
use milpool_core::pooling::{PoolingKind, PoolingSpec};
use milpool_core::synth::Split;
use milpool_core::teacher::TeacherState;
use milpool_core::train::{
    generate_pseudo_labels, stage1_clip_grads, stage2_clip_grads, PseudoClip, PseudoMode,
    StageContext, TrainClip, STAGE2_EPOCH_KEY_BASE,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    load_checkpoint, load_state, save_checkpoint, save_state, write_atomic, CheckpointHeader,
    EpochRecord, Role, StateHeader, TrainState, FORMAT_VERSION,
};
use crate::config::ExperimentConfig;
use crate::dataset;
use crate::{LabError, Result};

pub const STUDENT_CKPT: &str = "student.ckpt";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STATE_NAME: &str = "state.bin";
pub const REPORT_NAME: &str = "report.json";
pub const LOSSES_CSV: &str = "losses.csv";
pub const CONFIG_NAME: &str = "config.txt";
pub const EVENT_CSV: &str = "scores_event.csv";
pub const SEGMENT_CSV: &str = "scores_segment.csv";
pub const RELIABILITY_JSON: &str = "reliability.json";
pub const RELIABILITY_CSV: &str = "reliability.csv";
pub const EVAL_JSON: &str = "eval_summary.json";

/// Worker threads: all available cores, capped by `MILPOOL_THREADS`.
pub fn worker_count() -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("MILPOOL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(cap) if cap >= 1 => available.min(cap),
        _ => available,
    }
}

/// Applies `f` to every item, fanning out over `workers` threads in
/// contiguous chunks. The output order equals the input order whatever the
/// worker count, which keeps gradient reduction deterministic.
fn parallel_map<I: Sync, R: Send>(
    items: &[I],
    workers: usize,
    f: impl Fn(&I) -> Result<R> + Sync,
) -> Vec<Result<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let fref = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(fref).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    })
}

/// Stage summary written as `report.json` in the run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: u8,
    pub pooling: String,
    pub records: Vec<EpochRecord>,
    pub wall_clock_sec: f64,
    pub student_checkpoint: String,
    pub teacher_checkpoint: String,
    /// Stage two only.
    pub pseudo_mode: Option<String>,
    pub effective_alpha: Option<f64>,
    pub kept_frames: Option<u64>,
    pub total_frames: Option<u64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| LabError::data(format!("{}: encoding: {e}", path.display())))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| LabError::data(format!("{}: {e}", path.display())))
}

pub fn read_run_report(run_dir: &Path) -> Result<RunReport> {
    read_json(&run_dir.join(REPORT_NAME))
}

pub fn read_eval_report(run_dir: &Path) -> Result<EvalReport> {
    read_json(&run_dir.join(EVAL_JSON))
}

pub fn read_reliability(run_dir: &Path) -> Result<ReliabilityReport> {
    read_json(&run_dir.join(RELIABILITY_JSON))
}

fn shuffled(indices: &mut Vec<usize>, seed: u64, epoch_key: u64) {
    let mut rng = RngStream::new(seed, [stream::SHUFFLE, epoch_key, 0]);
    rng.shuffle(indices);
}

fn pooling_label(kind: PoolingKind) -> &'static str {
    match kind {
        PoolingKind::Max => "max",
        PoolingKind::Mean => "mean",
        PoolingKind::Linear => "linear",
        PoolingKind::Auto => "auto",
        PoolingKind::Attention => "attention",
        PoolingKind::Power => "power",
    }
}

/// Mean power exponent, the quantity the n-trajectory plots track.
fn current_exponent(params: &ModelParams) -> Option<f64> {
    match params.pooling.kind {
        PoolingKind::Power => {
            let n = &params.pooling.n;
            Some(n.iter().sum::<f64>() / n.len() as f64)
        }
        _ => None,
    }
}

fn losses_csv_text(records: &[EpochRecord]) -> String {
    let mut out =
        String::from("epoch,class_frame,class_clip,consistency,confidence,total,exponent\n");
    for r in records {
        let exp = r.exponent.map(|n| n.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.class_frame, r.class_clip, r.consistency, r.confidence, r.total, exp
        ));
    }
    out
}

/// Resumable loop state shared by both stages.
struct Loop {
    student: ModelParams,
    teacher: TeacherState,
    adam: Adam,
    records: Vec<EpochRecord>,
    start_epoch: u32,
}

/// Loads `state.bin` if present (verifying it belongs to this run shape),
/// otherwise initializes from `fresh`.
fn resume_or_init(
    run_dir: &Path,
    stage: u8,
    model_cfg: &ModelConfig,
    ema_decay: f64,
    fresh: impl FnOnce() -> Result<ModelParams>,
) -> Result<Loop> {
    let state_path = run_dir.join(STATE_NAME);
    if state_path.exists() {
        let state = load_state(&state_path)?;
        if state.header.stage != stage {
            return Err(LabError::data(format!(
                "{}: holds stage {} state, expected stage {stage}",
                state_path.display(),
                state.header.stage
            )));
        }
        if state.header.model != *model_cfg {
            return Err(LabError::data(format!(
                "{}: saved run used a different model configuration",
                state_path.display()
            )));
        }
        let adam = Adam::restore(state.adam_m, state.adam_v, state.header.adam_steps)?;
        return Ok(Loop {
            student: state.student,
            teacher: TeacherState {
                params: state.teacher,
                decay: ema_decay,
            },
            adam,
            records: state.header.records,
            start_epoch: state.header.epochs_done,
        });
    }
    let student = fresh()?;
    let count = student.param_count();
    let teacher = TeacherState::new(&student, ema_decay)?;
    Ok(Loop {
        student,
        teacher,
        adam: Adam::new(count),
        records: Vec::new(),
        start_epoch: 0,
    })
}

fn save_loop_state(
    run_dir: &Path,
    stage: u8,
    model_cfg: &ModelConfig,
    lp: &Loop,
    epochs_done: u32,
) -> Result<()> {
    let (m, v, t) = lp.adam.state();
    save_state(
        &run_dir.join(STATE_NAME),
        &TrainState {
            header: StateHeader {
                version: FORMAT_VERSION,
                stage,
                epochs_done,
                model: model_cfg.clone(),
                pooling: lp.student.pooling.clone(),
                records: lp.records.clone(),
                param_count: lp.student.param_count(),
                adam_steps: t,
            },
            student: lp.student.clone(),
            teacher: lp.teacher.params.clone(),
            adam_m: m.to_vec(),
            adam_v: v.to_vec(),
        },
    )
}

fn finish_run(
    run_dir: &Path,
    stage: u8,
    model_cfg: &ModelConfig,
    lp: &Loop,
    epochs: u32,
    started: Instant,
    extra: (Option<PseudoMode>, Option<f64>, Option<(u64, u64)>),
) -> Result<RunReport> {
    let header = |role: Role, params: &ModelParams| CheckpointHeader {
        version: FORMAT_VERSION,
        role,
        model: model_cfg.clone(),
        pooling: params.pooling.clone(),
        epochs,
        losses: lp.records.clone(),
        param_count: params.param_count(),
    };
    save_checkpoint(
        &run_dir.join(STUDENT_CKPT),
        &header(Role::Student, &lp.student),
        &lp.student,
    )?;
    save_checkpoint(
        &run_dir.join(TEACHER_CKPT),
        &header(Role::Teacher, &lp.teacher.params),
        &lp.teacher.params,
    )?;
    write_atomic(
        &run_dir.join(LOSSES_CSV),
        losses_csv_text(&lp.records).as_bytes(),
    )?;
    let (mode, effective_alpha, kept) = extra;
    let report = RunReport {
        stage,
        pooling: pooling_label(lp.student.pooling.kind).to_string(),
        records: lp.records.clone(),
        wall_clock_sec: started.elapsed().as_secs_f64(),
        student_checkpoint: STUDENT_CKPT.to_string(),
        teacher_checkpoint: TEACHER_CKPT.to_string(),
        pseudo_mode: mode.map(|m| m.as_str().to_string()),
        effective_alpha,
        kept_frames: kept.map(|k| k.0),
        total_frames: kept.map(|k| k.1),
    };
    write_json(&run_dir.join(REPORT_NAME), &report)?;
    Ok(report)
}

/// Sums per-clip gradients in input order, averages them, applies one
/// optimizer step, and advances the teacher.
fn apply_batch(
    outputs: Vec<Result<(LossTerms, ModelParams)>>,
    lp: &mut Loop,
    adam_cfg: &milpool_core::optim::AdamConfig,
    mask: &TrainMask,
    epoch_terms: &mut LossTerms,
) -> Result<()> {
    let mut summed: Option<ModelParams> = None;
    let mut count = 0.0;
    for res in outputs {
        let (terms, grads) = res?;
        epoch_terms.accumulate(&terms);
        match &mut summed {
            None => summed = Some(grads),
            Some(total) => total.add_scaled(&grads, 1.0)?,
        }
        count += 1.0;
    }
    let mut grads = summed.expect("batch cannot be empty");
    if count > 1.0 {
        grads.scale(1.0 / count);
    }
    lp.adam.step(&mut lp.student, &grads, adam_cfg, mask)?;
    lp.teacher.update(&lp.student)?;
    Ok(())
}

pub struct StageOptions<'a> {
    pub cfg: &'a ExperimentConfig,
    pub data_dir: &'a Path,
    pub run_dir: &'a Path,
    pub workers: usize,
    pub quiet: bool,
    /// Stop after this many epochs while keeping the resume state, used to
    /// exercise the interruption contract in tests.
    pub stop_after: Option<u32>,
}

impl<'a> StageOptions<'a> {
    pub fn new(cfg: &'a ExperimentConfig, data_dir: &'a Path, run_dir: &'a Path) -> Self {
        Self {
            cfg,
            data_dir,
            run_dir,
            workers: worker_count(),
            quiet: false,
            stop_after: None,
        }
    }
}

/// Mean-teacher training: a classification phase over every clip, then a
/// confidence phase over the strongly labeled clips only, since the hint
/// blend that trains the confidence head needs frame-level truth. The
/// optimizer restarts at the phase switch; the teacher average does not.
pub fn train_stage1(opts: &StageOptions) -> Result<RunReport> {
    let started = Instant::now();
    let cfg = opts.cfg;
    let (spec, clips) = dataset::load_training(opts.data_dir)?;
    let model_cfg = cfg.model_config(&spec);
    model_cfg.validate()?;
    let pooling = cfg.pooling_spec(spec.num_classes());
    fs::create_dir_all(opts.run_dir).map_err(|e| LabError::io(opts.run_dir, e))?;
    cfg.write_resolved(&opts.run_dir.join(CONFIG_NAME))?;

    let total_epochs = cfg.class_epochs + cfg.conf_epochs;
    let strong: Vec<usize> = clips
        .iter()
        .enumerate()
        .filter(|(_, c)| c.targets.is_strong())
        .map(|(i, _)| i)
        .collect();
    if clips.is_empty() {
        return Err(LabError::data("no training clips in the dataset"));
    }
    if cfg.conf_epochs > 0 && strong.is_empty() {
        return Err(LabError::data(
            "the confidence phase needs strongly labeled clips",
        ));
    }

    let mut lp = resume_or_init(opts.run_dir, 1, &model_cfg, cfg.ema_decay, || {
        Ok(ModelParams::init(&model_cfg, pooling.clone())?)
    })?;
    let weights = cfg.loss_weights();
    let noise = cfg.noise_config();
    let adam_cfg = cfg.adam_config();
    let ctx = StageContext {
        model: &model_cfg,
        noise: &noise,
        weights: &weights,
        seed: cfg.seed,
    };

    let stop_at = opts.stop_after.unwrap_or(total_epochs).min(total_epochs);
    for epoch in lp.start_epoch..stop_at {
        let phase = if epoch < cfg.class_epochs {
            Phase::Classification
        } else {
            Phase::Confidence
        };
        // Fresh optimizer moments when the trainable set changes.
        if epoch == cfg.class_epochs {
            lp.adam = Adam::new(lp.student.param_count());
        }
        let mask = match phase {
            Phase::Classification => TrainMask::classification_phase(),
            Phase::Confidence => TrainMask::confidence_phase(),
        };
        let mut order: Vec<usize> = match phase {
            Phase::Classification => (0..clips.len()).collect(),
            Phase::Confidence => strong.clone(),
        };
        shuffled(&mut order, cfg.seed, epoch as u64);

        let mut epoch_terms = LossTerms::default();
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&TrainClip> = batch.iter().map(|&i| &clips[i]).collect();
            let student = &lp.student;
            let teacher = &lp.teacher.params;
            let outputs = parallel_map(&refs, opts.workers, |clip| {
                Ok(stage1_clip_grads(
                    &ctx, student, teacher, clip, epoch, phase,
                )?)
            });
            apply_batch(outputs, &mut lp, &adam_cfg, &mask, &mut epoch_terms)?;
        }
        epoch_terms.scale(1.0 / order.len() as f64);
        lp.records.push(EpochRecord {
            epoch,
            class_frame: epoch_terms.class_frame,
            class_clip: epoch_terms.class_clip,
            consistency: epoch_terms.consistency,
            confidence: epoch_terms.confidence,
            total: epoch_terms.total,
            exponent: current_exponent(&lp.student),
        });
        save_loop_state(opts.run_dir, 1, &model_cfg, &lp, epoch + 1)?;
        if !opts.quiet {
            let label = match phase {
                Phase::Classification => "class",
                Phase::Confidence => "conf",
            };
            let n = current_exponent(&lp.student)
                .map(|n| format!(" n {n:.3}"))
                .unwrap_or_default();
            println!(
                "stage 1 epoch {}/{total_epochs} [{label}] total {:.4}{n}",
                epoch + 1,
                epoch_terms.total
            );
        }
    }

    if stop_at < total_epochs {
        return Err(LabError::data(format!(
            "stopped after {stop_at} of {total_epochs} epochs (state kept for resume)"
        )));
    }
    finish_run(
        opts.run_dir,
        1,
        &model_cfg,
        &lp,
        total_epochs,
        started,
        (None, None, None),
    )
}

/// Stage-one student parameters carried into stage two, with the clip
/// aggregator swapped to Max as the retraining objective prescribes. The
/// pooling parameters of the donor are dropped; everything else is copied.
fn with_max_pooling(params: &ModelParams) -> ModelParams {
    ModelParams {
        layers: params.layers.clone(),
        class_head: params.class_head.clone(),
        conf_head: params.conf_head.clone(),
        pooling: PoolingSpec::new(PoolingKind::Max),
    }
}

fn same_shape(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.input_dim == b.input_dim
        && a.hidden_dims == b.hidden_dims
        && a.context_radius == b.context_radius
        && a.num_classes == b.num_classes
}

/// Pseudo-label retraining. The stage-one teacher labels the corpus once,
/// up front; the student then retrains from the stage-one student weights
/// (or from scratch with `cold_start`) under Max pooling, with the
/// confidence head frozen and no confidence penalty. The consistency term
/// stays on unless disabled, with its ramp restarted.
pub fn train_stage2(opts: &StageOptions, stage1_dir: &Path) -> Result<RunReport> {
    let started = Instant::now();
    let cfg = opts.cfg;
    let (spec, clips) = dataset::load_training(opts.data_dir)?;
    let model_cfg = cfg.model_config(&spec);
    model_cfg.validate()?;
    fs::create_dir_all(opts.run_dir).map_err(|e| LabError::io(opts.run_dir, e))?;
    cfg.write_resolved(&opts.run_dir.join(CONFIG_NAME))?;

    let teacher_path = stage1_dir.join(TEACHER_CKPT);
    let (t_header, t_params) = load_checkpoint(&teacher_path)?;
    if !same_shape(&t_header.model, &model_cfg) {
        return Err(LabError::data(format!(
            "{}: labeling checkpoint has a different model shape than this config",
            teacher_path.display()
        )));
    }

    let pseudo = generate_pseudo_labels(&model_cfg, &t_params, &clips, cfg.pseudo_mode)?;
    pseudo.validate()?;
    if pseudo.kept_frames == 0 {
        return Err(LabError::data(
            "pseudo-labeling kept zero frames; nothing to retrain on",
        ));
    }
    if !opts.quiet {
        println!(
            "pseudo-labels [{}]: kept {} of {} frame entries",
            cfg.pseudo_mode.as_str(),
            pseudo.kept_frames,
            pseudo.total_frames
        );
    }

    // The self-training baselines bake their weights into the confidence
    // channel; alpha must stay 1 there or dropped frames regain weight.
    let effective_alpha = if cfg.pseudo_mode != PseudoMode::Confidence && cfg.alpha != 1.0 {
        if !opts.quiet {
            println!(
                "pseudo mode {} fixes alpha at 1 (config asked for {})",
                cfg.pseudo_mode.as_str(),
                cfg.alpha
            );
        }
        1.0
    } else {
        cfg.alpha
    };
    let weights = LossWeights {
        alpha: effective_alpha,
        ..cfg.loss_weights()
    };

    let mut lp = resume_or_init(opts.run_dir, 2, &model_cfg, cfg.ema_decay, || {
        if cfg.cold_start {
            Ok(ModelParams::init(
                &model_cfg,
                PoolingSpec::new(PoolingKind::Max),
            )?)
        } else {
            let student_path = stage1_dir.join(STUDENT_CKPT);
            let (s_header, s_params) = load_checkpoint(&student_path)?;
            if !same_shape(&s_header.model, &model_cfg) {
                return Err(LabError::data(format!(
                    "{}: warm-start checkpoint has a different model shape",
                    student_path.display()
                )));
            }
            Ok(with_max_pooling(&s_params))
        }
    })?;

    let noise = cfg.noise_config();
    let adam_cfg = cfg.adam_config();
    let ctx = StageContext {
        model: &model_cfg,
        noise: &noise,
        weights: &weights,
        seed: cfg.seed,
    };
    let pairs: Vec<(&TrainClip, &PseudoClip)> = clips.iter().zip(&pseudo.clips).collect();
    for (clip, pc) in &pairs {
        debug_assert_eq!(clip.id, pc.id);
    }
    let mask = TrainMask::retraining();

    let stop_at = opts
        .stop_after
        .unwrap_or(cfg.stage2_epochs)
        .min(cfg.stage2_epochs);
    for epoch in lp.start_epoch..stop_at {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        shuffled(&mut order, cfg.seed, STAGE2_EPOCH_KEY_BASE + epoch as u64);
        let mut epoch_terms = LossTerms::default();
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&(&TrainClip, &PseudoClip)> = batch.iter().map(|&i| &pairs[i]).collect();
            let student = &lp.student;
            let teacher = &lp.teacher.params;
            let outputs = parallel_map(&refs, opts.workers, |(clip, pc)| {
                let out = stage2_clip_grads(
                    &ctx,
                    student,
                    teacher,
                    &clip.features,
                    pc,
                    epoch,
                    cfg.stage2_consistency,
                    cfg.stage2_uniform,
                )?;
                Ok((out.terms, out.grads))
            });
            apply_batch(outputs, &mut lp, &adam_cfg, &mask, &mut epoch_terms)?;
        }
        epoch_terms.scale(1.0 / order.len() as f64);
        lp.records.push(EpochRecord {
            epoch,
            class_frame: epoch_terms.class_frame,
            class_clip: epoch_terms.class_clip,
            consistency: epoch_terms.consistency,
            confidence: epoch_terms.confidence,
            total: epoch_terms.total,
            exponent: current_exponent(&lp.student),
        });
        save_loop_state(opts.run_dir, 2, &model_cfg, &lp, epoch + 1)?;
        if !opts.quiet {
            println!(
                "stage 2 epoch {}/{} total {:.4}",
                epoch + 1,
                cfg.stage2_epochs,
                epoch_terms.total
            );
        }
    }

    if stop_at < cfg.stage2_epochs {
        return Err(LabError::data(format!(
            "stopped after {stop_at} of {} epochs (state kept for resume)",
            cfg.stage2_epochs
        )));
    }
    finish_run(
        opts.run_dir,
        2,
        &model_cfg,
        &lp,
        cfg.stage2_epochs,
        started,
        (
            Some(cfg.pseudo_mode),
            Some(effective_alpha),
            Some((pseudo.kept_frames, pseudo.total_frames)),
        ),
    )
}

/// Everything evaluation leaves behind, plus the blocks for callers that
/// want the raw counts.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub event: ScoreBlock,
    pub segment: Option<ScoreBlock>,
    pub reliability: ReliabilityReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub role: String,
    pub split: String,
    pub clips: usize,
    pub threshold: f64,
    pub median_ratio: f64,
    pub macro_event_er: f64,
    pub macro_event_f1: f64,
    pub macro_event_del: f64,
    pub macro_event_ins: f64,
    pub macro_segment_er: Option<f64>,
    pub macro_segment_f1: Option<f64>,
}

/// Macro deletion and insertion rates over classes with references.
fn macro_del_ins(block: &ScoreBlock) -> (f64, f64) {
    let scored: Vec<_> = block.per_class.iter().filter(|c| c.nref > 0).collect();
    if scored.is_empty() {
        return (0.0, 0.0);
    }
    let n = scored.len() as f64;
    (
        scored.iter().map(|c| c.deletion_rate()).sum::<f64>() / n,
        scored.iter().map(|c| c.insertion_rate()).sum::<f64>() / n,
    )
}

fn scores_csv_text(block: &ScoreBlock) -> String {
    let mut out = String::from("class,er,f1,del,ins,ntp,nfp,nfn,nref\n");
    for (k, c) in block.per_class.iter().enumerate() {
        out.push_str(&format!(
            "{k},{},{},{},{},{},{},{},{}\n",
            c.error_rate(),
            c.f1(),
            c.deletion_rate(),
            c.insertion_rate(),
            c.ntp,
            c.nfp,
            c.nfn,
            c.nref
        ));
    }
    let (del, ins) = macro_del_ins(block);
    let sum = |f: fn(&milpool_core::metrics::ClassCounts) -> u64| {
        block.per_class.iter().map(f).sum::<u64>()
    };
    out.push_str(&format!(
        "macro,{},{},{del},{ins},{},{},{},{}\n",
        block.macro_error_rate(),
        block.macro_f1(),
        sum(|c| c.ntp),
        sum(|c| c.nfp),
        sum(|c| c.nfn),
        sum(|c| c.nref)
    ));
    out
}

fn reliability_csv_text(report: &ReliabilityReport) -> String {
    let mut out = String::from("source,bin,lo,hi,count,mean_score,accuracy\n");
    let width = 1.0 / report.confidence_bins.len() as f64;
    for (name, bins) in [
        ("confidence", &report.confidence_bins),
        ("posterior", &report.posterior_bins),
    ] {
        for (i, b) in bins.iter().enumerate() {
            out.push_str(&format!(
                "{name},{i},{},{},{},{},{}\n",
                i as f64 * width,
                (i + 1) as f64 * width,
                b.count,
                b.mean_score,
                b.accuracy
            ));
        }
    }
    out
}

pub struct EvalOptions<'a> {
    pub ckpt: &'a Path,
    pub data_dir: &'a Path,
    pub split: Split,
    pub out_dir: &'a Path,
    pub threshold: f64,
    pub median_ratio: f64,
    pub collar: CollarConfig,
    /// Segment length in seconds when segment scores are requested.
    pub segment: Option<f64>,
    pub quiet: bool,
}

/// Scores one checkpoint on one split: noise-free forward, threshold plus
/// class-proportional median filtering, collar-matched event counts, and
/// the reliability partition of confidence and posteriors.
pub fn evaluate(opts: &EvalOptions) -> Result<EvalOutcome> {
    if !(opts.threshold > 0.0 && opts.threshold < 1.0) {
        return Err(LabError::data(
            "threshold must lie strictly between 0 and 1",
        ));
    }
    let (header, params) = load_checkpoint(opts.ckpt)?;
    let (spec, clips) = dataset::load_eval(opts.data_dir, opts.split)?;
    if header.model.input_dim != spec.feature_dim || header.model.num_classes != spec.num_classes()
    {
        return Err(LabError::data(format!(
            "{}: checkpoint shape does not match the dataset ({}x{} vs {}x{})",
            opts.ckpt.display(),
            header.model.input_dim,
            header.model.num_classes,
            spec.feature_dim,
            spec.num_classes()
        )));
    }
    let classes = spec.num_classes();
    let windows =
        class_windows_from_durations(&spec.mean_durations(), spec.frame_rate, opts.median_ratio)?;
    let mut events = EventScorer::new(classes, opts.collar);
    let mut segments = opts
        .segment
        .map(|len| SegmentScorer::new(classes, len))
        .transpose()?;
    let mut reliability = ReliabilityAccumulator::new();

    for clip in &clips {
        let bundle = forward(&clip.features, &header.model, &params)?;
        let estimated = decode_events(
            &bundle.frame_probs,
            opts.threshold,
            &windows,
            spec.frame_rate,
        )?;
        events.add_clip(&clip.events, &estimated)?;
        if let Some(seg) = &mut segments {
            seg.add_clip(&clip.events, &estimated, spec.clip_len_sec())?;
        }
        let truth = rasterize_events(&clip.events, spec.frames_per_clip, classes, spec.frame_rate)?;
        reliability.add_clip(&bundle.frame_probs, &bundle.confidence, &truth)?;
    }

    let event_block = events.scores();
    let segment_block = segments.map(|s| s.scores());
    let rel_report = reliability.report();
    let (del, ins) = macro_del_ins(&event_block);
    let report = EvalReport {
        checkpoint: opts.ckpt.display().to_string(),
        role: header.role.as_str().to_string(),
        split: opts.split.as_str().to_string(),
        clips: clips.len(),
        threshold: opts.threshold,
        median_ratio: opts.median_ratio,
        macro_event_er: event_block.macro_error_rate(),
        macro_event_f1: event_block.macro_f1(),
        macro_event_del: del,
        macro_event_ins: ins,
        macro_segment_er: segment_block.as_ref().map(|b| b.macro_error_rate()),
        macro_segment_f1: segment_block.as_ref().map(|b| b.macro_f1()),
    };

    fs::create_dir_all(opts.out_dir).map_err(|e| LabError::io(opts.out_dir, e))?;
    write_atomic(
        &opts.out_dir.join(EVENT_CSV),
        scores_csv_text(&event_block).as_bytes(),
    )?;
    if let Some(block) = &segment_block {
        write_atomic(
            &opts.out_dir.join(SEGMENT_CSV),
            scores_csv_text(block).as_bytes(),
        )?;
    }
    write_json(&opts.out_dir.join(RELIABILITY_JSON), &rel_report)?;
    write_atomic(
        &opts.out_dir.join(RELIABILITY_CSV),
        reliability_csv_text(&rel_report).as_bytes(),
    )?;
    write_json(&opts.out_dir.join(EVAL_JSON), &report)?;

    if !opts.quiet {
        print_score_table(&event_block, segment_block.as_ref(), &report);
    }
    Ok(EvalOutcome {
        report,
        event: event_block,
        segment: segment_block,
        reliability: rel_report,
    })
}

fn print_score_table(event: &ScoreBlock, segment: Option<&ScoreBlock>, report: &EvalReport) {
    println!(
        "event-based scores, {} {} on split {}",
        report.role, report.checkpoint, report.split
    );
    println!(
        "{:>6} {:>8} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6} {:>6}",
        "class", "ER", "F1", "DEL", "INS", "Ntp", "Nfp", "Nfn", "Nref"
    );
    for (k, c) in event.per_class.iter().enumerate() {
        println!(
            "{k:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>6} {:>6} {:>6} {:>6}",
            c.error_rate(),
            c.f1(),
            c.deletion_rate(),
            c.insertion_rate(),
            c.ntp,
            c.nfp,
            c.nfn,
            c.nref
        );
    }
    println!(
        "{:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
        "macro",
        report.macro_event_er,
        report.macro_event_f1,
        report.macro_event_del,
        report.macro_event_ins
    );
    if let Some(block) = segment {
        println!(
            "segment-based macro: ER {:.3} F1 {:.3}",
            block.macro_error_rate(),
            block.macro_f1()
        );
    }
}

/// Quick numerical self-tests behind the `check` subcommand: cheap
/// invariants that catch a miscompiled or miswired build without running
/// a full training job.
pub fn run_self_checks(quiet: bool) -> Result<()> {
    use milpool_core::numerics::{finite_diff_gradient, max_rel_err, FD_STEP};
    use milpool_core::pooling::{pool_backward, pool_forward, power_threshold, PoolInput};
    use milpool_core::teacher::ema_update;

    let pass = |name: &str| {
        if !quiet {
            println!("check: {name} ... ok");
        }
    };
    let fail = |name: &str, detail: String| -> LabError {
        LabError::Numeric(format!("self-check '{name}' failed: {detail}"))
    };

    // Power pooling gradient against central finite differences.
    {
        let mut rng = RngStream::new(7, [90, 0, 0]);
        let spec = PoolingSpec::power(1.7);
        for _ in 0..20 {
            let y: Vec<f64> = (0..12).map(|_| rng.uniform(0.02, 0.98)).collect();
            let grads = pool_backward(&y, &spec, 0, 1.0, PoolInput::none())?;
            let numeric = finite_diff_gradient(
                |x| pool_forward(x, &spec, 0, PoolInput::none()).expect("forward in probe"),
                &y,
                FD_STEP,
            )?;
            let err = max_rel_err(&grads.frames, &numeric, 1e-6);
            if err > 1e-5 {
                return Err(fail("power gradient", format!("relative error {err:.2e}")));
            }
        }
        pass("power gradient vs finite differences");
    }

    // Exponent interpolation endpoints.
    {
        let mut rng = RngStream::new(8, [91, 0, 0]);
        let y: Vec<f64> = (0..30).map(|_| rng.uniform(0.01, 0.99)).collect();
        let mean = pool_forward(
            &y,
            &PoolingSpec::new(PoolingKind::Mean),
            0,
            PoolInput::none(),
        )?;
        let zero = pool_forward(&y, &PoolingSpec::power(0.0), 0, PoolInput::none())?;
        if (mean - zero).abs() > 1e-12 {
            return Err(fail(
                "interpolation",
                format!("n=0 vs mean differ by {:.2e}", (mean - zero).abs()),
            ));
        }
        let linear = pool_forward(
            &y,
            &PoolingSpec::new(PoolingKind::Linear),
            0,
            PoolInput::none(),
        )?;
        let one = pool_forward(&y, &PoolingSpec::power(1.0), 0, PoolInput::none())?;
        if (linear - one).abs() > 1e-12 {
            return Err(fail(
                "interpolation",
                format!("n=1 vs linear differ by {:.2e}", (linear - one).abs()),
            ));
        }
        pass("power pooling endpoints (mean, linear)");
    }

    // Gradient sign law: sign(dy_c/dy_f) = sign(y_f - theta * y_c).
    {
        let mut rng = RngStream::new(9, [92, 0, 0]);
        for _ in 0..50 {
            let n = rng.uniform(0.1, 6.0);
            let spec = PoolingSpec::power(n);
            let y: Vec<f64> = (0..10).map(|_| rng.uniform(0.02, 0.98)).collect();
            let clip = pool_forward(&y, &spec, 0, PoolInput::none())?;
            let grads = pool_backward(&y, &spec, 0, 1.0, PoolInput::none())?;
            for (i, &g) in grads.frames.iter().enumerate() {
                let margin = y[i] - power_threshold(n) * clip;
                if (g > 1e-12 && margin < -1e-9) || (g < -1e-12 && margin > 1e-9) {
                    return Err(fail(
                        "threshold law",
                        format!("frame {i}: gradient {g:.3e} against margin {margin:.3e}"),
                    ));
                }
            }
        }
        pass("gradient sign threshold law");
    }

    // Teacher averaging closed form under a constant student.
    {
        let cfg = ModelConfig {
            input_dim: 3,
            hidden_dims: vec![4],
            context_radius: 1,
            num_classes: 2,
            seed: 5,
        };
        let student = ModelParams::init(&cfg, PoolingSpec::power(1.2))?;
        let mut teacher = student.zeros_like();
        let decay = 0.9;
        for _ in 0..40 {
            ema_update(&mut teacher, &student, decay)?;
        }
        let expect = 1.0 - decay.powi(40);
        let flat_t = teacher.to_flat();
        let flat_s = student.to_flat();
        for (t, s) in flat_t.iter().zip(&flat_s) {
            if (t - s * expect).abs() > 1e-10 {
                return Err(fail("teacher averaging", format!("{t} vs {}", s * expect)));
            }
        }
        pass("teacher averaging closed form");
    }

    // Event decode round trip on a frame-aligned raster.
    {
        let events = vec![
            milpool_core::metrics::Event::new(0, 0.4, 0.8)?,
            milpool_core::metrics::Event::new(1, 1.0, 2.0)?,
        ];
        let raster = rasterize_events(&events, 75, 2, 25.0)?;
        let back = decode_events(&raster, 0.5, &[1, 1], 25.0)?;
        if back != events {
            return Err(fail("decode round trip", format!("{back:?}")));
        }
        pass("event decode round trip");
    }

    // Stream determinism.
    {
        let a: Vec<u64> = {
            let mut r = RngStream::new(3, [1, 2, 3]);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::new(3, [1, 2, 3]);
            (0..8).map(|_| r.next_u64()).collect()
        };
        if a != b {
            return Err(fail(
                "stream determinism",
                "replayed stream diverged".into(),
            ));
        }
        pass("random stream determinism");
    }

    Ok(())
}
