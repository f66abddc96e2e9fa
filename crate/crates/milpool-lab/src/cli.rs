//! Command-line surface of the lab binary.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use milpool_core::synth::{generate_dataset, Split};

use crate::config::ExperimentConfig;
use crate::dataset;
use crate::pipeline::{
    self, evaluate, run_self_checks, train_stage1, train_stage2, EvalOptions, StageOptions,
};
use crate::report::build_report;
use crate::{LabError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "milpool",
    version,
    about = "Sound event detection lab: synthetic data, two-stage training, scoring"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        /// Experiment config file (flat key = value text).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Master seed; overrides the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Extra KEY=VALUE override, repeatable, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Overwrite an existing dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one stage into a run directory (resumes if state is present).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, logs, and state.
        #[arg(long)]
        out: PathBuf,
        /// 1 = mean-teacher training, 2 = pseudo-label retraining.
        #[arg(long)]
        stage: u8,
        /// Stage-one run directory (required for stage 2).
        #[arg(long)]
        stage1_run: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Suppress per-epoch progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint against a dataset split.
    Evaluate {
        /// Run directory; its teacher checkpoint is scored by default.
        #[arg(long, required_unless_present = "ckpt")]
        run: Option<PathBuf>,
        /// Explicit checkpoint path (overrides --run's default).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Dataset split: strong, weak, unlabeled, or validation.
        #[arg(long, default_value = "validation")]
        split: String,
        /// Where to write score files (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the student checkpoint instead of the teacher.
        #[arg(long)]
        use_student: bool,
        /// Also compute fixed-length segment scores.
        #[arg(long)]
        segment: bool,
        /// Config supplying threshold and filter settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Combine several runs into comparison CSVs and charts.
    Report {
        /// Output directory for the comparison bundle.
        #[arg(long)]
        out: PathBuf,
        /// Run directories to compare.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run built-in numerical self-checks.
    Check,
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "strong" => Ok(Split::Strong),
        "weak" => Ok(Split::Weak),
        "unlabeled" => Ok(Split::Unlabeled),
        "validation" => Ok(Split::Validation),
        other => Err(LabError::usage(format!(
            "unknown split '{other}' (expected strong, weak, unlabeled, or validation)"
        ))),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            out,
            seed,
            set,
            force,
        } => {
            let cfg = ExperimentConfig::from_sources(config.as_deref(), seed, &set)?;
            let spec = cfg.dataset_spec();
            let data = generate_dataset(&spec)?;
            let summary = dataset::write_dataset(&out, &data, force)?;
            println!("dataset written to {}", summary.dir.display());
            for (split, count) in summary.counts {
                println!("  {:<12} {count} clips", split.as_str());
            }
            println!(
                "  features     {} bytes, sha256 {}",
                summary.feature_bytes, summary.features_sha256
            );
            println!("  manifest     sha256 {}", summary.manifest_sha256);
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            stage,
            stage1_run,
            seed,
            set,
            quiet,
        } => {
            let cfg = ExperimentConfig::from_sources(Some(&config), seed, &set)?;
            let mut opts = StageOptions::new(&cfg, &data, &out);
            opts.quiet = quiet;
            let report = match stage {
                1 => train_stage1(&opts)?,
                2 => {
                    let s1 = stage1_run.ok_or_else(|| {
                        LabError::usage(
                            "--stage 2 needs --stage1-run pointing at a finished stage-one run",
                        )
                    })?;
                    train_stage2(&opts, &s1)?
                }
                other => {
                    return Err(LabError::usage(format!(
                        "--stage must be 1 or 2, got {other}"
                    )))
                }
            };
            if !quiet {
                println!(
                    "stage {} done in {:.1}s, checkpoints in {}",
                    report.stage,
                    report.wall_clock_sec,
                    out.display()
                );
            }
            Ok(())
        }
        Command::Evaluate {
            run,
            ckpt,
            data,
            split,
            out,
            use_student,
            segment,
            config,
            set,
            quiet,
        } => {
            let cfg = ExperimentConfig::eval_sources(config.as_deref(), &set)?;
            let ckpt_path = match (ckpt, &run) {
                (Some(path), _) => path,
                (None, Some(dir)) => dir.join(if use_student {
                    pipeline::STUDENT_CKPT
                } else {
                    pipeline::TEACHER_CKPT
                }),
                (None, None) => {
                    return Err(LabError::usage("evaluate needs --run or --ckpt"));
                }
            };
            let out_dir = out
                .or(run)
                .ok_or_else(|| LabError::usage("evaluate needs --out when only --ckpt is given"))?;
            evaluate(&EvalOptions {
                ckpt: &ckpt_path,
                data_dir: &data,
                split: parse_split(&split)?,
                out_dir: &out_dir,
                threshold: cfg.threshold,
                median_ratio: cfg.median_ratio,
                collar: cfg.collar_config(),
                segment: segment.then_some(cfg.segment_length),
                quiet,
            })?;
            Ok(())
        }
        Command::Report { out, runs } => build_report(&out, &runs, false),
        Command::Check => {
            run_self_checks(false)?;
            println!("all checks passed");
            Ok(())
        }
    }
}
