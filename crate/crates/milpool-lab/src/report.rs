//! Cross-run comparison: collects the JSON summaries from several run
//! directories and emits comparison CSVs with matching SVG charts.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::write_atomic;
use crate::pipeline::{self, RELIABILITY_JSON};
use crate::svg::{bar_chart, line_chart, Series};
use crate::{LabError, Result};
use milpool_core::metrics::ReliabilityReport;

pub const N_TRAJECTORY_CSV: &str = "n_trajectory.csv";
pub const N_TRAJECTORY_SVG: &str = "n_trajectory.svg";
pub const RELIABILITY_CSV: &str = "reliability.csv";
pub const RELIABILITY_SVG: &str = "reliability.svg";
pub const ER_CSV: &str = "er_comparison.csv";
pub const ER_SVG: &str = "er_comparison.svg";

struct RunData {
    name: String,
    report: pipeline::RunReport,
    eval: Option<pipeline::EvalReport>,
    reliability: Option<ReliabilityReport>,
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn collect(runs: &[PathBuf]) -> Result<Vec<RunData>> {
    let mut out = Vec::new();
    for dir in runs {
        let report = pipeline::read_run_report(dir).map_err(|e| {
            LabError::data(format!(
                "{}: not a finished run directory ({e})",
                dir.display()
            ))
        })?;
        let eval = pipeline::read_eval_report(dir).ok();
        let reliability = dir
            .join(RELIABILITY_JSON)
            .exists()
            .then(|| pipeline::read_reliability(dir))
            .transpose()?;
        out.push(RunData {
            name: run_name(dir),
            report,
            eval,
            reliability,
        });
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn n_trajectory(out_dir: &Path, runs: &[RunData]) -> Result<bool> {
    let with_n: Vec<&RunData> = runs
        .iter()
        .filter(|r| r.report.records.iter().any(|rec| rec.exponent.is_some()))
        .collect();
    if with_n.is_empty() {
        return Ok(false);
    }
    let mut csv = String::from("run,epoch,exponent\n");
    let mut series = Vec::new();
    for run in &with_n {
        let mut points = Vec::new();
        for rec in &run.report.records {
            if let Some(n) = rec.exponent {
                csv.push_str(&format!("{},{},{n}\n", run.name, rec.epoch));
                points.push((rec.epoch as f64, n));
            }
        }
        series.push(Series::new(run.name.clone(), points));
    }
    write_text(&out_dir.join(N_TRAJECTORY_CSV), &csv)?;
    let svg = line_chart("pooling exponent by epoch", "epoch", "exponent n", &series);
    write_text(&out_dir.join(N_TRAJECTORY_SVG), &svg)?;
    Ok(true)
}

fn reliability(out_dir: &Path, runs: &[RunData]) -> Result<bool> {
    let with_rel: Vec<&RunData> = runs.iter().filter(|r| r.reliability.is_some()).collect();
    if with_rel.is_empty() {
        return Ok(false);
    }
    let mut csv = String::from("run,source,bin,lo,hi,count,mean_score,accuracy\n");
    let mut series = Vec::new();
    for run in &with_rel {
        let rel = run.reliability.as_ref().unwrap();
        let width = 1.0 / rel.confidence_bins.len() as f64;
        for (source, bins) in [
            ("confidence", &rel.confidence_bins),
            ("posterior", &rel.posterior_bins),
        ] {
            let mut points = Vec::new();
            for (i, b) in bins.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{source},{i},{},{},{},{},{}\n",
                    run.name,
                    i as f64 * width,
                    (i + 1) as f64 * width,
                    b.count,
                    b.mean_score,
                    b.accuracy
                ));
                if b.count > 0 {
                    points.push((b.mean_score, b.accuracy));
                }
            }
            series.push(Series::new(format!("{} {source}", run.name), points));
        }
    }
    series.push(Series::dashed("ideal", vec![(0.0, 0.0), (1.0, 1.0)]));
    write_text(&out_dir.join(RELIABILITY_CSV), &csv)?;
    let svg = line_chart(
        "reliability",
        "mean predicted score",
        "empirical accuracy",
        &series,
    );
    write_text(&out_dir.join(RELIABILITY_SVG), &svg)?;
    Ok(true)
}

fn er_comparison(out_dir: &Path, runs: &[RunData]) -> Result<bool> {
    let with_eval: Vec<&RunData> = runs.iter().filter(|r| r.eval.is_some()).collect();
    if with_eval.is_empty() {
        return Ok(false);
    }
    let mut csv = String::from("run,macro_er,macro_f1\n");
    let mut bars = Vec::new();
    for run in &with_eval {
        let eval = run.eval.as_ref().unwrap();
        csv.push_str(&format!(
            "{},{},{}\n",
            run.name, eval.macro_event_er, eval.macro_event_f1
        ));
        bars.push((run.name.clone(), eval.macro_event_er));
    }
    write_text(&out_dir.join(ER_CSV), &csv)?;
    let svg = bar_chart("macro event error rate", "ER", &bars);
    write_text(&out_dir.join(ER_SVG), &svg)?;
    Ok(true)
}

/// Builds the comparison bundle. Sections without source data are skipped
/// with a note rather than failing, so partial run sets still report.
pub fn build_report(out_dir: &Path, runs: &[PathBuf], quiet: bool) -> Result<()> {
    if runs.is_empty() {
        return Err(LabError::usage("report needs at least one run directory"));
    }
    let data = collect(runs)?;
    fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    let note = |what: &str, wrote: bool| {
        if !quiet {
            if wrote {
                println!("report: wrote {what}");
            } else {
                println!("report: skipped {what} (no source data in these runs)");
            }
        }
    };
    let wrote = n_trajectory(out_dir, &data)?;
    note("n_trajectory.csv/svg", wrote);
    let wrote = reliability(out_dir, &data)?;
    note("reliability.csv/svg", wrote);
    let wrote = er_comparison(out_dir, &data)?;
    note("er_comparison.csv/svg", wrote);
    Ok(())
}
