//! On-disk corpus layout.
//!
//! A dataset directory holds four files:
//!
//! - `manifest.json`: the generation spec plus one record per clip with its
//!   byte range into the feature blob, a checksum, and the clip-level
//!   labels for weakly annotated clips.
//! - `features.bin`: every clip's T x F feature matrix as little-endian
//!   f32, row-major, concatenated in manifest order.
//! - `strong_labels.json`: event lists for the strongly labeled training
//!   clips and the validation clips, the supervision training may read.
//! - `hidden_truth.json`: event lists for every clip, weak and unlabeled
//!   ones included. Only evaluation and diagnostics read this file; the
//!   loader that feeds training never opens it, so a training run cannot
//!   depend on labels it is not entitled to.
//!
//! Clip ids are unique within the training splits and, separately, within
//! validation, so records are keyed by (split, id).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use milpool_core::losses::FrameTargets;
use milpool_core::metrics::{rasterize_events, Event};
use milpool_core::numerics::Matrix;
use milpool_core::synth::{Dataset, DatasetSpec, Split};
use milpool_core::train::TrainClip;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{LabError, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FEATURES_NAME: &str = "features.bin";
pub const STRONG_NAME: &str = "strong_labels.json";
pub const TRUTH_NAME: &str = "hidden_truth.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: u64,
    pub split: Split,
    /// Byte range into `features.bin`.
    pub offset: u64,
    pub len_bytes: u64,
    /// Hex SHA-256 of that byte range.
    pub sha256: String,
    /// Clip-level class presence, weak split only.
    pub weak_labels: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub spec: DatasetSpec,
    pub clips: Vec<ClipRecord>,
}

/// One entry of the label files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabeledEvents {
    pub id: u64,
    pub split: Split,
    pub events: Vec<Event>,
}

/// What `gen-data` reports after writing.
#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub dir: PathBuf,
    pub counts: [(Split, usize); 4],
    pub feature_bytes: u64,
    pub features_sha256: String,
    pub manifest_sha256: String,
}

pub fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn matrix_to_f32_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.data().len() * 4);
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn matrix_from_f32_bytes(bytes: &[u8], rows: usize, cols: usize) -> Result<Matrix> {
    if bytes.len() != rows * cols * 4 {
        return Err(LabError::data(format!(
            "feature blob slice holds {} bytes, expected {}",
            bytes.len(),
            rows * cols * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Matrix::from_vec(rows, cols, data)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| LabError::data(format!("{}: encoding: {e}", path.display())))?;
    bytes.push(b'\n');
    crate::checkpoint::write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| LabError::data(format!("{}: {e}", path.display())))
}

/// Writes a generated corpus. Refuses to touch a directory that already
/// holds a manifest unless `force` is set.
pub fn write_dataset(dir: &Path, data: &Dataset, force: bool) -> Result<DatasetSummary> {
    let manifest_path = dir.join(MANIFEST_NAME);
    if manifest_path.exists() && !force {
        return Err(LabError::data(format!(
            "{} already holds a dataset; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;

    let mut blob = Vec::new();
    let mut records = Vec::with_capacity(data.clips.len());
    let mut strong = Vec::new();
    let mut truth = Vec::with_capacity(data.clips.len());
    for clip in &data.clips {
        let bytes = matrix_to_f32_bytes(&clip.features);
        records.push(ClipRecord {
            id: clip.id,
            split: clip.split,
            offset: blob.len() as u64,
            len_bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
            weak_labels: match (&clip.split, &clip.targets) {
                (Split::Weak, FrameTargets::Weak { clip: labels }) => Some(labels.clone()),
                _ => None,
            },
        });
        blob.extend_from_slice(&bytes);
        let entry = LabeledEvents {
            id: clip.id,
            split: clip.split,
            events: clip.truth_events.clone(),
        };
        if matches!(clip.split, Split::Strong | Split::Validation) {
            strong.push(entry.clone());
        }
        truth.push(entry);
    }

    crate::checkpoint::write_atomic(&dir.join(FEATURES_NAME), &blob)?;
    write_json(&dir.join(STRONG_NAME), &strong)?;
    write_json(&dir.join(TRUTH_NAME), &truth)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        spec: data.spec.clone(),
        clips: records,
    };
    write_json(&manifest_path, &manifest)?;

    let manifest_bytes = fs::read(&manifest_path).map_err(|e| LabError::io(&manifest_path, e))?;
    let count = |s: Split| data.clips.iter().filter(|c| c.split == s).count();
    Ok(DatasetSummary {
        dir: dir.to_path_buf(),
        counts: [
            (Split::Strong, count(Split::Strong)),
            (Split::Weak, count(Split::Weak)),
            (Split::Unlabeled, count(Split::Unlabeled)),
            (Split::Validation, count(Split::Validation)),
        ],
        feature_bytes: blob.len() as u64,
        features_sha256: sha256_hex(&blob),
        manifest_sha256: sha256_hex(&manifest_bytes),
    })
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_NAME))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(LabError::data(format!(
            "{}: manifest version {} unsupported",
            dir.display(),
            manifest.version
        )));
    }
    manifest.spec.validate()?;
    Ok(manifest)
}

/// Reads and checksum-verifies the feature matrices of the selected splits,
/// in manifest order.
fn load_features(
    dir: &Path,
    manifest: &Manifest,
    splits: &[Split],
) -> Result<Vec<(usize, Matrix)>> {
    let path = dir.join(FEATURES_NAME);
    let blob = fs::read(&path).map_err(|e| LabError::io(&path, e))?;
    let spec = &manifest.spec;
    let mut out = Vec::new();
    for (idx, rec) in manifest.clips.iter().enumerate() {
        if !splits.contains(&rec.split) {
            continue;
        }
        let lo = rec.offset as usize;
        let hi = lo + rec.len_bytes as usize;
        if hi > blob.len() {
            return Err(LabError::data(format!(
                "{}: clip {} {} points past the end of the feature blob",
                dir.display(),
                rec.split.as_str(),
                rec.id
            )));
        }
        let slice = &blob[lo..hi];
        if sha256_hex(slice) != rec.sha256 {
            return Err(LabError::data(format!(
                "{}: checksum mismatch on clip {} {}",
                dir.display(),
                rec.split.as_str(),
                rec.id
            )));
        }
        out.push((
            idx,
            matrix_from_f32_bytes(slice, spec.frames_per_clip, spec.feature_dim)?,
        ));
    }
    Ok(out)
}

fn events_by_key(entries: Vec<LabeledEvents>) -> HashMap<(Split, u64), Vec<Event>> {
    entries
        .into_iter()
        .map(|e| ((e.split, e.id), e.events))
        .collect()
}

/// Loads the three training splits as `TrainClip`s, in manifest order.
/// Strong clips get their frame targets from `strong_labels.json`; this
/// function never opens the hidden truth file.
pub fn load_training(dir: &Path) -> Result<(DatasetSpec, Vec<TrainClip>)> {
    let manifest = load_manifest(dir)?;
    let spec = manifest.spec.clone();
    let strong = events_by_key(read_json(&dir.join(STRONG_NAME))?);
    let features = load_features(
        dir,
        &manifest,
        &[Split::Strong, Split::Weak, Split::Unlabeled],
    )?;
    let mut clips = Vec::with_capacity(features.len());
    for (idx, feats) in features {
        let rec = &manifest.clips[idx];
        let targets = match rec.split {
            Split::Strong => {
                let events = strong.get(&(rec.split, rec.id)).ok_or_else(|| {
                    LabError::data(format!(
                        "{}: strong clip {} has no entry in {STRONG_NAME}",
                        dir.display(),
                        rec.id
                    ))
                })?;
                let frames = rasterize_events(
                    events,
                    spec.frames_per_clip,
                    spec.num_classes(),
                    spec.frame_rate,
                )?;
                FrameTargets::strong_from_frames(frames)
            }
            Split::Weak => {
                let labels = rec.weak_labels.clone().ok_or_else(|| {
                    LabError::data(format!(
                        "{}: weak clip {} carries no clip labels",
                        dir.display(),
                        rec.id
                    ))
                })?;
                FrameTargets::Weak { clip: labels }
            }
            Split::Unlabeled => FrameTargets::Unlabeled,
            Split::Validation => unreachable!("validation filtered out above"),
        };
        clips.push(TrainClip {
            id: rec.id,
            features: feats,
            targets,
        });
    }
    Ok((spec, clips))
}

/// One clip ready for scoring: features plus complete ground truth.
#[derive(Clone, Debug)]
pub struct EvalClip {
    pub id: u64,
    pub features: Matrix,
    pub events: Vec<Event>,
}

/// Loads one split with its hidden ground truth, for evaluation only.
pub fn load_eval(dir: &Path, split: Split) -> Result<(DatasetSpec, Vec<EvalClip>)> {
    let manifest = load_manifest(dir)?;
    let spec = manifest.spec.clone();
    let truth = events_by_key(read_json(&dir.join(TRUTH_NAME))?);
    let features = load_features(dir, &manifest, &[split])?;
    if features.is_empty() {
        return Err(LabError::data(format!(
            "{}: no clips in split {}",
            dir.display(),
            split.as_str()
        )));
    }
    let mut clips = Vec::with_capacity(features.len());
    for (idx, feats) in features {
        let rec = &manifest.clips[idx];
        let events = truth.get(&(rec.split, rec.id)).cloned().ok_or_else(|| {
            LabError::data(format!(
                "{}: clip {} {} missing from {TRUTH_NAME}",
                dir.display(),
                rec.split.as_str(),
                rec.id
            ))
        })?;
        clips.push(EvalClip {
            id: rec.id,
            features: feats,
            events,
        });
    }
    Ok((spec, clips))
}
