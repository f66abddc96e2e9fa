//! Binary formats for model checkpoints and resumable training state.
//!
//! Both files share one layout: an 8-byte magic, a little-endian u32 header
//! length, a JSON header, then little-endian f64 blobs. Parameters are
//! stored in the model's canonical layout order (hidden layers, class head,
//! confidence head, pooling), exactly as `ModelParams::to_flat` emits them.
//! Every write lands in a temporary sibling first and is renamed into
//! place, so a reader never sees a half-written file and an interrupted
//! run can always restart from the previous state.

use std::fs;
use std::path::Path;

use milpool_core::model::{ModelConfig, ModelParams};
use milpool_core::pooling::PoolingSpec;
use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MPOOLCK1";
pub const STATE_MAGIC: &[u8; 8] = b"MPOOLST1";
pub const FORMAT_VERSION: u32 = 1;

/// Which of the two averaged models a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Teacher,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Student => "student",
            Role::Teacher => "teacher",
        }
    }
}

/// Per-epoch loss components plus the pooling exponent after the epoch.
/// `exponent` is absent for aggregators without one; with per-class
/// exponents it records their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub class_frame: f64,
    pub class_clip: f64,
    pub consistency: f64,
    pub confidence: f64,
    pub total: f64,
    pub exponent: Option<f64>,
}

/// JSON head of a checkpoint file. The pooling spec here carries the
/// structure (kind, sharing, clamps); the live parameter values are in the
/// blob and overwrite it on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub role: Role,
    pub model: ModelConfig,
    pub pooling: PoolingSpec,
    /// Epochs completed when the snapshot was taken.
    pub epochs: u32,
    pub losses: Vec<EpochRecord>,
    pub param_count: usize,
}

/// JSON head of a training-state file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StateHeader {
    pub version: u32,
    pub stage: u8,
    pub epochs_done: u32,
    pub model: ModelConfig,
    pub pooling: PoolingSpec,
    pub records: Vec<EpochRecord>,
    pub param_count: usize,
    pub adam_steps: u64,
}

/// Everything needed to continue a run: both models and the optimizer
/// moments, each `param_count` long in the blob, in this order.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub header: StateHeader,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

/// Writes to a `.tmp` sibling and renames over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| LabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))?;
    Ok(())
}

fn encode(magic: &[u8; 8], header: &[u8], blobs: &[&[f64]]) -> Vec<u8> {
    let blob_len: usize = blobs.iter().map(|b| b.len() * 8).sum();
    let mut out = Vec::with_capacity(8 + 4 + header.len() + blob_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    for blob in blobs {
        for v in *blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Splits a file into (header JSON, blob bytes), checking the magic.
fn decode<'a>(bytes: &'a [u8], magic: &[u8; 8], path: &Path) -> Result<(&'a [u8], &'a [u8])> {
    let bad = |what: &str| LabError::data(format!("{}: {what}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(bad("not a recognized file (bad magic)"));
    }
    let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err(bad("truncated header"));
    }
    Ok((&body[..header_len], &body[header_len..]))
}

fn read_floats(bytes: &[u8], expected: usize, path: &Path) -> Result<Vec<f64>> {
    if bytes.len() != expected * 8 {
        return Err(LabError::data(format!(
            "{}: parameter blob holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &ModelParams) -> Result<()> {
    debug_assert_eq!(header.param_count, params.param_count());
    let json = serde_json::to_vec(header)
        .map_err(|e| LabError::data(format!("checkpoint header encoding: {e}")))?;
    write_atomic(path, &encode(CHECKPOINT_MAGIC, &json, &[&params.to_flat()]))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    let (head, blob) = decode(&bytes, CHECKPOINT_MAGIC, path)?;
    let header: CheckpointHeader = serde_json::from_slice(head)
        .map_err(|e| LabError::data(format!("{}: header: {e}", path.display())))?;
    let flat = read_floats(blob, header.param_count, path)?;
    let mut params = ModelParams::init(&header.model, header.pooling.clone())?;
    if params.param_count() != header.param_count {
        return Err(LabError::data(format!(
            "{}: header promises {} parameters but the model shape yields {}",
            path.display(),
            header.param_count,
            params.param_count()
        )));
    }
    params.assign_from_flat(&flat)?;
    if !params.all_finite() {
        return Err(LabError::data(format!(
            "{}: parameter blob contains non-finite values",
            path.display()
        )));
    }
    Ok((header, params))
}

pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    let n = state.header.param_count;
    debug_assert_eq!(state.student.param_count(), n);
    debug_assert_eq!(state.teacher.param_count(), n);
    debug_assert_eq!(state.adam_m.len(), n);
    debug_assert_eq!(state.adam_v.len(), n);
    let json = serde_json::to_vec(&state.header)
        .map_err(|e| LabError::data(format!("state header encoding: {e}")))?;
    let bytes = encode(
        STATE_MAGIC,
        &json,
        &[
            &state.student.to_flat(),
            &state.teacher.to_flat(),
            &state.adam_m,
            &state.adam_v,
        ],
    );
    write_atomic(path, &bytes)
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    let (head, blob) = decode(&bytes, STATE_MAGIC, path)?;
    let header: StateHeader = serde_json::from_slice(head)
        .map_err(|e| LabError::data(format!("{}: header: {e}", path.display())))?;
    let n = header.param_count;
    let flat = read_floats(blob, 4 * n, path)?;
    let mut student = ModelParams::init(&header.model, header.pooling.clone())?;
    if student.param_count() != n {
        return Err(LabError::data(format!(
            "{}: header promises {} parameters but the model shape yields {}",
            path.display(),
            n,
            student.param_count()
        )));
    }
    let mut teacher = student.clone();
    student.assign_from_flat(&flat[..n])?;
    teacher.assign_from_flat(&flat[n..2 * n])?;
    if !student.all_finite() || !teacher.all_finite() {
        return Err(LabError::data(format!(
            "{}: parameter blob contains non-finite values",
            path.display()
        )));
    }
    Ok(TrainState {
        header,
        student,
        teacher,
        adam_m: flat[2 * n..3 * n].to_vec(),
        adam_v: flat[3 * n..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig {
            input_dim: 3,
            hidden_dims: vec![4],
            context_radius: 1,
            num_classes: 2,
            seed: 9,
        };
        let params = ModelParams::init(&cfg, PoolingSpec::power(1.5)).unwrap();
        (cfg, params)
    }

    fn record(epoch: u32) -> EpochRecord {
        EpochRecord {
            epoch,
            class_frame: 0.5,
            class_clip: 0.25,
            consistency: 0.1,
            confidence: 0.0,
            total: 0.85,
            exponent: Some(1.5),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, params) = tiny();
        let header = CheckpointHeader {
            version: FORMAT_VERSION,
            role: Role::Teacher,
            model: cfg,
            pooling: params.pooling.clone(),
            epochs: 3,
            losses: vec![record(0), record(1), record(2)],
            param_count: params.param_count(),
        };
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &header, &params).unwrap();
        let (back_header, back_params) = load_checkpoint(&path).unwrap();
        assert_eq!(back_params, params);
        assert_eq!(back_header.role, Role::Teacher);
        assert_eq!(back_header.losses.len(), 3);
        assert_eq!(back_header.model, header.model);

        // Saving again produces identical bytes.
        save_checkpoint(&path, &header, &params).unwrap();
        let once = fs::read(&path).unwrap();
        save_checkpoint(&path, &header, &params).unwrap();
        assert_eq!(once, fs::read(&path).unwrap());
    }

    #[test]
    fn state_round_trip_preserves_all_four_blobs() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, student) = tiny();
        let mut teacher = student.clone();
        teacher.scale(0.5);
        let n = student.param_count();
        let state = TrainState {
            header: StateHeader {
                version: FORMAT_VERSION,
                stage: 1,
                epochs_done: 7,
                model: cfg,
                pooling: student.pooling.clone(),
                records: vec![record(6)],
                param_count: n,
                adam_steps: 321,
            },
            student,
            teacher,
            adam_m: (0..n).map(|i| i as f64 * 0.01).collect(),
            adam_v: (0..n).map(|i| i as f64 * 0.02).collect(),
        };
        let path = dir.path().join("state.bin");
        save_state(&path, &state).unwrap();
        let back = load_state(&path).unwrap();
        assert_eq!(back.student, state.student);
        assert_eq!(back.teacher, state.teacher);
        assert_eq!(back.adam_m, state.adam_m);
        assert_eq!(back.adam_v, state.adam_v);
        assert_eq!(back.header.epochs_done, 7);
        assert_eq!(back.header.adam_steps, 321);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTMAGIC\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(LabError::Data(_))));

        let (cfg, params) = tiny();
        let header = CheckpointHeader {
            version: FORMAT_VERSION,
            role: Role::Student,
            model: cfg,
            pooling: params.pooling.clone(),
            epochs: 0,
            losses: Vec::new(),
            param_count: params.param_count(),
        };
        let good = dir.path().join("good.ckpt");
        save_checkpoint(&good, &header, &params).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&good, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&good), Err(LabError::Data(_))));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint(&dir.path().join("absent.ckpt")).unwrap_err();
        assert!(matches!(err, LabError::Io { .. }));
        assert_eq!(err.exit_code(), 2);
    }
}
