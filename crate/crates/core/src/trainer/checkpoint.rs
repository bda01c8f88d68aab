//! Checkpoint directories: `manifest.json` plus little-endian `f64` parameter blobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MetricRecord, TrainConfig, TrainState};
use crate::error::{PccsError, Result};
use crate::model::Network;
use crate::optim::Sgd;
use crate::protobank::TeacherPrototypeSet;

const BLOBS: [&str; 3] = ["student.bin", "teacher.bin", "momentum.bin"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: TrainConfig,
    pub config_hash: String,
    pub step: u64,
    pub history: Vec<MetricRecord>,
    pub prototypes: TeacherPrototypeSet,
    /// SHA-256 of each blob, keyed by file name.
    pub blob_hashes: Vec<(String, String)>,
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(PccsError::Checkpoint(
            "blob length is not a multiple of 8".into(),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes `state` into `dir`, replacing any previous checkpoint there.
pub fn save(dir: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let blobs = [
        state.student.flat_params(),
        state.teacher.flat_params(),
        state.optimizer.velocity.clone(),
    ];
    let mut blob_hashes = Vec::new();
    for (name, values) in BLOBS.iter().zip(&blobs) {
        let bytes = to_bytes(values);
        blob_hashes.push((name.to_string(), hex::encode(Sha256::digest(&bytes))));
        fs::write(dir.join(name), bytes)?;
    }
    let manifest = CheckpointManifest {
        config: config.clone(),
        config_hash: config.hash(),
        step: state.step,
        history: state.history.clone(),
        prototypes: state.protos.clone(),
        blob_hashes,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Reads the manifest only.
pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| PccsError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PccsError::Checkpoint(format!("bad manifest: {e}")))
}

/// Loads a checkpoint written with the stored configuration, ignoring `expected`.
pub fn load_any(dir: &Path) -> Result<(TrainConfig, TrainState)> {
    let manifest = read_manifest(dir)?;
    let state = load_state(dir, &manifest)?;
    Ok((manifest.config, state))
}

/// Loads a checkpoint to resume `expected`; the configuration hashes must agree.
pub fn load(dir: &Path, expected: &TrainConfig) -> Result<TrainState> {
    let manifest = read_manifest(dir)?;
    if manifest.config_hash != expected.hash() {
        return Err(PccsError::Checkpoint(format!(
            "configuration hash mismatch: checkpoint {} vs current {}",
            manifest.config_hash,
            expected.hash()
        )));
    }
    load_state(dir, &manifest)
}

fn load_state(dir: &Path, manifest: &CheckpointManifest) -> Result<TrainState> {
    if manifest.config.hash() != manifest.config_hash {
        return Err(PccsError::Checkpoint(
            "manifest config does not match its hash".into(),
        ));
    }
    let mut values = Vec::new();
    for name in BLOBS {
        let bytes = fs::read(dir.join(name))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        let expected = manifest
            .blob_hashes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, h)| h);
        if expected != Some(&digest) {
            return Err(PccsError::Checkpoint(format!(
                "{name} is corrupt or missing from the manifest"
            )));
        }
        values.push(from_bytes(&bytes)?);
    }
    let cfg = &manifest.config;
    let mut student = Network::zeros(cfg.net.clone());
    student.set_flat_params(&values[0])?;
    let mut teacher = Network::zeros(cfg.net.clone());
    teacher.set_flat_params(&values[1])?;
    let mut optimizer = Sgd::new(&student, cfg.momentum, cfg.weight_decay);
    if values[2].len() != optimizer.velocity.len() {
        return Err(PccsError::Checkpoint(
            "optimizer state has the wrong size".into(),
        ));
    }
    optimizer.velocity = values[2].clone();
    Ok(TrainState {
        step: manifest.step,
        student,
        teacher,
        optimizer,
        protos: manifest.prototypes.clone(),
        history: manifest.history.clone(),
    })
}
