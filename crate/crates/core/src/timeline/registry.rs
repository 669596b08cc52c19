//! On-disk layout of a run: per-step checkpoints and galleries, indexed by a
//! manifest that records every file's SHA-256.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::{read_verified, sha256_hex, FeatureGallery};
use crate::netcore::{FeatureModel, LinearHead};
use crate::polytope::FixedClassifier;

use super::Method;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const EVAL_ROLE: &str = "eval";

pub fn step_dir_name(step: usize) -> String {
    format!("step-{step:02}")
}

/// A file written by the run, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTraining {
    pub samples: usize,
    pub classes: usize,
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// 1-based epoch kept by model selection, if it ran at this step.
    pub selected_epoch: Option<usize>,
    pub constraint_unsatisfied: bool,
}

/// Everything needed to rebuild one step's model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub method: Method,
    pub model: FeatureModel,
    /// The fixed classifier (CoReS).
    pub classifier: Option<FixedClassifier>,
    /// The learned head (baselines).
    pub head: Option<LinearHead>,
    /// Class id for each allocated output, in output order.
    pub output_classes: Vec<u32>,
    pub training: StepTraining,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub classes: usize,
    pub samples: usize,
    pub model_seed: u64,
    pub checkpoint: FileRecord,
    pub galleries: BTreeMap<String, FileRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command_line: Vec<String>,
    pub method: Method,
    pub seed: u64,
    /// Caller-supplied settings (fractions, data digest, preset digest, …).
    pub settings: BTreeMap<String, serde_json::Value>,
    pub eval_classes: Vec<u32>,
    pub eval_samples: usize,
    pub steps: Vec<StepRecord>,
}

/// Writes `bytes` to a file that must not exist yet; returns its SHA-256.
pub(crate) fn write_new_file(path: &Path, bytes: &[u8]) -> Result<String> {
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(bytes))
}

/// The checkpoints and galleries of a completed run.
#[derive(Debug, Clone)]
pub struct ModelRegistry {
    root: PathBuf,
    manifest: RunManifest,
    manifest_digest: String,
}

impl ModelRegistry {
    pub fn open(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: RunManifest = serde_json::from_slice(&bytes)?;
        for (i, s) in manifest.steps.iter().enumerate() {
            if s.step != i + 1 {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    offset: 0,
                    message: format!("step indices are not contiguous at position {}", i + 1),
                });
            }
        }
        if manifest.steps.is_empty() {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: 0,
                message: "manifest lists no steps".into(),
            });
        }
        Ok(ModelRegistry {
            root: run_dir.to_path_buf(),
            manifest,
            manifest_digest: sha256_hex(&bytes),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn steps(&self) -> usize {
        self.manifest.steps.len()
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn manifest_digest(&self) -> &str {
        &self.manifest_digest
    }

    fn step_record(&self, step: usize) -> Result<&StepRecord> {
        step.checked_sub(1)
            .and_then(|i| self.manifest.steps.get(i))
            .ok_or_else(|| Error::invalid(format!("run has no step {step}")))
    }

    /// Loads a stored gallery after checking it against the manifest digest.
    pub fn load_gallery(&self, step: usize, role: &str) -> Result<FeatureGallery> {
        let rec = self.step_record(step)?;
        let file = rec.galleries.get(role).ok_or_else(|| Error::MissingGallery {
            step,
            path: self.root.join(step_dir_name(step)).join(format!("{role}.gallery")),
        })?;
        let path = self.root.join(&file.path);
        if !path.exists() {
            return Err(Error::MissingGallery { step, path });
        }
        let bytes = read_verified(&path, &file.sha256)?;
        FeatureGallery::from_bytes(&bytes, step_dir_name(step), &path.display().to_string())
    }

    pub fn load_checkpoint(&self, step: usize) -> Result<Checkpoint> {
        let rec = self.step_record(step)?;
        let path = self.root.join(&rec.checkpoint.path);
        let bytes = read_verified(&path, &rec.checkpoint.sha256)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Recomputes every recorded digest; returns the first mismatch.
    pub fn verify_all(&self) -> Result<()> {
        for rec in &self.manifest.steps {
            read_verified(&self.root.join(&rec.checkpoint.path), &rec.checkpoint.sha256)?;
            for file in rec.galleries.values() {
                read_verified(&self.root.join(&file.path), &file.sha256)?;
            }
        }
        Ok(())
    }
}

/// Refuses to touch a completed run unless `force`; with `force`, removes
/// only the entries a run writes (step directories and the manifest).
pub(crate) fn prepare_run_dir(out_dir: &Path, force: bool) -> Result<()> {
    let manifest = out_dir.join(MANIFEST_FILE);
    if manifest.exists() && !force {
        return Err(Error::AlreadyComplete(out_dir.to_path_buf()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = std::fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(out_dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let path = entry.path();
        if name.starts_with("step-") && path.is_dir() {
            std::fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        } else if name == MANIFEST_FILE {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}
