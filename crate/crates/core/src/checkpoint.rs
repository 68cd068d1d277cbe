//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json        model config, base vocabulary, tensor table,
//!                            feature-file hashes, stored metrics
//! <dir>/tensors/<name>.kgtf  one file per parameter tensor
//! ```
//!
//! Tensors use the KGTF header with version 2 and `f64` payload, so a round
//! trip is bit-exact. The frozen base scoring matrices are not copied; they
//! are rebuilt from the referenced feature files, whose SHA-256 must match.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::Vocabulary;
use crate::error::{KgtError, Result};
use crate::evaluator::RankSummary;
use crate::feature_bank::{
    file_sha256, sha256_hex, write_atomic, FeatureBank, ENTITY_STRUCT_FILE, ENTITY_TEXT_FILE, KGTF_HEADER_LEN,
    KGTF_MAGIC, RELATION_STRUCT_FILE, RELATION_TEXT_FILE,
};
use crate::model::{KgtModel, ModelConfig};

pub const TENSOR_VERSION: u32 = 2;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_DIR: &str = "tensors";
const FORMAT: u32 = 1;

pub fn tensor_to_bytes(a: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(KGTF_HEADER_LEN + 8 * a.len());
    out.extend_from_slice(KGTF_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
    for v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < KGTF_HEADER_LEN || &bytes[0..4] != KGTF_MAGIC {
        return Err(KgtError::Format("not a KGTF tensor".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(KgtError::Format(format!("tensor version {version}, expected {TENSOR_VERSION}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let payload = &bytes[KGTF_HEADER_LEN..];
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(8)) != Some(payload.len()) {
        return Err(KgtError::Format(format!(
            "tensor payload is {} bytes for shape {rows}x{cols}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| KgtError::Format(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRef {
    pub dir: PathBuf,
    /// File name to SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub epoch: usize,
    pub model: ModelConfig,
    pub base_tokens: Vec<String>,
    pub num_entities: usize,
    pub num_relations: usize,
    pub features: FeatureRef,
    pub tensors: Vec<TensorEntry>,
    pub metrics: Option<RankSummary>,
}

const FEATURE_FILES: [&str; 4] = [ENTITY_TEXT_FILE, ENTITY_STRUCT_FILE, RELATION_TEXT_FILE, RELATION_STRUCT_FILE];

fn tensor_file(name: &str) -> String {
    format!("{TENSOR_DIR}/{name}.kgtf")
}

/// Writes `model` into `dir`, referencing the feature files in
/// `features_dir`.
pub fn save_checkpoint(
    model: &KgtModel,
    dir: &Path,
    features_dir: &Path,
    epoch: usize,
    metrics: Option<RankSummary>,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir.join(TENSOR_DIR))?;
    let mut files = BTreeMap::new();
    for f in FEATURE_FILES {
        files.insert(f.to_string(), file_sha256(&features_dir.join(f))?);
    }
    let skip = base_params(model);
    let mut tensors = Vec::new();
    for (id, p) in model.store.iter() {
        if skip.contains(&p.name) {
            continue;
        }
        let bytes = tensor_to_bytes(&p.value);
        let file = tensor_file(&p.name);
        write_atomic(&dir.join(&file), &bytes)?;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            file,
            rows: p.value.nrows(),
            cols: p.value.ncols(),
            trainable: model.store.is_trainable(id),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT,
        epoch,
        model: model.config.clone(),
        base_tokens: model.vocab.base_tokens().to_vec(),
        num_entities: model.features.num_entities(),
        num_relations: model.features.num_relations(),
        features: FeatureRef {
            dir: fs::canonicalize(features_dir)?,
            files,
        },
        tensors,
        metrics,
    };
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Names of the frozen base scoring matrices (present even for dropped
/// views).
fn base_params(model: &KgtModel) -> Vec<String> {
    model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("predictor.") && p.name.ends_with("_scorer.base"))
        .map(|(_, p)| p.name.clone())
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(KgtError::Checkpoint(format!("{} is missing", path.display())));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Rebuilds the model saved in `dir`. `features_dir` overrides the feature
/// location recorded in the manifest; hashes are checked either way.
pub fn load_checkpoint(dir: &Path, features_dir: Option<&Path>) -> Result<(KgtModel, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.format != FORMAT {
        return Err(KgtError::Checkpoint(format!("unsupported checkpoint format {}", manifest.format)));
    }
    let fdir = features_dir.unwrap_or(&manifest.features.dir);
    for (file, sha) in &manifest.features.files {
        let got = file_sha256(&fdir.join(file))?;
        if &got != sha {
            return Err(KgtError::Checkpoint(format!(
                "feature file {} does not match the checkpoint (sha256 {got}, expected {sha})",
                fdir.join(file).display()
            )));
        }
    }
    let bank = FeatureBank::load_dir(fdir)?;
    let vocab = Vocabulary::from_parts(manifest.base_tokens.clone(), manifest.num_entities, manifest.num_relations)?;
    let mut model = KgtModel::from_parts(manifest.model.clone(), vocab, &bank, 0)?;
    let expected: Vec<String> = {
        let skip = base_params(&model);
        model
            .store
            .iter()
            .map(|(_, p)| p.name.clone())
            .filter(|n| !skip.contains(n))
            .collect()
    };
    if expected.len() != manifest.tensors.len() {
        return Err(KgtError::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for t in &manifest.tensors {
        let id = model
            .store
            .id(&t.name)
            .ok_or_else(|| KgtError::Checkpoint(format!("unknown tensor `{}`", t.name)))?;
        let bytes = fs::read(dir.join(&t.file))?;
        if sha256_hex(&bytes) != t.sha256 {
            return Err(KgtError::Checkpoint(format!("tensor file {} is corrupted", t.file)));
        }
        let value = tensor_from_bytes(&bytes)?;
        let slot = model.store.get_mut(id);
        if slot.dim() != value.dim() {
            return Err(KgtError::Checkpoint(format!(
                "tensor `{}` has shape {:?}, model expects {:?}",
                t.name,
                value.dim(),
                slot.dim()
            )));
        }
        *slot = value;
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tensor_round_trip_is_bit_exact(rows in 0usize..5, cols in 0usize..5, seed in any::<u64>()) {
            let mut x = seed;
            let a = Array2::from_shape_fn((rows, cols), |_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits((x >> 2) | 0x3000_0000_0000_0000)
            });
            let b = tensor_from_bytes(&tensor_to_bytes(&a)).unwrap();
            prop_assert_eq!(a.shape(), b.shape());
            for (u, v) in a.iter().zip(b.iter()) {
                prop_assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn rejects_feature_version_and_truncation() {
        let a = Array2::from_elem((2, 2), 1.5);
        let mut bytes = tensor_to_bytes(&a);
        assert_eq!(bytes.len(), 24 + 32);
        bytes.pop();
        assert!(tensor_from_bytes(&bytes).is_err());
        bytes = tensor_to_bytes(&a);
        bytes[4] = 1;
        assert!(tensor_from_bytes(&bytes).is_err());
    }
}
