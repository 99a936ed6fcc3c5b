//! Checkpoint container: a human-readable JSON manifest followed by a flat
//! little-endian payload, tensors in manifest order. Round trips are
//! bitwise lossless.
//!
//! ```text
//! LORALAB-CHECKPOINT v1\n
//! manifest-bytes: <N>\n
//! <N bytes of JSON manifest>\n
//! <payload>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdaptedModel, AdapterPlacement, ModelConfig};
use crate::tensor::{Dtype, Element, Tensor};
use crate::train::Precision;

const MAGIC: &str = "LORALAB-CHECKPOINT v1";
pub const FORMAT_VERSION: u32 = 1;

/// Where one tensor lives in the payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: usize,
    pub byte_len: usize,
}

/// Outcome of the forward-pass equivalence check recorded by a merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeVerification {
    pub inputs: usize,
    pub max_logit_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Everything needed to rebuild the model and reload its tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub placement: AdapterPlacement,
    pub seed: u64,
    pub precision: Precision,
    pub merged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_verification: Option<MergeVerification>,
    pub tensors: Vec<TensorEntry>,
}

/// Serialize the model. A merged model is written with its `lora_targets`
/// cleared, so loading rebuilds no adapters and the merged base weights
/// stand alone; `merged: true` records the provenance.
pub fn save_checkpoint<E: Element>(path: &Path, model: &AdaptedModel<E>) -> Result<Manifest> {
    save_checkpoint_with(path, model, None)
}

/// [`save_checkpoint`] plus a merge-verification record for the manifest.
pub fn save_checkpoint_with<E: Element>(
    path: &Path,
    model: &AdaptedModel<E>,
    merge_verification: Option<MergeVerification>,
) -> Result<Manifest> {
    let merged = model.is_merged();
    let mut placement = model.placement().clone();
    if merged {
        placement.lora_targets.clear();
    }

    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for entry in model.named_tensors() {
        let offset = payload.len();
        entry.tensor.with_data(|data| {
            for &v in data {
                v.write_le(&mut payload);
            }
        });
        tensors.push(TensorEntry {
            name: entry.name,
            shape: entry.tensor.shape().to_vec(),
            dtype: E::DTYPE,
            offset,
            byte_len: payload.len() - offset,
        });
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        placement,
        seed: model.seed(),
        precision: match E::DTYPE {
            Dtype::F32 => Precision::Single,
            Dtype::F64 => Precision::Double,
        },
        merged,
        merge_verification,
        tensors,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, assemble(&manifest_json, &payload))?;
    Ok(manifest)
}

fn assemble(manifest_json: &str, payload: &[u8]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(manifest_json.len() + payload.len() + 64);
    bytes.extend_from_slice(MAGIC.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(format!("manifest-bytes: {}\n", manifest_json.len()).as_bytes());
    bytes.extend_from_slice(manifest_json.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(payload);
    bytes
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), detail.into()))
}

fn split_container(path: &Path, bytes: &[u8]) -> Result<(Manifest, Vec<u8>)> {
    let take_line = |from: usize| -> Result<(usize, usize)> {
        bytes[from..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| (from, from + i))
            .ok_or_else(|| corrupt(path, "header line missing"))
    };
    let (m0, m1) = take_line(0)?;
    if &bytes[m0..m1] != MAGIC.as_bytes() {
        return Err(corrupt(path, format!("bad magic; expected `{MAGIC}`")));
    }
    let (h0, h1) = take_line(m1 + 1)?;
    let header = std::str::from_utf8(&bytes[h0..h1])
        .map_err(|_| corrupt(path, "manifest-bytes header is not UTF-8"))?;
    let manifest_len: usize = header
        .strip_prefix("manifest-bytes: ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| corrupt(path, format!("bad manifest-bytes header `{header}`")))?;

    let manifest_start = h1 + 1;
    let manifest_end = manifest_start + manifest_len;
    if manifest_end + 1 > bytes.len() {
        return Err(corrupt(path, "file shorter than declared manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[manifest_start..manifest_end])
        .map_err(|e| corrupt(path, format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(
            path,
            format!("format version {} unsupported (expected {FORMAT_VERSION})", manifest.format_version),
        ));
    }
    if bytes[manifest_end] != b'\n' {
        return Err(corrupt(path, "missing separator after manifest"));
    }
    Ok((manifest, bytes[manifest_end + 1..].to_vec()))
}

/// Read only the manifest, leaving the payload on disk.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path)?;
    Ok(split_container(path, &bytes)?.0)
}

/// Rebuild the model named by the manifest and reload every tensor bitwise.
/// The element type must match the stored precision.
pub fn load_checkpoint<E: Element>(path: &Path) -> Result<(AdaptedModel<E>, Manifest)> {
    let bytes = std::fs::read(path)?;
    let (manifest, payload) = split_container(path, &bytes)?;
    if manifest.precision.dtype() != E::DTYPE {
        return Err(corrupt(
            path,
            format!("stored precision is {}, requested {}", manifest.precision.dtype(), E::DTYPE),
        ));
    }

    let model = AdaptedModel::<E>::build(&manifest.config, &manifest.placement, manifest.seed)?;
    let by_name: BTreeMap<String, Tensor<E>> =
        model.named_tensors().into_iter().map(|p| (p.name, p.tensor)).collect();
    if by_name.len() != manifest.tensors.len() {
        return Err(corrupt(
            path,
            format!(
                "manifest lists {} tensors but the rebuilt model has {}",
                manifest.tensors.len(),
                by_name.len()
            ),
        ));
    }

    let mut expected_end = 0usize;
    for entry in &manifest.tensors {
        let tensor = by_name
            .get(&entry.name)
            .ok_or_else(|| corrupt(path, format!("manifest tensor `{}` not in model", entry.name)))?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(corrupt(
                path,
                format!(
                    "tensor `{}` shape mismatch: manifest {:?}, model {:?}",
                    entry.name,
                    entry.shape,
                    tensor.shape()
                ),
            ));
        }
        if entry.dtype != E::DTYPE {
            return Err(corrupt(path, format!("tensor `{}` dtype {}", entry.name, entry.dtype)));
        }
        let width = entry.dtype.size_bytes();
        if entry.byte_len != tensor.numel() * width {
            return Err(corrupt(
                path,
                format!(
                    "tensor `{}` spans {} bytes but shape {:?} needs {}",
                    entry.name,
                    entry.byte_len,
                    entry.shape,
                    tensor.numel() * width
                ),
            ));
        }
        let end = entry.offset + entry.byte_len;
        if end > payload.len() {
            return Err(corrupt(path, format!("tensor `{}` extends past the payload", entry.name)));
        }
        expected_end = expected_end.max(end);

        let values: Vec<E> = payload[entry.offset..end]
            .chunks_exact(width)
            .map(E::read_le)
            .collect();
        tensor.set_data(&values)?;
    }
    if expected_end != payload.len() {
        return Err(corrupt(
            path,
            format!("payload holds {} bytes, manifest accounts for {expected_end}", payload.len()),
        ));
    }
    Ok((model, manifest))
}
