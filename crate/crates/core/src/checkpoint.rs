//! Model checkpoints: a one-line JSON manifest followed by a raw parameter blob.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Float, Tensor};
use crate::encoder::TextEncoderSpec;
use crate::model::{BasisTransformer, ModelConfig, ModelError};

const FORMAT: &str = "basis-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
    #[error("checkpoint blob: {0}")]
    Blob(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// `"f32"` or `"f64"`; the blob stores little-endian values of this type.
    pub dtype: String,
    pub model: ModelConfig,
    pub text: TextEncoderSpec,
    pub tensors: Vec<TensorEntry>,
    /// Free-form training metadata (step, validation score, seed).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save<T: Float>(model: &BasisTransformer<T>, meta: serde_json::Value, path: &Path) -> Result<(), CheckpointError> {
    let mut offset = 0;
    let tensors = model
        .params
        .iter()
        .map(|(_, p)| {
            let e = TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset };
            offset += p.value.len();
            e
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: T::DTYPE.into(),
        model: model.config.clone(),
        text: model.text.clone(),
        tensors,
        meta,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        writeln!(w, "{}", serde_json::to_string(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?)?;
        for (_, p) in model.params.iter() {
            for v in p.value.data() {
                v.write_le(&mut w)?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CheckpointError> {
    let mut reader = BufReader::new(File::open(path)?);
    parse_manifest(&mut reader)
}

fn parse_manifest(reader: &mut impl BufRead) -> Result<Manifest, CheckpointError> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let m: Manifest = serde_json::from_str(line.trim_end()).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(CheckpointError::Manifest(format!("unsupported format {} v{}", m.format, m.version)));
    }
    Ok(m)
}

/// Rebuilds the model described by the manifest and fills in stored values.
/// Values are converted if the stored precision differs from `T`.
pub fn load<T: Float>(path: &Path) -> Result<(BasisTransformer<T>, Manifest), CheckpointError> {
    let mut reader = BufReader::new(File::open(path)?);
    let manifest = parse_manifest(&mut reader)?;
    let mut blob = Vec::new();
    reader.read_to_end(&mut blob)?;
    let values: Vec<f64> = match manifest.dtype.as_str() {
        "f32" => blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        "f64" => blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        other => return Err(CheckpointError::Manifest(format!("unknown dtype {other}"))),
    };
    let width = if manifest.dtype == "f32" { 4 } else { 8 };
    if blob.len() % width != 0 {
        return Err(CheckpointError::Blob(format!("{} bytes is not a whole number of {}", blob.len(), manifest.dtype)));
    }
    let mut model = BasisTransformer::<T>::new(&manifest.model, &manifest.text, 0)?;
    if model.params.len() != manifest.tensors.len() {
        return Err(CheckpointError::Blob(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            model.params.len()
        )));
    }
    let mut restored = Vec::with_capacity(manifest.tensors.len());
    for ((_, p), e) in model.params.iter().zip(&manifest.tensors) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(CheckpointError::Blob(format!("tensor {} {:?} does not match model {} {:?}", e.name, e.shape, p.name, p.value.shape())));
        }
        let n = p.value.len();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| CheckpointError::Blob(format!("tensor {} runs past the end of the blob", e.name)))?;
        let data = slice.iter().map(|&v| T::from_f64_lossy(v)).collect();
        restored.push(Tensor::new(e.shape.clone(), data).map_err(ModelError::from)?);
    }
    model.params.restore(&restored).map_err(ModelError::from)?;
    Ok((model, manifest))
}
