//! Checkpoint persistence: a JSON manifest next to one raw little-endian blob.
//!
//! Manifest schema:
//!
//! ```json
//! {"model_name": "...", "step": 0, "data_file": "x.bin",
//!  "layers": [{"layer_id": "fc1.weight", "rows": 2, "cols": 3,
//!              "dtype": "f64", "byte_offset": 0, "byte_length": 48}],
//!  "metadata": {"train_acc": "0.98"}}
//! ```
//!
//! `data_file` is resolved relative to the manifest's directory. Tensors are
//! row-major. `f32` tensors are widened to `f64` on load; saving always
//! writes `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major layer weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    layer_id: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    source: String,
}

impl WeightMatrix {
    /// Builds a validated matrix: both dimensions positive, `data.len() ==
    /// rows * cols` and every entry finite.
    pub fn new(
        layer_id: impl Into<String>,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let layer_id = layer_id.into();
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!(
                "layer `{layer_id}` has empty shape {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "layer `{layer_id}`: {} entries for shape {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEntry { layer_id, index });
        }
        Ok(Self {
            layer_id,
            rows,
            cols,
            data,
            source: "memory".to_string(),
        })
    }

    pub fn from_fn(
        layer_id: impl Into<String>,
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(layer_id, rows, cols, data)
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Both sides at least 2, i.e. something spectral analysis can use.
    pub fn is_matrix(&self) -> bool {
        self.rows >= 2 && self.cols >= 2
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            layer_id: self.layer_id.clone(),
            rows: self.cols,
            cols: self.rows,
            data,
            source: self.source.clone(),
        }
    }

    /// Returns `scale * self`. Fails if the product overflows.
    pub fn scaled(&self, scale: f64) -> Result<Self> {
        let data = self.data.iter().map(|v| v * scale).collect();
        Ok(Self::new(self.layer_id.clone(), self.rows, self.cols, data)?
            .with_source(self.source.clone()))
    }

    /// Replaces the entries, keeping identity and shape.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Ok(Self::new(self.layer_id.clone(), self.rows, self.cols, data)?
            .with_source(self.source.clone()))
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer_id: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: Dtype,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model_name: String,
    pub step: u64,
    pub data_file: String,
    pub layers: Vec<LayerEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// A loaded checkpoint: the manifest plus every layer in manifest order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub layers: Vec<WeightMatrix>,
    pub path: PathBuf,
}

impl Checkpoint {
    pub fn layer(&self, layer_id: &str) -> Option<&WeightMatrix> {
        self.layers.iter().find(|l| l.layer_id() == layer_id)
    }
}

pub fn read_manifest(manifest_path: &Path) -> Result<CheckpointManifest> {
    let text =
        fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads every layer of a checkpoint, widening `f32` to `f64` and rejecting
/// non-finite entries.
pub fn load_checkpoint(manifest_path: impl AsRef<Path>) -> Result<Checkpoint> {
    let manifest_path = manifest_path.as_ref();
    let manifest = read_manifest(manifest_path)?;
    let malformed = |reason: String| Error::MalformedManifest {
        path: manifest_path.to_path_buf(),
        reason,
    };

    let data_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.data_file);
    let blob = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let file_len = blob.len() as u64;

    // Validate all ranges before decoding anything.
    let mut ranges = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        if entry.rows == 0 || entry.cols == 0 {
            return Err(malformed(format!(
                "layer `{}` has empty shape {}x{}",
                entry.layer_id, entry.rows, entry.cols
            )));
        }
        let bounds = |reason: String| Error::TensorBounds {
            layer_id: entry.layer_id.clone(),
            reason,
        };
        let expected = (entry.rows as u64)
            .checked_mul(entry.cols as u64)
            .and_then(|n| n.checked_mul(entry.dtype.size()))
            .ok_or_else(|| bounds("declared shape overflows".into()))?;
        if entry.byte_length == 0 || entry.byte_length != expected {
            return Err(bounds(format!(
                "byte_length {} does not match {}x{} {:?} ({} bytes)",
                entry.byte_length, entry.rows, entry.cols, entry.dtype, expected
            )));
        }
        let end = entry
            .byte_offset
            .checked_add(entry.byte_length)
            .ok_or_else(|| bounds("byte range overflows".into()))?;
        if end > file_len {
            return Err(bounds(format!(
                "bytes {}..{} exceed data file length {file_len}",
                entry.byte_offset, end
            )));
        }
        ranges.push((entry.byte_offset, end, entry.layer_id.as_str()));
    }
    ranges.sort_unstable();
    for pair in ranges.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(malformed(format!(
                "layers `{}` and `{}` overlap",
                pair[0].2, pair[1].2
            )));
        }
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut consumed = 0u64;
    for entry in &manifest.layers {
        let start = entry.byte_offset as usize;
        let bytes = &blob[start..start + entry.byte_length as usize];
        let data = decode(bytes, entry.dtype);
        consumed += entry.byte_length;
        let matrix = WeightMatrix::new(entry.layer_id.clone(), entry.rows, entry.cols, data)?
            .with_source(manifest_path.display().to_string());
        layers.push(matrix);
    }
    debug_assert_eq!(
        consumed,
        manifest.layers.iter().map(|l| l.byte_length).sum::<u64>()
    );

    Ok(Checkpoint {
        manifest,
        layers,
        path: manifest_path.to_path_buf(),
    })
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
            .collect(),
    }
}

/// Writes `layers` as an `f64` checkpoint. The blob goes next to the
/// manifest, named after it with a `.bin` extension.
pub fn save_checkpoint(
    manifest_path: impl AsRef<Path>,
    model_name: &str,
    step: u64,
    layers: &[WeightMatrix],
    metadata: &BTreeMap<String, String>,
) -> Result<CheckpointManifest> {
    let manifest_path = manifest_path.as_ref();
    let data_path = manifest_path.with_extension("bin");
    let data_file = data_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::MalformedManifest {
            path: manifest_path.to_path_buf(),
            reason: "manifest path has no file name".into(),
        })?;

    let total: usize = layers.iter().map(|l| l.data().len() * 8).sum();
    let mut blob = Vec::with_capacity(total);
    let mut entries = Vec::with_capacity(layers.len());
    for layer in layers {
        let byte_offset = blob.len() as u64;
        for v in layer.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(LayerEntry {
            layer_id: layer.layer_id().to_string(),
            rows: layer.rows(),
            cols: layer.cols(),
            dtype: Dtype::F64,
            byte_offset,
            byte_length: blob.len() as u64 - byte_offset,
        });
    }

    let manifest = CheckpointManifest {
        model_name: model_name.to_string(),
        step,
        data_file,
        layers: entries,
        metadata: metadata.clone(),
    };
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&data_path, &blob).map_err(|e| Error::io(&data_path, e))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(manifest_path, json + "\n").map_err(|e| Error::io(manifest_path, e))?;
    Ok(manifest)
}
