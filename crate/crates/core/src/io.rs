//! Model directory format: `manifest.json` describing dimensions and a
//! tensor table, plus `tensors.bin` holding row-major little-endian f32
//! payloads concatenated in manifest order. Values are widened to f64 on
//! load.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{LayerWeights, ModelBundle};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    s: usize,
    d: usize,
    d_ff: usize,
    n_layers: usize,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

/// Save a model directory, optionally attaching free-form metadata to the
/// manifest (attack provenance, generation flags).
pub fn save_model_with_meta(
    model: &ModelBundle,
    dir: &Path,
    meta: Option<serde_json::Value>,
) -> Result<()> {
    model.validate()?;
    fs::create_dir_all(dir)?;

    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in model.tensors() {
        entries.push(TensorEntry {
            name,
            rows: tensor.rows(),
            cols: tensor.cols(),
            offset: payload.len() as u64,
        });
        for &v in tensor.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        s: model.s,
        d: model.d,
        d_ff: model.d_ff,
        n_layers: model.n_layers,
        tensors: entries,
        meta,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::FormatError(format!("manifest serialization failed: {e}")))?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(TENSORS_FILE), payload)?;
    Ok(())
}

pub fn save_model(model: &ModelBundle, dir: &Path) -> Result<()> {
    save_model_with_meta(model, dir, None)
}

/// Metadata attached to a saved model, if any.
pub fn load_meta(dir: &Path) -> Result<Option<serde_json::Value>> {
    let manifest = read_manifest(dir)?;
    Ok(manifest.meta)
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let raw = fs::read(dir.join(MANIFEST_FILE))?;
    serde_json::from_slice(&raw)
        .map_err(|e| Error::FormatError(format!("bad manifest in {}: {e}", dir.display())))
}

pub fn load_model(dir: &Path) -> Result<ModelBundle> {
    let manifest = read_manifest(dir)?;
    let payload = fs::read(dir.join(TENSORS_FILE))?;

    // The tensor table must be exactly the canonical set for the declared
    // dims, offsets must tile the payload in order, and every value must be
    // finite.
    let expected = expected_tensors(manifest.s, manifest.d, manifest.d_ff, manifest.n_layers);
    if manifest.tensors.len() != expected.len() {
        return Err(Error::FormatError(format!(
            "manifest lists {} tensors, expected {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut running_offset = 0u64;
    let mut read = std::collections::HashMap::new();
    for entry in &manifest.tensors {
        let (rows, cols) = expected
            .iter()
            .find(|(name, _, _)| *name == entry.name)
            .map(|(_, r, c)| (*r, *c))
            .ok_or_else(|| Error::FormatError(format!("unexpected tensor {}", entry.name)))?;
        if entry.rows != rows || entry.cols != cols {
            return Err(Error::FormatError(format!(
                "tensor {} declared {}x{}, expected {}x{}",
                entry.name, entry.rows, entry.cols, rows, cols
            )));
        }
        if entry.offset != running_offset {
            return Err(Error::FormatError(format!(
                "tensor {} offset {} does not match running offset {}",
                entry.name, entry.offset, running_offset
            )));
        }
        let bytes = 4 * rows * cols;
        let start = entry.offset as usize;
        let end = start + bytes;
        if end > payload.len() {
            return Err(Error::FormatError(format!(
                "tensor {} is truncated: needs bytes up to {end}, file has {}",
                entry.name,
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in payload[start..end].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            if !v.is_finite() {
                return Err(Error::FormatError(format!(
                    "non-finite value in tensor {}",
                    entry.name
                )));
            }
            data.push(v);
        }
        read.insert(entry.name.clone(), Matrix::from_vec(rows, cols, data)?);
        running_offset = end as u64;
    }
    if running_offset as usize != payload.len() {
        return Err(Error::FormatError(format!(
            "payload has {} trailing bytes past the tensor table",
            payload.len() - running_offset as usize
        )));
    }
    for (name, _, _) in &expected {
        if !read.contains_key(name) {
            return Err(Error::FormatError(format!("missing tensor {name}")));
        }
    }

    let mut take = |name: &str| read.remove(name).expect("presence checked");
    let w_e = take("w_e");
    let mut layers = Vec::with_capacity(manifest.n_layers);
    for i in 0..manifest.n_layers {
        layers.push(LayerWeights {
            w_q: take(&format!("layers.{i}.w_q")),
            w_k: take(&format!("layers.{i}.w_k")),
            w_v: take(&format!("layers.{i}.w_v")),
            w_o: take(&format!("layers.{i}.w_o")),
            w_1: take(&format!("layers.{i}.w_1")),
            w_2: take(&format!("layers.{i}.w_2")),
            gamma1: take(&format!("layers.{i}.gamma1")),
            beta1: take(&format!("layers.{i}.beta1")),
            gamma2: take(&format!("layers.{i}.gamma2")),
            beta2: take(&format!("layers.{i}.beta2")),
        });
    }
    let w_c = take("w_c");
    let model = ModelBundle {
        s: manifest.s,
        d: manifest.d,
        d_ff: manifest.d_ff,
        n_layers: manifest.n_layers,
        w_e,
        layers,
        w_c,
    };
    model
        .validate()
        .map_err(|e| Error::FormatError(format!("inconsistent model file: {e}")))?;
    Ok(model)
}

fn expected_tensors(s: usize, d: usize, d_ff: usize, n_layers: usize) -> Vec<(String, usize, usize)> {
    let mut out = vec![("w_e".to_string(), s, d)];
    for i in 0..n_layers {
        out.push((format!("layers.{i}.w_q"), d, d));
        out.push((format!("layers.{i}.w_k"), d, d));
        out.push((format!("layers.{i}.w_v"), d, d));
        out.push((format!("layers.{i}.w_o"), d, d));
        out.push((format!("layers.{i}.w_1"), d, d_ff));
        out.push((format!("layers.{i}.w_2"), d_ff, d));
        out.push((format!("layers.{i}.gamma1"), 1, d));
        out.push((format!("layers.{i}.beta1"), 1, d));
        out.push((format!("layers.{i}.gamma2"), 1, d));
        out.push((format!("layers.{i}.beta2"), 1, d));
    }
    out.push(("w_c".to_string(), d, s));
    out
}
