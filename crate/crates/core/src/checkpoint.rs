//! Parameter checkpoints: a `MKD1` header, a JSON manifest (model config and
//! per-tensor name/shape/dtype/offset), then raw little-endian f64 arrays.
//!
//! The manifest embeds an arbitrary model JSON value, so a checkpoint is
//! self-describing: loading needs nothing but the file.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Parameter;

pub const MAGIC: &[u8; 4] = b"MKD1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic (not an MKD1 checkpoint)")]
    BadMagic { path: String },
    #[error("{path}: manifest: {msg}")]
    Manifest { path: String, msg: String },
    #[error("{path}: tensor '{name}': {msg}")]
    Tensor {
        path: String,
        name: String,
        msg: String,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the data section.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    /// Model-specific config (encoder config, domain roster, vocab, ...).
    model: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Write named tensors with an embedded model description.
pub fn save(
    path: &Path,
    model: serde_json::Value,
    tensors: &[(&str, Vec<usize>, Vec<f64>)],
) -> Result<()> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: shape.clone(),
            dtype: "f64".into(),
            offset,
            len: data.len() as u64,
        });
        offset += (data.len() * 8) as u64;
    }
    let manifest = Manifest {
        format_version: 1,
        model,
        tensors: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&manifest_bytes).map_err(io_err)?;
    for (_, _, data) in tensors {
        for v in data {
            file.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    file.flush().map_err(io_err)?;
    Ok(())
}

/// Convenience wrapper over [`save`] for model parameters.
pub fn save_params(path: &Path, model: serde_json::Value, params: &[&Parameter]) -> Result<()> {
    let tensors: Vec<(&str, Vec<usize>, Vec<f64>)> = params
        .iter()
        .map(|p| (p.name.as_str(), p.tensor.shape().to_vec(), p.tensor.to_vec()))
        .collect();
    save(path, model, &tensors)
}

/// A loaded checkpoint: the embedded model JSON plus name -> (shape, data).
pub struct Loaded {
    pub model: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(io_err)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes).map_err(io_err)?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| CheckpointError::Manifest {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    let mut data_section = Vec::new();
    file.read_to_end(&mut data_section).map_err(io_err)?;
    let mut tensors = BTreeMap::new();
    for entry in manifest.tensors {
        if entry.dtype != "f64" {
            return Err(CheckpointError::Tensor {
                path: path.display().to_string(),
                name: entry.name,
                msg: format!("unsupported dtype {}", entry.dtype),
            });
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize * 8;
        if end > data_section.len() {
            return Err(CheckpointError::Tensor {
                path: path.display().to_string(),
                name: entry.name,
                msg: "data section truncated".into(),
            });
        }
        let numel: usize = entry.shape.iter().product();
        if numel != entry.len as usize {
            return Err(CheckpointError::Tensor {
                path: path.display().to_string(),
                name: entry.name,
                msg: format!("shape {:?} does not match {} elements", entry.shape, entry.len),
            });
        }
        let data: Vec<f64> = data_section[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(entry.name, (entry.shape, data));
    }
    Ok(Loaded {
        model: manifest.model,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bytes_and_model_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mkd");
        let model = serde_json::json!({"kind": "test", "domains": ["a", "b"]});
        let tensors = vec![
            ("w", vec![2, 2], vec![1.0, -0.5, 3.25, f64::MIN_POSITIVE]),
            ("b", vec![3], vec![0.0, 1e-300, -1e300]),
        ];
        save(&path, model.clone(), &tensors).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.model, model);
        assert_eq!(loaded.tensors["w"].0, vec![2, 2]);
        assert_eq!(loaded.tensors["w"].1, tensors[0].2);
        assert_eq!(loaded.tensors["b"].1, tensors[1].2);
    }

    #[test]
    fn header_starts_with_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mkd");
        save(&path, serde_json::json!({}), &[]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MKD1");
    }

    #[test]
    fn rejects_non_checkpoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic { .. })));
    }
}
