//! Weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   magic   b"TBWT"
//! offset 4   u32     container version (1)
//! offset 8   u64     header length H in bytes
//! offset 16  H bytes UTF-8 JSON header:
//!            {"config": ModelConfig, "tokenizer_id": str,
//!             "tensors": [{"name", "shape", "dtype": "f32", "offset", "len"}]}
//! 16 + H     payload: every tensor's f32 values, row-major, back to back
//! ```
//!
//! Tensor offsets and lengths count f32 elements from the start of the
//! payload. The tokenizer table lives next to the weights in `<path>.vocab` (see
//! [`Tokenizer::to_sidecar`]).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelBundle, ModelConfig, ModelError, Params, Tokenizer};

const MAGIC: &[u8; 4] = b"TBWT";
const VERSION: u32 = 1;
const PREAMBLE: u64 = 16;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tokenizer_id: String,
    tensors: Vec<TensorEntry>,
}

pub fn tokenizer_sidecar_path(weights: &Path) -> PathBuf {
    let mut name = weights.as_os_str().to_owned();
    name.push(".vocab");
    PathBuf::from(name)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn encode(bundle: &ModelBundle) -> Vec<u8> {
    let tensors = bundle.params().tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, shape, values) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f32".into(),
            offset: (payload.len() / 4) as u64,
            len: values.len() as u64,
        });
        for &v in values {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = Header {
        config: bundle.config().clone(),
        tokenizer_id: bundle.tokenizer().id(),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE as usize + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ModelError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

/// Writes the container and its tokenizer sidecar. Both files are replaced
/// atomically.
pub fn save_weights(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    write_atomic(
        &tokenizer_sidecar_path(path),
        bundle.tokenizer().to_sidecar().as_bytes(),
    )?;
    write_atomic(path, &encode(bundle))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelBundle, ModelError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let sidecar = tokenizer_sidecar_path(path);
    let table = fs::read_to_string(&sidecar).map_err(io_err(&sidecar))?;
    let tokenizer = Tokenizer::from_sidecar(&table)?;
    decode(&bytes, tokenizer)
}

fn format_err(offset: u64, message: impl Into<String>) -> ModelError {
    ModelError::Format {
        offset,
        message: message.into(),
    }
}

fn decode(bytes: &[u8], tokenizer: Tokenizer) -> Result<ModelBundle, ModelError> {
    if bytes.len() < PREAMBLE as usize {
        return Err(format_err(bytes.len() as u64, "file shorter than preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(
            4,
            format!("unsupported container version {version}"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload_start = PREAMBLE
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            format_err(
                8,
                format!("header length {header_len} runs past end of file"),
            )
        })?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE as usize..payload_start as usize])
        .map_err(|e| format_err(PREAMBLE, format!("header is not valid JSON: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| format_err(PREAMBLE, e.to_string()))?;
    if header.tokenizer_id != tokenizer.id() {
        return Err(format_err(
            PREAMBLE,
            format!(
                "tokenizer sidecar {} does not match header {}",
                tokenizer.id(),
                header.tokenizer_id
            ),
        ));
    }

    let layout = Params::layout(&header.config);
    if layout.len() != header.tensors.len() {
        return Err(format_err(
            PREAMBLE,
            format!(
                "header lists {} tensors, config {} expects {}",
                header.tensors.len(),
                header.config.norm_kind,
                layout.len()
            ),
        ));
    }
    let payload = &bytes[payload_start as usize..];
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), entry) in layout.iter().zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape || entry.dtype != "f32" {
            return Err(format_err(
                PREAMBLE,
                format!(
                    "tensor {} {:?} {} does not match expected {name} {shape:?} f32",
                    entry.name, entry.shape, entry.dtype
                ),
            ));
        }
        let numel: u64 = shape.iter().map(|&d| d as u64).product();
        if entry.len != numel || entry.offset != expected_offset {
            return Err(format_err(
                PREAMBLE,
                format!("tensor {name} has inconsistent offset/len"),
            ));
        }
        let start = entry.offset * 4;
        let end = start + numel * 4;
        if end > payload.len() as u64 {
            return Err(format_err(
                payload_start + payload.len() as u64,
                format!(
                    "truncated payload: tensor {name} needs bytes up to {}",
                    payload_start + end
                ),
            ));
        }
        let values = payload[start as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push(values);
        expected_offset += numel;
    }
    if expected_offset * 4 != payload.len() as u64 {
        return Err(format_err(
            payload_start + expected_offset * 4,
            "trailing bytes after last tensor",
        ));
    }
    let params = Params::from_tensors(&header.config, tensors);
    Ok(ModelBundle::from_parts(header.config, tokenizer, params))
}
