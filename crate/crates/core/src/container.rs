//! `.eem` model container.
//!
//! ```text
//! "EEMODEL1" | header_len: u32 LE | header: UTF-8 JSON | payload
//! ```
//!
//! The header carries the config, the domain tag and a tensor directory
//! (name, shape, byte offset into the payload, byte length, CRC32). Payloads
//! are row-major little-endian f64, concatenated in directory order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EeError, Result};
use crate::model::{Domain, ModelBundle, ModelConfig, Weights};
use crate::tensor::Tensor2;

pub const MODEL_MAGIC: &[u8; 8] = b"EEMODEL1";
const PREFIX_LEN: usize = 12;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    domain: Domain,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    length: usize,
    crc32: u32,
}

pub fn encode_model(model: &ModelBundle) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.weights().named() {
        let offset = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let bytes = &payload[offset..];
        tensors.push(TensorEntry {
            name,
            shape: [t.rows(), t.cols()],
            offset,
            length: bytes.len(),
            crc32: crc32fast::hash(bytes),
        });
    }
    let header = Header {
        config: model.config().clone(),
        domain: model.domain(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

/// Read the magic and header-length prefix shared by the binary containers,
/// returning the header bytes and the offset where the body starts.
pub(crate) fn split_prefixed<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(&'a [u8], usize)> {
    if bytes.len() < PREFIX_LEN {
        return Err(EeError::format(
            bytes.len(),
            format!("file of {} bytes is shorter than the {PREFIX_LEN}-byte prefix", bytes.len()),
        ));
    }
    if &bytes[..8] != magic {
        return Err(EeError::format(0, "bad magic"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            EeError::format(8, format!("header length {header_len} runs past end of file"))
        })?;
    Ok((&bytes[PREFIX_LEN..end], end))
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelBundle> {
    let (header_bytes, body_start) = split_prefixed(bytes, MODEL_MAGIC)?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| EeError::format(PREFIX_LEN, format!("malformed header: {e}")))?;
    header.config.validate()?;
    let payload = &bytes[body_start..];
    let mut map = BTreeMap::new();
    let mut expected_offset = 0usize;
    for entry in &header.tensors {
        let [rows, cols] = entry.shape;
        if entry.offset != expected_offset {
            return Err(EeError::format(
                body_start + entry.offset,
                format!("tensor {} is not contiguous with its predecessor", entry.name),
            ));
        }
        let end = entry.offset + entry.length;
        if end > payload.len() {
            return Err(EeError::format(
                bytes.len(),
                format!(
                    "tensor {} needs bytes up to {}, file ends at {}",
                    entry.name,
                    body_start + end,
                    bytes.len()
                ),
            ));
        }
        if entry.length != rows * cols * 8 {
            return Err(EeError::Integrity(format!(
                "tensor {} declares {} bytes for shape {rows}x{cols}",
                entry.name, entry.length
            )));
        }
        let raw = &payload[entry.offset..end];
        if crc32fast::hash(raw) != entry.crc32 {
            return Err(EeError::Integrity(format!("CRC32 mismatch in tensor {}", entry.name)));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        map.insert(entry.name.clone(), Tensor2::new(rows, cols, data)?);
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(EeError::format(
            body_start + expected_offset,
            format!("{} trailing bytes after last tensor", payload.len() - expected_offset),
        ));
    }
    let weights = Weights::from_named(&header.config, map)?;
    Ok(ModelBundle::new_unchecked(header.config, header.domain, weights))
}

pub fn save_model(model: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)).map_err(|e| EeError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| EeError::io(path, e))?;
    decode_model(&bytes)
}
