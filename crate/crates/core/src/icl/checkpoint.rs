//! Checkpoint container.
//!
//! Layout: the 8-byte magic `CTXICL01`, a little-endian `u64` header length,
//! a JSON header (config, tensor names and shapes, optimizer presence), then
//! every parameter as a little-endian `f64`. When the optimizer state is
//! present the first and second moments follow in the same order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{AdamState, IclConfig, IclModel, TensorInfo};
use crate::error::{Error, Result};
use crate::fsutil;

const MAGIC: &[u8; 8] = b"CTXICL01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: IclConfig,
    tensors: Vec<TensorInfo>,
    num_params: usize,
    optimizer_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest: Option<String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Parse {
        row: 0,
        msg: format!("checkpoint: {}", msg.into()),
    }
}

pub fn write_checkpoint<W: Write>(model: &IclModel, with_optimizer: bool, w: W) -> Result<()> {
    write_checkpoint_with_manifest(model, with_optimizer, None, w)
}

/// Like [`write_checkpoint`], also storing a manifest line in the header.
pub fn write_checkpoint_with_manifest<W: Write>(
    model: &IclModel,
    with_optimizer: bool,
    manifest: Option<&str>,
    mut w: W,
) -> Result<()> {
    let header = Header {
        manifest: manifest.map(str::to_string),
        config: model.config.clone(),
        tensors: model.layout().tensors().map(|(t, _)| t.clone()).collect(),
        num_params: model.num_params(),
        optimizer_step: with_optimizer.then_some(model.adam.step),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * model.num_params() * 3);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut put = |v: &[f64]| {
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    put(&model.params);
    if with_optimizer {
        put(&model.adam.m);
        put(&model.adam.v);
    }
    w.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
}

fn split_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    Ok((header, hlen))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<IclModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    let (header, hlen) = split_header(&bytes)?;
    let mut rest = &bytes[16 + hlen..];
    let mut take = |n: usize| -> Result<Vec<f64>> {
        if rest.len() < 8 * n {
            return Err(bad("truncated tensor data"));
        }
        let (head, tail) = rest.split_at(8 * n);
        rest = tail;
        Ok(head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let params = take(header.num_params)?;
    let adam = match header.optimizer_step {
        Some(step) => Some(AdamState {
            m: take(header.num_params)?,
            v: take(header.num_params)?,
            step,
        }),
        None => None,
    };
    let model = IclModel::from_parts(header.config, params, adam)?;
    let expected: Vec<TensorInfo> = model.layout().tensors().map(|(t, _)| t.clone()).collect();
    if expected != header.tensors {
        return Err(bad("tensor table does not match the config"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &IclModel, with_optimizer: bool, path: &Path) -> Result<()> {
    save_checkpoint_with_manifest(model, with_optimizer, None, path)
}

pub fn save_checkpoint_with_manifest(
    model: &IclModel,
    with_optimizer: bool,
    manifest: Option<&str>,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint_with_manifest(model, with_optimizer, manifest, &mut buf)?;
    fsutil::write_atomic(path, &buf)
}

/// The manifest line stored in a checkpoint header, if any.
pub fn checkpoint_manifest(path: &Path) -> Result<Option<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes)?.0.manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<IclModel> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
