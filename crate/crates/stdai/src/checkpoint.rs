//! Model checkpoints.
//!
//! Layout: the 8-byte magic `STDAICK1`, a little-endian u64 header length,
//! a JSON header (backbone config plus one entry per tensor in declaration
//! order), then every tensor as little-endian f32 in the same order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stdai_core::backbone::{BackboneConfig, ModelParams};
use stdai_core::pdl::insert_pdls;

use crate::error::{Result, StdaiError};

const MAGIC: &[u8; 8] = b"STDAICK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Block index for domain-alignment tensors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pdl_site: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: BackboneConfig,
    pub tensors: Vec<TensorEntry>,
}

fn header_of(params: &ModelParams) -> CheckpointHeader {
    let site_of = |id| params.pdl_sites().iter().find(|(_, s)| s.scale == id || s.shift == id).map(|(&site, _)| site);
    CheckpointHeader {
        config: params.config().clone(),
        tensors: params
            .store()
            .ids()
            .map(|id| TensorEntry {
                name: params.store().name(id).to_string(),
                shape: params.store().get(id).shape().to_vec(),
                trainable: params.store().is_trainable(id),
                pdl_site: site_of(id),
            })
            .collect(),
    }
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let header = serde_json::to_vec(&header_of(params)).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 4 * params.store().num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for id in params.store().ids() {
        for v in params.store().get(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes a new checkpoint file; an existing file is an error.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut f = fs::OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AlreadyExists {
            StdaiError::Exists(path.to_path_buf())
        } else {
            StdaiError::Io { path: path.to_path_buf(), source: e }
        }
    })?;
    f.write_all(&encode_checkpoint(params)).map_err(StdaiError::io(path))
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<ModelParams> {
    let bad = |d: String| StdaiError::format(path, d);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(bad(format!("truncated header: {} of {hlen} bytes", body.len())));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|source| StdaiError::Json { path: path.to_path_buf(), source })?;
    let mut params = ModelParams::init(header.config.clone(), 0)?;
    let mut sites: Vec<usize> = header.tensors.iter().filter_map(|t| t.pdl_site).collect();
    sites.dedup();
    insert_pdls(&mut params, &sites)?;
    let ids: Vec<_> = params.store().ids().collect();
    if ids.len() != header.tensors.len() {
        return Err(bad(format!("{} tensors, configuration expects {}", header.tensors.len(), ids.len())));
    }
    let data = &body[hlen..];
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if data.len() != 4 * expected {
        return Err(bad(format!("{} payload bytes, expected {}", data.len(), 4 * expected)));
    }
    let mut offset = 0;
    for (id, entry) in ids.into_iter().zip(&header.tensors) {
        let t = params.store().get(id);
        if params.store().name(id) != entry.name || t.shape() != &entry.shape[..] {
            return Err(bad(format!("tensor {} {:?} does not match the layout ({} {:?})", entry.name, entry.shape, params.store().name(id), t.shape())));
        }
        let n = t.len();
        let dst = params.store_mut().get_mut(id).data_mut();
        for (d, c) in dst.iter_mut().zip(data[offset..offset + 4 * n].chunks_exact(4)) {
            *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        offset += 4 * n;
        params.store_mut().set_trainable(id, entry.trainable);
    }
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(StdaiError::io(path))?;
    decode_checkpoint(path, &bytes)
}
