//! Precomputed histology feature maps.
//!
//! A `.stdf` file holds the magic `STDF`, three little-endian u32 values
//! `C, H, W` and then `C * H * W` little-endian f32 values, channel-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use stdai_core::sample::Sample;
use stdai_core::Tensor;

use crate::error::{Result, StdaiError};

const MAGIC: &[u8; 4] = b"STDF";

pub fn encode_features(map: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = map.dims3()?;
    let mut out = Vec::with_capacity(16 + 4 * map.len());
    out.extend_from_slice(MAGIC);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(StdaiError::format(path, "not a feature map (missing STDF header)"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    if bytes.len() != 16 + 4 * n {
        return Err(StdaiError::format(path, format!("{} payload bytes for shape {shape:?}", bytes.len() - 16)));
    }
    let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn write_features(path: &Path, map: &Tensor) -> Result<()> {
    fs::write(path, encode_features(map)?).map_err(StdaiError::io(path))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(StdaiError::io(path))?;
    decode_features(path, &bytes)
}

pub fn feature_file(dir: &Path, index: usize) -> std::path::PathBuf {
    dir.join(format!("section_{index}.stdf"))
}

/// Loads `section_<i>.stdf` for every section that has one.
pub fn load_feature_dir(dir: &Path, sample: &Sample) -> Result<BTreeMap<usize, Tensor>> {
    if !dir.is_dir() {
        return Err(StdaiError::Config(format!("feature directory {} does not exist", dir.display())));
    }
    let mut out = BTreeMap::new();
    for s in &sample.sections {
        let path = feature_file(dir, s.index);
        if path.exists() {
            out.insert(s.index, read_features(&path)?);
        }
    }
    Ok(out)
}
