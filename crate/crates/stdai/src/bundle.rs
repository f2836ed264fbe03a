//! On-disk sample bundles.
//!
//! ```text
//! manifest.json
//! section_<i>/histology.ppm   binary P6, 8-bit
//! section_<i>/expression.f32  little-endian f32, gene-major [G][H][W]
//! section_<i>/mask.u8         one byte per pixel, 0 or 1
//! section_<i>/truth.f32       optional dense ground truth, evaluator only
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stdai_core::alignment::{PlanarTransform, TransformFamily};
use stdai_core::pipeline::Provenance;
use stdai_core::sample::{GeneStats, Mask, RgbImage, Role, Sample, Section};
use stdai_core::Tensor;

use crate::error::{Result, StdaiError};

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub index: usize,
    pub role: Role,
    /// Central-to-section map `[a, b, tx, c, d, ty]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<[f64; 6]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform_family: Option<TransformFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub id: String,
    pub central_index: usize,
    pub height: usize,
    pub width: usize,
    pub genes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<Vec<GeneStats>>,
    pub sections: Vec<SectionEntry>,
}

pub fn section_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("section_{index}"))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend_from_slice(img.data());
    fs::write(path, bytes).map_err(StdaiError::io(path))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(StdaiError::io(path))?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(StdaiError::format(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(StdaiError::format(path, format!("bad magic {:?}, expected P6", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| StdaiError::format(path, format!("bad PPM header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(StdaiError::format(path, format!("only 8-bit PPM is supported, maxval {maxval}")));
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() != 3 * w * h {
        return Err(StdaiError::format(path, format!("{} pixel bytes for {w}x{h}", data.len())));
    }
    Ok(RgbImage::new(h, w, data.to_vec())?)
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(StdaiError::io(path))
}

/// Reads exactly `count` little-endian floats.
pub fn read_f32(path: &Path, count: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(StdaiError::io(path))?;
    if bytes.len() != 4 * count {
        return Err(StdaiError::format(path, format!("{} bytes, expected {} ({count} floats)", bytes.len(), 4 * count)));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn read_mask(path: &Path, h: usize, w: usize) -> Result<Mask> {
    let bytes = fs::read(path).map_err(StdaiError::io(path))?;
    if bytes.len() != h * w {
        return Err(StdaiError::format(path, format!("{} bytes for a {h}x{w} mask", bytes.len())));
    }
    if let Some(v) = bytes.iter().find(|&&b| b > 1) {
        return Err(StdaiError::format(path, format!("mask byte {v} is not 0 or 1")));
    }
    Ok(Mask::new(h, w, bytes)?)
}

fn manifest_of(sample: &Sample, provenance: Option<&[Provenance]>) -> Manifest {
    Manifest {
        format: FORMAT_VERSION,
        id: sample.id.clone(),
        central_index: sample.central().index,
        height: sample.height(),
        width: sample.width(),
        genes: sample.genes.clone(),
        stats: sample.stats.clone(),
        sections: sample
            .sections
            .iter()
            .enumerate()
            .map(|(pos, s)| SectionEntry {
                index: s.index,
                role: s.role,
                transform: s.transform.map(|t| t.matrix),
                transform_family: s.transform.map(|t| t.family),
                provenance: provenance.map(|p| p[pos]),
            })
            .collect(),
    }
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    let path = root.join(MANIFEST);
    let json = serde_json::to_string_pretty(manifest).map_err(|source| StdaiError::Json { path: path.clone(), source })?;
    fs::write(&path, json + "\n").map_err(StdaiError::io(&path))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(StdaiError::io(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|source| StdaiError::Json { path: path.clone(), source })?;
    if m.format != FORMAT_VERSION {
        return Err(StdaiError::format(&path, format!("unsupported bundle format {}", m.format)));
    }
    Ok(m)
}

/// Writes `sample` under `root`, which must not already hold a bundle.
///
/// `truth`, when given, holds one dense map per section in stack order and
/// goes to the sidecar files; `provenance` is recorded for predicted volumes.
pub fn write_bundle(sample: &Sample, root: &Path, truth: Option<&[Tensor]>, provenance: Option<&[Provenance]>) -> Result<Manifest> {
    sample.validate()?;
    let n = sample.sections.len();
    if truth.is_some_and(|t| t.len() != n) || provenance.is_some_and(|p| p.len() != n) {
        return Err(StdaiError::Config(format!("truth/provenance lists must have {n} entries")));
    }
    if root.join(MANIFEST).exists() {
        return Err(StdaiError::Exists(root.join(MANIFEST)));
    }
    fs::create_dir_all(root).map_err(StdaiError::io(root))?;
    for (pos, s) in sample.sections.iter().enumerate() {
        let dir = section_dir(root, s.index);
        fs::create_dir_all(&dir).map_err(StdaiError::io(&dir))?;
        write_ppm(&dir.join("histology.ppm"), &s.histology)?;
        write_f32(&dir.join("expression.f32"), s.expression.data())?;
        let mask = dir.join("mask.u8");
        fs::write(&mask, s.mask.data()).map_err(StdaiError::io(&mask))?;
        if let Some(t) = truth {
            if t[pos].shape() != s.expression.shape() {
                return Err(StdaiError::Config(format!("truth for section {} has shape {:?}", s.index, t[pos].shape())));
            }
            write_f32(&dir.join("truth.f32"), t[pos].data())?;
        }
    }
    let manifest = manifest_of(sample, provenance);
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

/// Reads a bundle. Ground-truth sidecars are never opened here.
pub fn read_bundle(root: &Path) -> Result<Sample> {
    let m = read_manifest(root)?;
    let (h, w, g) = (m.height, m.width, m.genes.len());
    let mut sections = Vec::with_capacity(m.sections.len());
    for e in &m.sections {
        let dir = section_dir(root, e.index);
        let hist_path = dir.join("histology.ppm");
        let histology = read_ppm(&hist_path)?;
        if (histology.height(), histology.width()) != (h, w) {
            return Err(StdaiError::format(
                &hist_path,
                format!("{}x{} image, manifest declares {h}x{w}", histology.height(), histology.width()),
            ));
        }
        let expression = Tensor::new(vec![g, h, w], read_f32(&dir.join("expression.f32"), g * h * w)?)?;
        let mask = read_mask(&dir.join("mask.u8"), h, w)?;
        let transform = match e.transform {
            Some(t) => Some(PlanarTransform::new(t, e.transform_family.unwrap_or_default())?),
            None => None,
        };
        sections.push(Section { histology, expression, mask, role: e.role, index: e.index, transform });
    }
    let mut sample = Sample::new(m.id.clone(), m.genes.clone(), sections)?;
    if sample.central().index != m.central_index {
        return Err(StdaiError::format(&root.join(MANIFEST), format!("central_index {} does not match section roles", m.central_index)));
    }
    sample.stats = m.stats;
    Ok(sample)
}

/// Dense ground truth per section in stack order, if every section has a sidecar.
pub fn read_truth(root: &Path) -> Result<Option<Vec<Tensor>>> {
    let m = read_manifest(root)?;
    let (h, w, g) = (m.height, m.width, m.genes.len());
    let mut sections = m.sections.clone();
    sections.sort_by_key(|e| e.index);
    let mut out = Vec::with_capacity(sections.len());
    for e in &sections {
        let path = section_dir(root, e.index).join("truth.f32");
        if !path.exists() {
            return Ok(None);
        }
        out.push(Tensor::new(vec![g, h, w], read_f32(&path, g * h * w)?)?);
    }
    Ok(Some(out))
}

/// Rewrites the manifest entry of one section with a new transform.
pub fn store_transform(root: &Path, index: usize, transform: &PlanarTransform) -> Result<()> {
    let mut m = read_manifest(root)?;
    let entry = m
        .sections
        .iter_mut()
        .find(|e| e.index == index)
        .ok_or_else(|| StdaiError::Config(format!("bundle has no section {index}")))?;
    entry.transform = Some(transform.matrix);
    entry.transform_family = Some(transform.family);
    write_manifest(root, &m)
}
