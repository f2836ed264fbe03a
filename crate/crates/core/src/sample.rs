//! Sections, samples and per-gene expression normalization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::alignment::PlanarTransform;
use crate::filter::Plane;
use crate::{Error, Result, Tensor};

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape {
                op: "rgb_image",
                detail: format!("{height}x{width}x3 needs {} bytes, got {}", height * width * 3, data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// `[3, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.height * self.width;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[p * 3 + c] as f32 / 255.0
        })
    }

    pub fn luminance(&self) -> Plane {
        luminance(&self.to_tensor())
    }
}

/// Rec. 601 luma of a `[3, H, W]` tensor.
pub fn luminance(rgb: &Tensor) -> Plane {
    let (_, h, w) = rgb.dims3().expect("rgb tensor");
    let (r, g, b) = (rgb.channel(0), rgb.channel(1), rgb.channel(2));
    let data = (0..h * w).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect();
    Plane::new(h, w, data)
}

/// Binary per-pixel mask stored as one byte per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape { op: "mask", detail: format!("{height}x{width} vs {} bytes", data.len()) });
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask values must be 0 or 1, found {bad}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, data: alloc::vec![1; height * width] }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: alloc::vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn is_set(&self, i: usize) -> bool {
        self.data[i] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|&v| v == 1)
    }

    pub fn and(&self, other: &Mask) -> Mask {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect();
        Mask { height: self.height, width: self.width, data }
    }

    pub fn invert(&self) -> Mask {
        Mask { height: self.height, width: self.width, data: self.data.iter().map(|v| 1 - v).collect() }
    }

    /// `[1, H, W]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[1, self.height, self.width], |i| self.data[i] as f32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Central,
    Adjacent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub histology: RgbImage,
    /// Gene-major `[G, H, W]`; zero wherever `mask` is 0.
    pub expression: Tensor,
    pub mask: Mask,
    pub role: Role,
    /// Position along the stacking axis.
    pub index: usize,
    /// Estimated map from the central frame into this section's frame.
    pub transform: Option<PlanarTransform>,
}

impl Section {
    pub fn height(&self) -> usize {
        self.histology.height()
    }

    pub fn width(&self) -> usize {
        self.histology.width()
    }

    fn validate(&self, genes: usize) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let (g, eh, ew) = self.expression.dims3()?;
        if (g, eh, ew) != (genes, h, w) {
            return Err(Error::Shape {
                op: "section",
                detail: format!("section {}: expression {:?} vs {genes}x{h}x{w}", self.index, self.expression.shape()),
            });
        }
        if (self.mask.height(), self.mask.width()) != (h, w) {
            return Err(Error::Shape {
                op: "section",
                detail: format!("section {}: mask {}x{} vs {h}x{w}", self.index, self.mask.height(), self.mask.width()),
            });
        }
        if self.role == Role::Central && !self.mask.is_full() {
            return Err(Error::InvalidArgument(format!("central section {} must be fully observed", self.index)));
        }
        Ok(())
    }
}

/// Per-gene min/max of the central section, used for min-max scaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneStats {
    pub min: f32,
    pub max: f32,
}

impl GeneStats {
    pub fn normalize(&self, v: f32) -> f32 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, v: f32) -> f32 {
        v * (self.max - self.min) + self.min
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub genes: Vec<String>,
    /// Ordered by `Section::index`.
    pub sections: Vec<Section>,
    /// Present once expression has been normalized.
    pub stats: Option<Vec<GeneStats>>,
}

impl Sample {
    pub fn new(id: impl Into<String>, genes: Vec<String>, mut sections: Vec<Section>) -> Result<Self> {
        sections.sort_by_key(|s| s.index);
        let sample = Self { id: id.into(), genes, sections, stats: None };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        if self.genes.is_empty() {
            return Err(Error::EmptyGenePanel);
        }
        let centrals = self.sections.iter().filter(|s| s.role == Role::Central).count();
        if centrals != 1 {
            return Err(Error::InvalidArgument(format!("expected exactly one central section, found {centrals}")));
        }
        let (h, w) = (self.sections[0].height(), self.sections[0].width());
        for (i, s) in self.sections.iter().enumerate() {
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::Shape {
                    op: "sample",
                    detail: format!("section {} is {}x{}, expected {h}x{w}", s.index, s.height(), s.width()),
                });
            }
            if i > 0 && self.sections[i - 1].index == s.index {
                return Err(Error::InvalidArgument(format!("duplicate section index {}", s.index)));
            }
            s.validate(self.genes.len())?;
        }
        if let Some(stats) = &self.stats {
            if stats.len() != self.genes.len() {
                return Err(Error::InvalidArgument(format!("{} gene stats for {} genes", stats.len(), self.genes.len())));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.sections[0].height()
    }

    pub fn width(&self) -> usize {
        self.sections[0].width()
    }

    pub fn gene_count(&self) -> usize {
        self.genes.len()
    }

    /// Position of the central section in `sections`.
    pub fn central_position(&self) -> usize {
        self.sections.iter().position(|s| s.role == Role::Central).expect("validated sample")
    }

    pub fn central(&self) -> &Section {
        &self.sections[self.central_position()]
    }

    pub fn adjacent_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.sections.iter().enumerate().filter(|(_, s)| s.role == Role::Adjacent).map(|(i, _)| i)
    }

    pub fn position_of(&self, index: usize) -> Option<usize> {
        self.sections.iter().position(|s| s.index == index)
    }
}

/// Min-max scales each gene so the central section spans `[0, 1]`.
///
/// The same affine map is applied to the observed pixels of every adjacent
/// section, so their values may fall outside `[0, 1]`.
pub fn normalize_expression(sample: &Sample) -> Result<Sample> {
    if sample.stats.is_some() {
        return Err(Error::InvalidArgument(String::from("sample is already normalized")));
    }
    let central = sample.central();
    let mut stats = Vec::with_capacity(sample.gene_count());
    let mut constant = Vec::new();
    for (g, name) in sample.genes.iter().enumerate() {
        let ch = central.expression.channel(g);
        let min = ch.iter().copied().fold(f32::INFINITY, f32::min);
        let max = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if !(max > min) {
            constant.push(name.clone());
        }
        stats.push(GeneStats { min, max });
    }
    if !constant.is_empty() {
        return Err(Error::ConstantGene(constant));
    }
    let mut out = sample.clone();
    for section in &mut out.sections {
        let mask = section.mask.clone();
        for (g, st) in stats.iter().enumerate() {
            for (i, v) in section.expression.channel_mut(g).iter_mut().enumerate() {
                if mask.is_set(i) {
                    *v = st.normalize(*v);
                }
            }
        }
    }
    out.stats = Some(stats);
    Ok(out)
}

/// Applies per-gene normalization to a dense `[G, H, W]` map.
pub fn normalize_map(map: &Tensor, stats: &[GeneStats]) -> Result<Tensor> {
    map_per_gene(map, stats, GeneStats::normalize)
}

/// Inverse of [`normalize_map`].
pub fn denormalize_map(map: &Tensor, stats: &[GeneStats]) -> Result<Tensor> {
    map_per_gene(map, stats, GeneStats::denormalize)
}

fn map_per_gene(map: &Tensor, stats: &[GeneStats], f: fn(&GeneStats, f32) -> f32) -> Result<Tensor> {
    let (g, _, _) = map.dims3()?;
    if g != stats.len() {
        return Err(Error::Shape { op: "normalize", detail: format!("{g} genes vs {} stats", stats.len()) });
    }
    let mut out = map.clone();
    for (gi, st) in stats.iter().enumerate() {
        for v in out.channel_mut(gi) {
            *v = f(st, *v);
        }
    }
    Ok(out)
}
