//! Synthetic tissue stacks with known expression, registration and domain gap.
//!
//! Each section is rendered from Gaussian cell clusters on a textured
//! background. A cluster's class fixes its stain colour and its expression
//! profile, so expression is predictable from histology. Adjacent sections
//! reuse the central clusters, moved by a random similarity transform and
//! jittered, and every gene goes through a monotone intensity shift.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alignment::PlanarTransform;
use crate::sample::{Mask, RgbImage, Role, Sample, Section};
use crate::sampling::make_grid_mask;
use crate::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub genes: usize,
    pub blobs: usize,
    /// Range of cluster radii (Gaussian standard deviation), pixels.
    pub blob_sigma: [f64; 2],
    pub classes: usize,
    pub sections: usize,
    /// Largest absolute rotation between the central and an adjacent section, degrees.
    pub max_rotation_deg: f64,
    /// Largest absolute translation per axis, pixels.
    pub max_translation_px: f64,
    /// Standard deviation of per-cluster position jitter in adjacent sections.
    pub jitter_px: f64,
    /// Per-gene shift `gain * v^gamma + bias` applied to adjacent sections.
    pub gene_gain: Vec<f32>,
    pub gene_gamma: Vec<f32>,
    pub gene_bias: Vec<f32>,
    /// Per-channel optical-density multiplier for adjacent sections.
    pub stain_gain: [f32; 3],
    /// Standard deviation of additive expression noise.
    pub noise: f32,
    pub spacing: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            genes: 4,
            blobs: 400,
            blob_sigma: [0.6, 1.2],
            classes: 4,
            sections: 3,
            max_rotation_deg: 8.0,
            max_translation_px: 6.0,
            jitter_px: 0.6,
            gene_gain: vec![1.3, 0.8, 1.25, 0.85],
            gene_gamma: vec![1.0, 1.15, 0.85, 1.0],
            gene_bias: vec![0.05, 0.0, -0.03, 0.04],
            stain_gain: [1.12, 0.92, 1.06],
            noise: 0.01,
            spacing: 2,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// A configuration whose adjacent sections reproduce the central one.
    pub fn identity(mut self) -> Self {
        self.max_rotation_deg = 0.0;
        self.max_translation_px = 0.0;
        self.jitter_px = 0.0;
        self.gene_gain = vec![1.0; self.genes];
        self.gene_gamma = vec![1.0; self.genes];
        self.gene_bias = vec![0.0; self.genes];
        self.stain_gain = [1.0; 3];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.genes == 0 {
            return Err(Error::EmptyGenePanel);
        }
        if self.height < 16 || self.width < 16 {
            return bad(format!("phantom must be at least 16x16, got {}x{}", self.height, self.width));
        }
        if self.classes == 0 || self.sections < 2 || self.spacing == 0 {
            return bad(String::from("phantom needs classes > 0, sections >= 2 and spacing > 0"));
        }
        for (name, v) in [("gain", &self.gene_gain), ("gamma", &self.gene_gamma), ("bias", &self.gene_bias)] {
            if v.len() != self.genes {
                return bad(format!("gene_{name} has {} entries for {} genes", v.len(), self.genes));
            }
        }
        if self.gene_gain.iter().chain(&self.gene_gamma).any(|&v| !(v > 0.0)) {
            return bad(String::from("gene gains and gammas must be positive"));
        }
        if !(self.max_rotation_deg.abs() <= 45.0) || !(self.max_translation_px.abs() <= self.height.min(self.width) as f64) {
            return bad(String::from("transform magnitudes outside the supported range"));
        }
        if !(self.blob_sigma[0] > 0.0 && self.blob_sigma[1] > self.blob_sigma[0]) {
            return bad(format!("blob_sigma must be an increasing positive range, got {:?}", self.blob_sigma));
        }
        if self.noise < 0.0 || self.jitter_px < 0.0 || self.stain_gain.iter().any(|&g| !(g > 0.0)) {
            return bad(String::from("noise, jitter and stain gains must be nonnegative"));
        }
        Ok(())
    }
}

/// A generated sample plus everything the evaluator needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub sample: Sample,
    /// Dense expression per section, in `sample.sections` order.
    pub truth: Vec<Tensor>,
    /// True central-to-section transform per section (identity for the central one).
    pub transforms: Vec<PlanarTransform>,
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amp: f32,
    class: usize,
}

struct Palette {
    /// Optical density per class and channel.
    od: Vec<[f32; 3]>,
    /// Expression weight per gene and class.
    alpha: Vec<Vec<f32>>,
}

fn palette(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Palette {
    let base = [[0.35f32, 0.9, 0.25], [0.8, 0.6, 0.2], [0.25, 0.45, 0.7], [0.6, 0.95, 0.55]];
    let od = (0..cfg.classes)
        .map(|c| {
            let b = base[c % base.len()];
            [b[0] * rng.random_range(0.85..1.15), b[1] * rng.random_range(0.85..1.15), b[2] * rng.random_range(0.85..1.15)]
        })
        .collect();
    let alpha = (0..cfg.genes)
        .map(|g| {
            (0..cfg.classes)
                .map(|c| if (g + c) % cfg.classes == 0 { rng.random_range(0.7..1.0) } else { rng.random_range(0.0..0.35) })
                .collect()
        })
        .collect();
    Palette { od, alpha }
}

struct Texture {
    waves: Vec<(f64, f64, f64, f32)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..6)
            .map(|_| {
                let th = rng.random_range(0.0..core::f64::consts::TAU);
                let f = rng.random_range(0.08..0.35);
                (f * libm::cos(th), f * libm::sin(th), rng.random_range(0.0..core::f64::consts::TAU), rng.random_range(0.01..0.04))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f32 {
        self.waves.iter().map(|&(fx, fy, ph, a)| a * libm::sin(fx * x + fy * y + ph) as f32).sum()
    }
}

const BACKGROUND_OD: [f32; 3] = [0.08, 0.22, 0.1];

/// Renders histology `[3, H, W]` and noiseless expression `[G, H, W]`.
///
/// Background texture is evaluated at the central-frame preimage `inv(p)`
/// so it moves with the tissue.
fn render(
    cfg: &PhantomConfig,
    pal: &Palette,
    tex: &Texture,
    blobs: &[Blob],
    inv: &PlanarTransform,
    stain: [f32; 3],
) -> (Vec<u8>, Tensor) {
    let (h, w, g) = (cfg.height, cfg.width, cfg.genes);
    let mut od = vec![[0.0f32; 3]; h * w];
    let mut expr = Tensor::zeros(&[g, h, w]);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let [sx, sy] = inv.apply([x as f64, y as f64]);
            let t = tex.at(sx, sy);
            let i = y * w + x;
            for c in 0..3 {
                od[i][c] = BACKGROUND_OD[c] + t;
            }
        }
    }
    for b in blobs {
        let r = libm::ceil(3.5 * b.sigma) as isize;
        let (cx, cy) = (libm::round(b.x) as isize, libm::round(b.y) as isize);
        for y in (cy - r).max(0)..(cy + r + 1).min(h as isize) {
            for x in (cx - r).max(0)..(cx + r + 1).min(w as isize) {
                let (dx, dy) = (x as f64 - b.x, y as f64 - b.y);
                let d2 = dx * dx + dy * dy;
                let k = b.amp * libm::exp(-d2 / (2.0 * b.sigma * b.sigma)) as f32;
                let i = y as usize * w + x as usize;
                for c in 0..3 {
                    od[i][c] += k * pal.od[b.class][c];
                }
                for (gi, alpha) in pal.alpha.iter().enumerate() {
                    expr.data_mut()[gi * plane + i] += k * alpha[b.class];
                }
            }
        }
    }
    let mut rgb = Vec::with_capacity(3 * plane);
    for px in &od {
        for c in 0..3 {
            let v = libm::expf(-(px[c] * stain[c]).max(0.0));
            rgb.push(libm::roundf(v * 255.0).clamp(0.0, 255.0) as u8);
        }
    }
    (rgb, expr)
}

/// Fraction of central-frame pixels that `t` maps outside the frame.
fn out_of_frame(t: &PlanarTransform, h: usize, w: usize) -> f64 {
    let mut outside = 0usize;
    for y in 0..h {
        for x in 0..w {
            let [u, v] = t.apply([x as f64, y as f64]);
            if u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
                outside += 1;
            }
        }
    }
    outside as f64 / (h * w) as f64
}

/// Generates a phantom sample, deterministic in `cfg.seed`.
pub fn synth_phantom(cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pal = palette(cfg, &mut rng);
    let tex = Texture::new(&mut rng);
    let (h, w) = (cfg.height, cfg.width);
    let margin = cfg.max_translation_px.abs() + 0.25 * h.max(w) as f64 * libm::sin(cfg.max_rotation_deg.abs().to_radians()) + 4.0;
    let blobs: Vec<Blob> = (0..cfg.blobs)
        .map(|_| Blob {
            x: rng.random_range(-margin..w as f64 + margin),
            y: rng.random_range(-margin..h as f64 + margin),
            sigma: rng.random_range(cfg.blob_sigma[0]..cfg.blob_sigma[1]),
            amp: rng.random_range(0.6..1.0),
            class: rng.random_range(0..cfg.classes),
        })
        .collect();
    let center = [(w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0];
    let k = cfg.sections / 2;
    let noise = if cfg.noise > 0.0 { Some(Normal::new(0.0f32, cfg.noise).expect("valid std")) } else { None };
    let jitter = if cfg.jitter_px > 0.0 { Some(Normal::new(0.0f64, cfg.jitter_px).expect("valid std")) } else { None };
    let genes: Vec<String> = (0..cfg.genes).map(|g| format!("gene{g}")).collect();

    let mut sections = Vec::with_capacity(cfg.sections);
    let mut truth = Vec::with_capacity(cfg.sections);
    let mut transforms = Vec::with_capacity(cfg.sections);
    for index in 0..cfg.sections {
        let central = index == k;
        let transform = if central {
            PlanarTransform::identity()
        } else {
            let rot = if cfg.max_rotation_deg == 0.0 { 0.0 } else { rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg) };
            let tr = cfg.max_translation_px;
            let (tx, ty) = if tr == 0.0 { (0.0, 0.0) } else { (rng.random_range(-tr..=tr), rng.random_range(-tr..=tr)) };
            PlanarTransform::similarity_about(center, rot.to_radians(), 1.0, tx, ty)
        };
        let lost = out_of_frame(&transform, h, w);
        if lost > 0.5 {
            return Err(Error::ContentOutOfFrame { fraction: lost });
        }
        let moved: Vec<Blob> = blobs
            .iter()
            .map(|b| {
                let [x, y] = transform.apply([b.x, b.y]);
                let (jx, jy) = match (&jitter, central) {
                    (Some(j), false) => (j.sample(&mut rng), j.sample(&mut rng)),
                    _ => (0.0, 0.0),
                };
                Blob { x: x + jx, y: y + jy, ..*b }
            })
            .collect();
        let stain = if central { [1.0; 3] } else { cfg.stain_gain };
        let (rgb, mut expr) = render(cfg, &pal, &tex, &moved, &transform.inverse()?, stain);
        let plane = h * w;
        for g in 0..cfg.genes {
            let (gain, gamma, bias) = if central { (1.0, 1.0, 0.0) } else { (cfg.gene_gain[g], cfg.gene_gamma[g], cfg.gene_bias[g]) };
            for v in &mut expr.data_mut()[g * plane..(g + 1) * plane] {
                let shifted = gain * libm::powf(*v, gamma) + bias;
                let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                *v = (shifted + n).max(0.0);
            }
        }
        let histology = RgbImage::new(h, w, rgb)?;
        let (expression, mask) = if central {
            (expr.clone(), Mask::full(h, w))
        } else {
            let grid = make_grid_mask(h, w, cfg.spacing, (0, 0))?;
            let (sparse, m) = grid.apply(&expr)?;
            (sparse, m)
        };
        let role = if central { Role::Central } else { Role::Adjacent };
        sections.push(Section { histology, expression, mask, role, index, transform: None });
        truth.push(expr);
        transforms.push(transform);
    }
    let sample = Sample::new(format!("phantom-{}", cfg.seed), genes, sections)?;
    Ok(Phantom { sample, truth, transforms })
}
