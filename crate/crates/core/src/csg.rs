//! Confidence scores for pseudo labels.
//!
//! Pseudo-label errors at measured pixels become scores in `[0, 1]`, the
//! coarse score lattice is upsampled bicubically to every pixel, measured
//! pixels are pinned to 1 and the whole map is rescaled to unit mean.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::filter::Plane;
use crate::sample::Mask;
use crate::sampling::SamplingGrid;
use crate::{Error, Result, Tensor};

/// Per-pixel errors and scores on the observed set, in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedScores {
    pub pixels: Vec<usize>,
    pub errors: Vec<f32>,
    pub w_obs: Vec<f32>,
}

/// Scores `w_obs = 1 - E / max E` from the gene-vector error `E` at each
/// measured pixel. A perfect prediction everywhere gives all ones.
pub fn observed_confidence(pseudo: &Tensor, measured: &Tensor, mask: &Mask) -> Result<ObservedScores> {
    let (g, h, w) = pseudo.dims3()?;
    if measured.shape() != pseudo.shape() || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape {
            op: "observed_confidence",
            detail: format!("pseudo {:?}, measured {:?}, mask {}x{}", pseudo.shape(), measured.shape(), mask.height(), mask.width()),
        });
    }
    let n = h * w;
    let pixels: Vec<usize> = (0..n).filter(|&i| mask.is_set(i)).collect();
    if pixels.is_empty() {
        return Err(Error::EmptyObservedSet);
    }
    let errors: Vec<f32> = pixels
        .iter()
        .map(|&i| {
            let s: f64 = (0..g)
                .map(|c| {
                    let d = (pseudo.data()[c * n + i] - measured.data()[c * n + i]) as f64;
                    d * d
                })
                .sum();
            libm::sqrt(s) as f32
        })
        .collect();
    Ok(ObservedScores { w_obs: scores_from_errors(&errors), pixels, errors })
}

/// `1 - e / max(e)`, or all ones when every error is zero.
pub fn scores_from_errors(errors: &[f32]) -> Vec<f32> {
    let max = errors.iter().fold(0.0f32, |m, &e| m.max(e));
    if max == 0.0 {
        return vec![1.0; errors.len()];
    }
    errors.iter().map(|&e| 1.0 - e / max).collect()
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseConfidence {
    pub w: Plane,
    /// The coarse lattice was smaller than 4x4 and bilinear weights were used.
    pub bilinear_fallback: bool,
}

/// Interpolation weights of one output coordinate over the coarse nodes.
fn axis_weights(pos: f64, nodes: usize, cubic: bool) -> Vec<(usize, f64)> {
    let base = libm::floor(pos);
    let t = pos - base;
    let clamp = |i: isize| i.clamp(0, nodes as isize - 1) as usize;
    if cubic {
        (-1..=2).map(|k| (clamp(base as isize + k), cubic_kernel(t - k as f64))).collect()
    } else {
        vec![(clamp(base as isize), 1.0 - t), (clamp(base as isize + 1), t)]
    }
}

/// Upsamples `w_obs` from the sampling lattice to every pixel.
///
/// Lattice node `(i, j)` sits at pixel `(i s + r0, j s + c0)`. Values are
/// interpolated separably with edge clamping and clamped to `[0, 1]`.
pub fn propagate_confidence(scores: &ObservedScores, grid: &SamplingGrid) -> Result<DenseConfidence> {
    let (h, w) = (grid.height(), grid.width());
    let (rows, cols) = grid.coarse_dims();
    let mut lookup = vec![f32::NAN; h * w];
    for (&p, &v) in scores.pixels.iter().zip(&scores.w_obs) {
        lookup[p] = v;
    }
    let mut coarse = Vec::with_capacity(rows * cols);
    for &(r, c) in grid.coords() {
        let v = lookup[r * w + c];
        if v.is_nan() {
            return Err(Error::InvalidArgument(format!("grid site ({r}, {c}) has no observed score")));
        }
        coarse.push(v as f64);
    }
    if scores.pixels.len() != grid.coords().len() {
        return Err(Error::InvalidArgument(format!(
            "{} observed pixels but the grid has {} sites",
            scores.pixels.len(),
            grid.coords().len()
        )));
    }
    let cubic = rows >= 4 && cols >= 4;
    let s = grid.spacing() as f64;
    let (r0, c0) = grid.offset();
    let col_w: Vec<_> = (0..w).map(|x| axis_weights((x as f64 - c0 as f64) / s, cols, cubic)).collect();
    let row_w: Vec<_> = (0..h).map(|y| axis_weights((y as f64 - r0 as f64) / s, rows, cubic)).collect();

    let mut horiz = vec![0.0f64; rows * w];
    for i in 0..rows {
        for (x, wx) in col_w.iter().enumerate() {
            horiz[i * w + x] = wx.iter().map(|&(j, k)| k * coarse[i * cols + j]).sum();
        }
    }
    let mut out = Plane::zeros(h, w);
    for (y, wy) in row_w.iter().enumerate() {
        for x in 0..w {
            let v: f64 = wy.iter().map(|&(i, k)| k * horiz[i * w + x]).sum();
            out.data[y * w + x] = v.clamp(0.0, 1.0) as f32;
        }
    }
    if !cubic {
        log::warn!("sampling lattice is {rows}x{cols}; confidence uses bilinear propagation");
    }
    Ok(DenseConfidence { w: out, bilinear_fallback: !cubic })
}

/// Pins measured pixels to 1, then divides by the mean over all pixels.
pub fn finalize_confidence(w: &Plane, mask: &Mask) -> Result<Plane> {
    if (mask.height(), mask.width()) != (w.height, w.width) {
        return Err(Error::Shape {
            op: "finalize_confidence",
            detail: format!("w {}x{}, mask {}x{}", w.height, w.width, mask.height(), mask.width()),
        });
    }
    if mask.count() == 0 {
        return Err(Error::EmptyObservedSet);
    }
    if let Some(&neg) = w.data.iter().find(|v| **v < 0.0) {
        return Err(Error::NegativeWeight(neg));
    }
    let pinned: Vec<f64> = w.data.iter().enumerate().map(|(i, &v)| if mask.is_set(i) { 1.0 } else { v as f64 }).collect();
    let mean = pinned.iter().sum::<f64>() / pinned.len() as f64;
    debug_assert!(mean > 0.0);
    Ok(Plane::new(w.height, w.width, pinned.iter().map(|v| (v / mean) as f32).collect()))
}

/// Every stage of the confidence computation for one adjacent section.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    pub observed: ObservedScores,
    pub dense: DenseConfidence,
    pub w_tilde: Plane,
    pub mask: Mask,
}

impl ConfidenceMap {
    pub fn build(pseudo: &Tensor, measured: &Tensor, grid: &SamplingGrid) -> Result<Self> {
        let observed = observed_confidence(pseudo, measured, grid.mask())?;
        let dense = propagate_confidence(&observed, grid)?;
        let w_tilde = finalize_confidence(&dense.w, grid.mask())?;
        Ok(Self { observed, dense, w_tilde, mask: grid.mask().clone() })
    }

    pub fn pixel_count(&self) -> usize {
        self.w_tilde.data.len()
    }
}

/// Unit weights, used when confidence weighting is switched off.
pub fn uniform_weights(height: usize, width: usize) -> Plane {
    Plane::new(height, width, vec![1.0; height * width])
}
