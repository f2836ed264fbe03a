use alloc::vec;

use super::transform::PlanarTransform;
use crate::sample::Mask;
use crate::{Result, Tensor};

/// Central-section maps resampled into an adjacent section's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedCentral {
    /// `[3, H, W]` in `[0, 1]`.
    pub histology: Tensor,
    /// `[G, H, W]`.
    pub expression: Tensor,
    /// 1 where bilinear sampling had full in-bounds support.
    pub validity: Mask,
    /// Source visibility mask, nearest-neighbour resampled and restricted to `validity`.
    pub visibility: Mask,
}

const EDGE_EPS: f64 = 1e-9;

/// Resamples every channel of a `[C, H, W]` tensor through `transform`.
///
/// Output pixel `p` reads the source at `transform^-1(p)`; pixels whose
/// preimage falls outside the source are zero and invalid.
pub fn warp_tensor(src: &Tensor, transform: &PlanarTransform) -> Result<(Tensor, Mask)> {
    let (c, h, w) = src.dims3()?;
    let inv = transform.inverse()?;
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut valid = vec![0u8; h * w];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let [qx, qy] = inv.apply([x as f64, y as f64]);
            if qx < -EDGE_EPS || qy < -EDGE_EPS || qx > (w - 1) as f64 + EDGE_EPS || qy > (h - 1) as f64 + EDGE_EPS {
                continue;
            }
            let (qx, qy) = (qx.clamp(0.0, (w - 1) as f64), qy.clamp(0.0, (h - 1) as f64));
            let (x0, y0) = (libm::floor(qx) as usize, libm::floor(qy) as usize);
            let (fx, fy) = ((qx - x0 as f64) as f32, (qy - y0 as f64) as f32);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            valid[y * w + x] = 1;
            for ch in 0..c {
                let s = &src.data()[ch * plane..(ch + 1) * plane];
                let top = (1.0 - fx) * s[y0 * w + x0] + fx * s[y0 * w + x1];
                let bottom = (1.0 - fx) * s[y1 * w + x0] + fx * s[y1 * w + x1];
                out.data_mut()[ch * plane + y * w + x] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }
    Ok((out, Mask::new(h, w, valid)?))
}

/// Nearest-neighbour resampling of a binary mask.
pub fn warp_mask(mask: &Mask, transform: &PlanarTransform) -> Result<Mask> {
    let (h, w) = (mask.height(), mask.width());
    let inv = transform.inverse()?;
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let [qx, qy] = inv.apply([x as f64, y as f64]);
            let (rx, ry) = (libm::round(qx), libm::round(qy));
            if rx >= 0.0 && ry >= 0.0 && rx < w as f64 && ry < h as f64 {
                out[y * w + x] = mask.data()[ry as usize * w + rx as usize];
            }
        }
    }
    Mask::new(h, w, out)
}

/// Warps the central histology, expression and visibility mask.
pub fn warp(histology: &Tensor, expression: &Tensor, mask: &Mask, transform: &PlanarTransform) -> Result<AlignedCentral> {
    let (histology, validity) = warp_tensor(histology, transform)?;
    let (expression, _) = warp_tensor(expression, transform)?;
    let visibility = warp_mask(mask, transform)?.and(&validity);
    Ok(AlignedCentral { histology, expression, validity, visibility })
}
