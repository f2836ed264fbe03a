//! Difference-of-Gaussians keypoints with gradient-orientation histogram descriptors.
//!
//! One octave at full resolution: `intervals + 3` Gaussian levels, extrema
//! taken in the middle `intervals` DoG levels over a 3x3x3 neighbourhood,
//! sub-pixel refinement in space only. Descriptors are 4x4 spatial cells of
//! 8 orientation bins, sampled in the keypoint's rotated frame.

use alloc::vec::Vec;
use core::f32::consts::PI;

use serde::{Deserialize, Serialize};

use crate::filter::{gaussian_blur, gradients, Plane};
use crate::{Error, Result};

pub const DESCRIPTOR_LEN: usize = 128;
const ORI_BINS: usize = 36;
const MIN_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub sigma0: f32,
    pub intervals: usize,
    /// Minimum |DoG| response for images scaled to `[0, 1]`.
    pub contrast_threshold: f32,
    /// Principal-curvature ratio bound for edge rejection.
    pub edge_ratio: f32,
    /// Descriptor cell width in units of keypoint sigma.
    pub cell_scale: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { sigma0: 1.2, intervals: 3, contrast_threshold: 0.004, edge_ratio: 10.0, cell_scale: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    pub row: f32,
    pub col: f32,
    pub sigma: f32,
    pub response: f32,
    /// Dominant gradient orientation in radians, `[0, 2pi)`.
    pub orientation: f32,
    /// Unit-norm descriptor.
    pub descriptor: [f32; DESCRIPTOR_LEN],
}

struct Level {
    sigma: f32,
    gx: Plane,
    gy: Plane,
}

/// Detects up to `max_count` keypoints, strongest first.
///
/// A featureless image yields an empty list.
pub fn detect_keypoints(image: &Plane, max_count: usize) -> Result<Vec<Keypoint>> {
    detect_keypoints_with(image, max_count, &DetectorConfig::default())
}

pub fn detect_keypoints_with(image: &Plane, max_count: usize, cfg: &DetectorConfig) -> Result<Vec<Keypoint>> {
    let (h, w) = (image.height, image.width);
    if h < MIN_DIM || w < MIN_DIM {
        return Err(Error::ImageTooSmall { height: h, width: w, min: MIN_DIM });
    }
    let k = libm::powf(2.0, 1.0 / cfg.intervals as f32);
    let sigmas: Vec<f32> = (0..cfg.intervals + 3).map(|i| cfg.sigma0 * libm::powf(k, i as f32)).collect();
    let gauss: Vec<Plane> = sigmas.iter().map(|&s| gaussian_blur(image, s)).collect();
    let dogs: Vec<Plane> = gauss
        .windows(2)
        .map(|p| Plane::new(h, w, p[1].data.iter().zip(&p[0].data).map(|(a, b)| a - b).collect()))
        .collect();
    let levels: Vec<Level> = (0..gauss.len())
        .map(|i| {
            let (gx, gy) = gradients(&gauss[i]);
            Level { sigma: sigmas[i], gx, gy }
        })
        .collect();

    let edge_limit = (cfg.edge_ratio + 1.0) * (cfg.edge_ratio + 1.0) / cfg.edge_ratio;
    let mut keypoints = Vec::new();
    for li in 1..=cfg.intervals {
        let (below, cur, above) = (&dogs[li - 1], &dogs[li], &dogs[li + 1]);
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let v = cur.at(y, x);
                if v.abs() < 0.5 * cfg.contrast_threshold || !is_extremum(v, [below, cur, above], y, x) {
                    continue;
                }
                let d = |dy: isize, dx: isize| cur.at((y as isize + dy) as usize, (x as isize + dx) as usize);
                let gxv = 0.5 * (d(0, 1) - d(0, -1));
                let gyv = 0.5 * (d(1, 0) - d(-1, 0));
                let dxx = d(0, 1) + d(0, -1) - 2.0 * v;
                let dyy = d(1, 0) + d(-1, 0) - 2.0 * v;
                let dxy = 0.25 * (d(1, 1) - d(-1, 1) - d(1, -1) + d(-1, -1));
                let det = dxx * dyy - dxy * dxy;
                let tr = dxx + dyy;
                if det <= 0.0 || tr * tr / det >= edge_limit {
                    continue;
                }
                let ox = -(dyy * gxv - dxy * gyv) / det;
                let oy = -(dxx * gyv - dxy * gxv) / det;
                let (ox, oy) = if ox.abs() <= 0.6 && oy.abs() <= 0.6 { (ox, oy) } else { (0.0, 0.0) };
                let response = v + 0.5 * (gxv * ox + gyv * oy);
                if response.abs() < cfg.contrast_threshold {
                    continue;
                }
                let (row, col) = (y as f32 + oy, x as f32 + ox);
                let level = &levels[li];
                for orientation in dominant_orientations(level, row, col) {
                    if let Some(descriptor) = describe(level, row, col, orientation, cfg.cell_scale) {
                        keypoints.push(Keypoint { row, col, sigma: level.sigma, response: response.abs(), orientation, descriptor });
                    }
                }
            }
        }
    }
    keypoints.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.row.total_cmp(&b.row))
            .then(a.col.total_cmp(&b.col))
            .then(a.orientation.total_cmp(&b.orientation))
    });
    keypoints.truncate(max_count);
    Ok(keypoints)
}

fn is_extremum(v: f32, planes: [&Plane; 3], y: usize, x: usize) -> bool {
    let (mut is_max, mut is_min) = (true, true);
    for (pi, p) in planes.iter().enumerate() {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                if pi == 1 && yy == y && xx == x {
                    continue;
                }
                let n = p.at(yy, xx);
                is_max &= v > n;
                is_min &= v < n;
            }
        }
        if !is_max && !is_min {
            return false;
        }
    }
    is_max || is_min
}

fn wrap_angle(a: f32) -> f32 {
    let t = a % (2.0 * PI);
    if t < 0.0 {
        t + 2.0 * PI
    } else {
        t
    }
}

fn dominant_orientations(level: &Level, row: f32, col: f32) -> Vec<f32> {
    let sw = 1.5 * level.sigma;
    let radius = libm::roundf(3.0 * sw) as isize;
    let (cy, cx) = (libm::roundf(row) as isize, libm::roundf(col) as isize);
    let (h, w) = (level.gx.height as isize, level.gx.width as isize);
    let mut hist = [0.0f32; ORI_BINS];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (y, x) = (cy + dy, cx + dx);
            if y < 0 || y >= h || x < 0 || x >= w {
                continue;
            }
            let gx = level.gx.at(y as usize, x as usize);
            let gy = level.gy.at(y as usize, x as usize);
            let mag = libm::hypotf(gx, gy);
            if mag == 0.0 {
                continue;
            }
            let weight = libm::expf(-((dx * dx + dy * dy) as f32) / (2.0 * sw * sw));
            let bin = (wrap_angle(libm::atan2f(gy, gx)) / (2.0 * PI) * ORI_BINS as f32) as usize % ORI_BINS;
            hist[bin] += weight * mag;
        }
    }
    for _ in 0..2 {
        let prev = hist;
        for i in 0..ORI_BINS {
            hist[i] = (prev[(i + ORI_BINS - 1) % ORI_BINS] + prev[i] + prev[(i + 1) % ORI_BINS]) / 3.0;
        }
    }
    let peak = hist.iter().copied().fold(0.0f32, f32::max);
    if peak <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..ORI_BINS {
        let (l, c, r) = (hist[(i + ORI_BINS - 1) % ORI_BINS], hist[i], hist[(i + 1) % ORI_BINS]);
        if c > l && c > r && c >= 0.8 * peak {
            let offset = 0.5 * (l - r) / (l - 2.0 * c + r);
            let bin = i as f32 + 0.5 + offset;
            out.push(wrap_angle(bin * 2.0 * PI / ORI_BINS as f32));
        }
    }
    out.truncate(2);
    out
}

fn describe(level: &Level, row: f32, col: f32, orientation: f32, cell_scale: f32) -> Option<[f32; DESCRIPTOR_LEN]> {
    const SAMPLES: usize = 16;
    let cell = cell_scale * level.sigma;
    let step = cell * 4.0 / SAMPLES as f32;
    let (s, c) = libm::sincosf(orientation);
    let sigma_w = 2.0 * cell;
    let mut hist = [0.0f32; DESCRIPTOR_LEN];
    for i in 0..SAMPLES {
        for j in 0..SAMPLES {
            let u = (j as f32 + 0.5 - SAMPLES as f32 / 2.0) * step;
            let v = (i as f32 + 0.5 - SAMPLES as f32 / 2.0) * step;
            let x = col + c * u - s * v;
            let y = row + s * u + c * v;
            if x < 0.0 || y < 0.0 || x > (level.gx.width - 1) as f32 || y > (level.gx.height - 1) as f32 {
                continue;
            }
            let gx = level.gx.bilinear(x, y);
            let gy = level.gy.bilinear(x, y);
            let mag = libm::hypotf(gx, gy) * libm::expf(-(u * u + v * v) / (2.0 * sigma_w * sigma_w));
            if mag == 0.0 {
                continue;
            }
            let angle = wrap_angle(libm::atan2f(gy, gx) - orientation);
            let ob = angle / (2.0 * PI) * 8.0;
            let cb_x = (j as f32 + 0.5) / 4.0 - 0.5;
            let cb_y = (i as f32 + 0.5) / 4.0 - 0.5;
            let (x0, y0, o0) = (libm::floorf(cb_x), libm::floorf(cb_y), libm::floorf(ob));
            let (fx, fy, fo) = (cb_x - x0, cb_y - y0, ob - o0);
            for (yy, wy) in [(y0 as isize, 1.0 - fy), (y0 as isize + 1, fy)] {
                if !(0..4).contains(&yy) {
                    continue;
                }
                for (xx, wx) in [(x0 as isize, 1.0 - fx), (x0 as isize + 1, fx)] {
                    if !(0..4).contains(&xx) {
                        continue;
                    }
                    for (oo, wo) in [(o0 as usize % 8, 1.0 - fo), ((o0 as usize + 1) % 8, fo)] {
                        hist[((yy as usize * 4) + xx as usize) * 8 + oo] += mag * wx * wy * wo;
                    }
                }
            }
        }
    }
    normalize(&mut hist)?;
    for v in &mut hist {
        *v = v.min(0.2);
    }
    normalize(&mut hist)?;
    Some(hist)
}

fn normalize(v: &mut [f32]) -> Option<()> {
    let n = libm::sqrt(v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()) as f32;
    if !(n > 1e-12) {
        return None;
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    Some(())
}

/// Cosine similarity of two descriptors.
pub fn descriptor_similarity(a: &Keypoint, b: &Keypoint) -> f32 {
    a.descriptor.iter().zip(&b.descriptor).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(h: usize, w: usize) -> Plane {
        let centers = [(12.0, 15.0, 2.0), (40.0, 22.0, 2.5), (30.0, 45.0, 1.8), (50.0, 50.0, 3.0), (20.0, 38.0, 2.2)];
        let mut p = Plane::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.1;
                for &(cy, cx, s) in &centers {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    v += 0.8 * libm::expf(-d2 / (2.0 * s * s));
                }
                p.data[y * w + x] = v;
            }
        }
        p
    }

    #[test]
    fn constant_image_has_no_keypoints() {
        let p = Plane::new(32, 32, vec![0.5; 1024]);
        assert!(detect_keypoints(&p, 100).unwrap().is_empty());
    }

    #[test]
    fn too_small_is_an_error() {
        let p = Plane::zeros(8, 32);
        assert!(matches!(detect_keypoints(&p, 10), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn blobs_are_found_with_unit_descriptors() {
        let kps = detect_keypoints(&blobs(64, 64), 50).unwrap();
        assert!(kps.len() >= 5, "{}", kps.len());
        for k in &kps {
            let n: f32 = k.descriptor.iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-5);
            assert!(k.row >= 0.0 && k.row < 64.0 && k.col >= 0.0 && k.col < 64.0);
        }
        for pair in kps.windows(2) {
            assert!(pair[0].response >= pair[1].response);
        }
        assert!(detect_keypoints(&blobs(64, 64), 3).unwrap().len() <= 3);
    }
}
