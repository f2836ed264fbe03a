//! Single-channel image helpers shared by registration and feature extraction.

use alloc::vec;
use alloc::vec::Vec;

/// A single-channel `f32` image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width, "plane data length");
        Self { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Edge-clamped access with signed coordinates.
    #[inline]
    pub fn clamped(&self, row: isize, col: isize) -> f32 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.data[r * self.width + c]
    }

    /// Bilinear sample at `(x, y) = (col, row)`, edge-clamped.
    pub fn bilinear(&self, x: f32, y: f32) -> f32 {
        let x0 = libm::floorf(x);
        let y0 = libm::floorf(y);
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let v00 = self.clamped(yi, xi);
        let v01 = self.clamped(yi, xi + 1);
        let v10 = self.clamped(yi + 1, xi);
        let v11 = self.clamped(yi + 1, xi + 1);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
    }

    /// Rotates by 90 degrees counter-clockwise: `out[W-1-c][r] = in[r][c]`.
    pub fn rot90(&self) -> Plane {
        let mut out = Plane::zeros(self.width, self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                out.data[(self.width - 1 - c) * self.height + r] = self.at(r, c);
            }
        }
        out
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = libm::ceilf(3.0 * sigma).max(1.0) as usize;
    let mut k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            libm::expf(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f32 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(src: &Plane, sigma: f32) -> Plane {
    if sigma <= 0.0 {
        return src.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (src.height, src.width);
    let mut tmp = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * src.clamped(y as isize, x as isize + i as isize - r);
            }
            tmp.data[y * w + x] = acc;
        }
    }
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp.clamped(y as isize + i as isize - r, x as isize);
            }
            out.data[y * w + x] = acc;
        }
    }
    out
}

/// Central-difference gradients `(d/dx, d/dy)`, edge-clamped.
pub fn gradients(src: &Plane) -> (Plane, Plane) {
    let (h, w) = (src.height, src.width);
    let mut gx = Plane::zeros(h, w);
    let mut gy = Plane::zeros(h, w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx.data[i] = 0.5 * (src.clamped(y, x + 1) - src.clamped(y, x - 1));
            gy.data[i] = 0.5 * (src.clamped(y + 1, x) - src.clamped(y - 1, x));
        }
    }
    (gx, gy)
}

/// Averages non-overlapping `factor x factor` blocks; dims must divide.
pub fn average_pool(src: &Plane, factor: usize) -> Plane {
    let (oh, ow) = (src.height / factor, src.width / factor);
    let mut out = Plane::zeros(oh, ow);
    let norm = 1.0 / (factor * factor) as f32;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0f32;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += src.at(oy * factor + dy, ox * factor + dx);
                }
            }
            out.data[oy * ow + ox] = acc * norm;
        }
    }
    out
}
