//! Brute-force confidence propagation: every output pixel sums the Keys
//! kernel over the whole lattice, with out-of-range nodes replaced by the
//! nearest edge node.

#![allow(dead_code)]

pub fn keys(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        1.5 * x.powi(3) - 2.5 * x.powi(2) + 1.0
    } else if x < 2.0 {
        -0.5 * x.powi(3) + 2.5 * x.powi(2) - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// `coarse` is `rows x cols` in raster order; node `(i, j)` sits at pixel
/// `(i * s + r0, j * s + c0)`.
pub fn propagate(coarse: &[f64], rows: usize, cols: usize, h: usize, w: usize, s: usize, r0: usize, c0: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = (y as f64 - r0 as f64) / s as f64;
            let v = (x as f64 - c0 as f64) / s as f64;
            let mut acc = 0.0;
            for i in -4..rows as i64 + 4 {
                for j in -4..cols as i64 + 4 {
                    let k = keys(u - i as f64) * keys(v - j as f64);
                    if k != 0.0 {
                        let ci = i.clamp(0, rows as i64 - 1) as usize;
                        let cj = j.clamp(0, cols as i64 - 1) as usize;
                        acc += k * coarse[ci * cols + cj];
                    }
                }
            }
            out[y * w + x] = acc.clamp(0.0, 1.0);
        }
    }
    out
}
