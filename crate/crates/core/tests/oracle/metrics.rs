//! Direct-formula metric implementations in f64, written without reference
//! to the library code.

#![allow(dead_code)]

pub fn psnr(p: &[f64], t: &[f64]) -> f64 {
    let mse = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn mae(p: &[f64], t: &[f64]) -> f64 {
    p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64
}

pub fn pcc(p: &[f64], t: &[f64]) -> f64 {
    let n = p.len() as f64;
    let (mp, mt) = (p.iter().sum::<f64>() / n, t.iter().sum::<f64>() / n);
    let cov: f64 = p.iter().zip(t).map(|(a, b)| (a - mp) * (b - mt)).sum();
    let vp: f64 = p.iter().map(|a| (a - mp).powi(2)).sum();
    let vt: f64 = t.iter().map(|b| (b - mt).powi(2)).sum();
    cov / (vp * vt).sqrt()
}

/// Sliding 11x11 window with a directly evaluated 2-D Gaussian (sigma 1.5),
/// constants `(0.01 L)^2`, `(0.03 L)^2` for `L = 1`. Only windows whose
/// centre satisfies `keep` are averaged.
pub fn ssim(p: &[f64], t: &[f64], h: usize, w: usize, keep: impl Fn(usize) -> bool) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut win = [[0.0f64; 11]; 11];
    let mut z = 0.0;
    for (dy, row) in win.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (a, b) = (dy as f64 - 5.0, dx as f64 - 5.0);
            *v = (-(a * a + b * b) / (2.0 * 1.5 * 1.5)).exp();
            z += *v;
        }
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for cy in 5..h - 5 {
        for cx in 5..w - 5 {
            if !keep(cy * w + cx) {
                continue;
            }
            let mut m = [0.0f64; 5];
            for dy in 0..11 {
                for dx in 0..11 {
                    let i = (cy + dy - 5) * w + (cx + dx - 5);
                    let k = win[dy][dx] / z;
                    m[0] += k * p[i];
                    m[1] += k * t[i];
                    m[2] += k * p[i] * p[i];
                    m[3] += k * t[i] * t[i];
                    m[4] += k * p[i] * t[i];
                }
            }
            let (mx, my) = (m[0], m[1]);
            let (vx, vy, cxy) = (m[2] - mx * mx, m[3] - my * my, m[4] - mx * my);
            sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            n += 1;
        }
    }
    sum / n as f64
}
