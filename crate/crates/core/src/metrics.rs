//! Reconstruction metrics and expression-density diagnostics.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::filter::Plane;
use crate::sample::Mask;
use crate::{Error, Result, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f32 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Which pixels enter a score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    All,
    #[default]
    Unobserved,
}

impl Population {
    pub fn includes(self, mask: &Mask, i: usize) -> bool {
        match self {
            Population::All => true,
            Population::Unobserved => !mask.is_set(i),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Population::All => "all",
            Population::Unobserved => "unobserved",
        }
    }
}

fn check_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape { op: "metric", detail: alloc::format!("{} vs {} values", a.len(), b.len()) });
    }
    Ok(())
}

pub fn mse(pred: &[f32], truth: &[f32]) -> Result<f64> {
    check_len(pred, truth)?;
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let d = (p - t) as f64;
            d * d
        })
        .sum();
    Ok(s / pred.len() as f64)
}

/// `10 log10(peak^2 / MSE)`; infinite when the inputs agree exactly.
pub fn psnr(pred: &[f32], truth: &[f32], peak: f64) -> Result<f64> {
    let m = mse(pred, truth)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(peak * peak / m))
}

pub fn mae(pred: &[f32], truth: &[f32]) -> Result<f64> {
    check_len(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(&p, &t)| ((p - t) as f64).abs()).sum::<f64>() / pred.len() as f64)
}

/// Pearson correlation.
pub fn pcc(pred: &[f32], truth: &[f32]) -> Result<f64> {
    check_len(pred, truth)?;
    let n = pred.len() as f64;
    let mp = pred.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mt = truth.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sp, mut st, mut spt) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        let (dp, dt) = (p as f64 - mp, t as f64 - mt);
        sp += dp * dp;
        st += dt * dt;
        spt += dp * dt;
    }
    if sp == 0.0 {
        return Err(Error::ZeroVariance("prediction"));
    }
    if st == 0.0 {
        return Err(Error::ZeroVariance("truth"));
    }
    Ok((spt / libm::sqrt(sp * st)).clamp(-1.0, 1.0))
}

/// Mean local structural similarity over every fully contained 11x11
/// Gaussian window. With `centers`, only windows whose centre pixel is set
/// in `centers` contribute.
pub fn ssim(pred: &Plane, truth: &Plane, centers: Option<&Mask>) -> Result<f64> {
    let (h, w) = (truth.height, truth.width);
    if (pred.height, pred.width) != (h, w) {
        return Err(Error::Shape { op: "ssim", detail: alloc::format!("{}x{} vs {h}x{w}", pred.height, pred.width) });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { height: h, width: w, min: SSIM_WINDOW });
    }
    let r = SSIM_WINDOW / 2;
    let sigma = SSIM_SIGMA as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r as f64;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    let (mut total, mut count) = (0.0f64, 0usize);
    for cy in r..h - r {
        for cx in r..w - r {
            if let Some(m) = centers {
                if !m.is_set(cy * w + cx) {
                    continue;
                }
            }
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, ky) in k.iter().enumerate() {
                for (dx, kx) in k.iter().enumerate() {
                    let i = (cy + dy - r) * w + cx + dx - r;
                    let (x, y) = (pred.data[i] as f64, truth.data[i] as f64);
                    let wt = ky * kx;
                    mx += wt * x;
                    my += wt * y;
                    sxx += wt * x * x;
                    syy += wt * y * y;
                    sxy += wt * x * y;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyObservedSet);
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub pcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub population: Population,
    pub per_gene: Vec<Scores>,
    pub mean: Scores,
    /// Population standard deviation across genes.
    pub sd: Scores,
}

fn mean_sd(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, libm::sqrt(var))
}

/// Scores every gene of a `[G, H, W]` prediction against the truth.
///
/// `mask` marks measured pixels; with [`Population::Unobserved`] they are
/// dropped from every metric, and SSIM windows are centred on unobserved
/// pixels only.
pub fn evaluate(pred: &Tensor, truth: &Tensor, mask: &Mask, population: Population) -> Result<MetricsReport> {
    let (g, h, w) = truth.dims3()?;
    if pred.shape() != truth.shape() || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape {
            op: "evaluate",
            detail: alloc::format!("pred {:?}, truth {:?}, mask {}x{}", pred.shape(), truth.shape(), mask.height(), mask.width()),
        });
    }
    let keep: Vec<usize> = (0..h * w).filter(|&i| population.includes(mask, i)).collect();
    if keep.is_empty() {
        return Err(Error::EmptyObservedSet);
    }
    let centers = match population {
        Population::All => None,
        Population::Unobserved => Some(mask.invert()),
    };
    let mut per_gene = Vec::with_capacity(g);
    for c in 0..g {
        let (p, t) = (pred.channel(c), truth.channel(c));
        let ps: Vec<f32> = keep.iter().map(|&i| p[i]).collect();
        let ts: Vec<f32> = keep.iter().map(|&i| t[i]).collect();
        let s = ssim(&Plane::new(h, w, p.to_vec()), &Plane::new(h, w, t.to_vec()), centers.as_ref())?;
        per_gene.push(Scores { psnr: psnr(&ps, &ts, 1.0)?, ssim: s, mae: mae(&ps, &ts)?, pcc: pcc(&ps, &ts)? });
    }
    let field = |f: fn(&Scores) -> f64| mean_sd(per_gene.iter().map(f));
    let (pm, psd) = field(|s| s.psnr);
    let (sm, ssd) = field(|s| s.ssim);
    let (mm, msd) = field(|s| s.mae);
    let (cm, csd) = field(|s| s.pcc);
    Ok(MetricsReport {
        population,
        mean: Scores { psnr: pm, ssim: sm, mae: mm, pcc: cm },
        sd: Scores { psnr: psd, ssim: ssd, mae: msd, pcc: csd },
        per_gene,
    })
}

/// `|pred - truth|` for one channel.
pub fn error_map(pred: &[f32], truth: &[f32], height: usize, width: usize) -> Plane {
    Plane::new(height, width, pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub bin_centers: Vec<f64>,
    /// Histogram scaled to unit area.
    pub histogram: Vec<f64>,
    /// Gaussian kernel density estimate at the bin centres.
    pub smoothed: Vec<f64>,
}

/// Normalized histogram plus a Silverman-bandwidth kernel density.
pub fn expression_density(values: &[f32], bins: usize) -> Result<Density> {
    if bins == 0 {
        return Err(Error::InvalidArgument(alloc::string::String::from("bins must be positive")));
    }
    let lo = values.iter().fold(f32::INFINITY, |m, &v| m.min(v)) as f64;
    let hi = values.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    if values.len() < 2 || !(hi > lo) {
        return Err(Error::ZeroVariance("expression values"));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v as f64 - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = values.len() as f64;
    let histogram: Vec<f64> = counts.iter().map(|&c| c as f64 / (n * width)).collect();
    let bin_centers: Vec<f64> = (0..bins).map(|i| lo + (i as f64 + 0.5) * width).collect();
    let (_, sd) = mean_sd(values.iter().map(|&v| v as f64));
    let bw = (1.06 * sd * libm::pow(n, -0.2)).max(1e-12);
    let norm = 1.0 / (n * bw * libm::sqrt(2.0 * core::f64::consts::PI));
    let smoothed = bin_centers
        .iter()
        .map(|&x| {
            norm * values
                .iter()
                .map(|&v| {
                    let z = (x - v as f64) / bw;
                    libm::exp(-0.5 * z * z)
                })
                .sum::<f64>()
        })
        .collect();
    Ok(Density { bin_centers, histogram, smoothed })
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f32], b: &[f32]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f32::total_cmp);
    b.sort_by(f32::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}
