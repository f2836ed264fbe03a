use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transform::{PlanarTransform, TransformFamily};
use crate::{Error, Result};

/// A point pair `src -> dst` in `(x, y) = (col, row)` coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub src: [f64; 2],
    pub dst: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub family: TransformFamily,
    /// Inlier reprojection threshold in pixels.
    pub threshold: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { family: TransformFamily::Similarity, threshold: 2.0, max_iters: 2000, confidence: 0.995, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub transform: PlanarTransform,
    /// Indices into the caller's correspondence list, ascending.
    pub inliers: Vec<usize>,
    pub inlier_ratio: f64,
    /// Set when fewer than 20% of the correspondences are inliers.
    pub low_inlier_ratio: bool,
    pub iterations: usize,
}

const LOW_INLIER_RATIO: f64 = 0.2;

/// Robustly fits a planar transform mapping `src` onto `dst`.
///
/// Correspondences are put in a canonical order and the sampling seed is
/// mixed with a hash of that order, so the result does not depend on the
/// order of `matches`.
pub fn estimate_transform_ransac(matches: &[Correspondence], cfg: &RansacConfig) -> Result<RansacResult> {
    let s = cfg.family.minimal_sample();
    if matches.len() < s {
        return Err(Error::TooFewMatches { needed: s, got: matches.len() });
    }
    let all: Vec<usize> = (0..matches.len()).collect();
    // A fully collinear match set is rejected for either family: a similarity
    // could be fitted, but nothing in the data constrains it off the line.
    if is_degenerate(matches, &all, TransformFamily::Affine) {
        return Err(Error::DegenerateConfiguration);
    }

    let mut order = all;
    order.sort_by(|&i, &j| {
        let (a, b) = (&matches[i], &matches[j]);
        a.src[0]
            .total_cmp(&b.src[0])
            .then(a.src[1].total_cmp(&b.src[1]))
            .then(a.dst[0].total_cmp(&b.dst[0]))
            .then(a.dst[1].total_cmp(&b.dst[1]))
    });
    let sorted: Vec<Correspondence> = order.iter().map(|&i| matches[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fingerprint(&sorted));

    let n = sorted.len();
    let mut best: Option<(PlanarTransform, Vec<usize>, f64)> = None;
    let mut needed = cfg.max_iters;
    let mut iterations = 0;
    while iterations < needed.min(cfg.max_iters) {
        iterations += 1;
        let pick: Vec<usize> = sample(&mut rng, n, s).into_vec();
        if is_degenerate(&sorted, &pick, cfg.family) {
            continue;
        }
        let Ok(model) = fit(&sorted, &pick, cfg.family) else { continue };
        let (inl, cost) = inliers_of(&model, &sorted, cfg.threshold);
        let better = match &best {
            None => true,
            Some((_, bi, bc)) => inl.len() > bi.len() || (inl.len() == bi.len() && cost < *bc),
        };
        if better {
            let w = inl.len() as f64 / n as f64;
            needed = required_iterations(w, s, cfg.confidence).min(cfg.max_iters);
            best = Some((model, inl, cost));
        }
    }
    let Some((mut model, mut inl, _)) = best else {
        return Err(Error::DegenerateConfiguration);
    };

    for _ in 0..5 {
        if inl.len() < s || is_degenerate(&sorted, &inl, cfg.family) {
            break;
        }
        let Ok(refit) = fit(&sorted, &inl, cfg.family) else { break };
        let (next, _) = inliers_of(&refit, &sorted, cfg.threshold);
        if next.len() < inl.len() {
            break;
        }
        let stable = next == inl;
        model = refit;
        inl = next;
        if stable {
            break;
        }
    }

    let mut inliers: Vec<usize> = inl.iter().map(|&i| order[i]).collect();
    inliers.sort_unstable();
    let inlier_ratio = inliers.len() as f64 / n as f64;
    let low_inlier_ratio = inlier_ratio < LOW_INLIER_RATIO;
    if low_inlier_ratio {
        log::warn!("RANSAC inlier ratio {inlier_ratio:.3} is below {LOW_INLIER_RATIO}");
    }
    Ok(RansacResult { transform: model, inliers, inlier_ratio, low_inlier_ratio, iterations })
}

fn required_iterations(inlier_fraction: f64, s: usize, confidence: f64) -> usize {
    let p_good = libm::pow(inlier_fraction, s as f64);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return usize::MAX;
    }
    let k = libm::log(1.0 - confidence) / libm::log(1.0 - p_good);
    libm::ceil(k).max(1.0) as usize
}

fn fingerprint(m: &[Correspondence]) -> u64 {
    // FNV-1a over the coordinate bits.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for c in m {
        for v in [c.src[0], c.src[1], c.dst[0], c.dst[1]] {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

fn inliers_of(t: &PlanarTransform, m: &[Correspondence], threshold: f64) -> (Vec<usize>, f64) {
    let mut inl = Vec::new();
    let mut cost = 0.0;
    let t2 = threshold * threshold;
    for (i, c) in m.iter().enumerate() {
        let p = t.apply(c.src);
        let e2 = (p[0] - c.dst[0]) * (p[0] - c.dst[0]) + (p[1] - c.dst[1]) * (p[1] - c.dst[1]);
        if e2 <= t2 {
            inl.push(i);
            cost += e2;
        }
    }
    (inl, cost)
}

fn spread(points: impl Iterator<Item = [f64; 2]> + Clone) -> (f64, f64) {
    let n = points.clone().count() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for p in points.clone() {
        mx += p[0];
        my += p[1];
    }
    mx /= n;
    my /= n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = libm::sqrt((tr * tr - 4.0 * det).max(0.0));
    ((tr - disc) / 2.0, (tr + disc) / 2.0)
}

/// Coincident points (similarity) or collinear points (affine).
fn is_degenerate(m: &[Correspondence], idx: &[usize], family: TransformFamily) -> bool {
    let src = idx.iter().map(|&i| m[i].src);
    let dst = idx.iter().map(|&i| m[i].dst);
    match family {
        TransformFamily::Similarity => spread(src).1 < 1e-12,
        TransformFamily::Affine => {
            let (lo, hi) = spread(src);
            let (dlo, dhi) = spread(dst);
            hi < 1e-12 || lo <= 1e-9 * hi || dhi < 1e-12 || dlo <= 1e-9 * dhi
        }
    }
}

/// Least-squares fit on the selected correspondences (exact for minimal sets).
fn fit(m: &[Correspondence], idx: &[usize], family: TransformFamily) -> Result<PlanarTransform> {
    let n = idx.len() as f64;
    let (mut sx, mut sy, mut dx, mut dy) = (0.0, 0.0, 0.0, 0.0);
    for &i in idx {
        sx += m[i].src[0];
        sy += m[i].src[1];
        dx += m[i].dst[0];
        dy += m[i].dst[1];
    }
    let (sx, sy, dx, dy) = (sx / n, sy / n, dx / n, dy / n);
    let matrix = match family {
        TransformFamily::Similarity => {
            let (mut num_a, mut num_b, mut den) = (0.0, 0.0, 0.0);
            for &i in idx {
                let (px, py) = (m[i].src[0] - sx, m[i].src[1] - sy);
                let (qx, qy) = (m[i].dst[0] - dx, m[i].dst[1] - dy);
                num_a += px * qx + py * qy;
                num_b += px * qy - py * qx;
                den += px * px + py * py;
            }
            if den <= 0.0 {
                return Err(Error::DegenerateConfiguration);
            }
            let (a, b) = (num_a / den, num_b / den);
            [a, -b, dx - (a * sx - b * sy), b, a, dy - (b * sx + a * sy)]
        }
        TransformFamily::Affine => {
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            let (mut cxx, mut cxy, mut cyx, mut cyy) = (0.0, 0.0, 0.0, 0.0);
            for &i in idx {
                let (px, py) = (m[i].src[0] - sx, m[i].src[1] - sy);
                let (qx, qy) = (m[i].dst[0] - dx, m[i].dst[1] - dy);
                sxx += px * px;
                sxy += px * py;
                syy += py * py;
                cxx += qx * px;
                cxy += qx * py;
                cyx += qy * px;
                cyy += qy * py;
            }
            let det = sxx * syy - sxy * sxy;
            if det.abs() <= 1e-12 * (sxx + syy) * (sxx + syy) {
                return Err(Error::DegenerateConfiguration);
            }
            let (i00, i01, i11) = (syy / det, -sxy / det, sxx / det);
            let (a, b) = (cxx * i00 + cxy * i01, cxx * i01 + cxy * i11);
            let (c, d) = (cyx * i00 + cyy * i01, cyx * i01 + cyy * i11);
            [a, b, dx - a * sx - b * sy, c, d, dy - c * sx - d * sy]
        }
    };
    PlanarTransform::new(matrix, family)
}
