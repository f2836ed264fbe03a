use alloc::format;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TransformFamily {
    /// Rotation, isotropic scale and translation (4 degrees of freedom).
    #[default]
    Similarity,
    Affine,
}

impl TransformFamily {
    pub fn minimal_sample(self) -> usize {
        match self {
            Self::Similarity => 2,
            Self::Affine => 3,
        }
    }
}

impl core::str::FromStr for TransformFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity" => Ok(Self::Similarity),
            "affine" => Ok(Self::Affine),
            other => Err(Error::InvalidArgument(format!("unknown transform family `{other}`"))),
        }
    }
}

/// 2x3 matrix `[a b tx; c d ty]` acting on `(x, y) = (col, row)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarTransform {
    pub matrix: [f64; 6],
    pub family: TransformFamily,
}

impl PlanarTransform {
    pub const MIN_DET: f64 = 1e-8;

    pub fn new(matrix: [f64; 6], family: TransformFamily) -> Result<Self> {
        let t = Self { matrix, family };
        if !(t.det().abs() > Self::MIN_DET) || matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularTransform(t.det()));
        }
        Ok(t)
    }

    pub fn identity() -> Self {
        Self { matrix: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0], family: TransformFamily::Similarity }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { matrix: [1.0, 0.0, tx, 0.0, 1.0, ty], family: TransformFamily::Similarity }
    }

    /// Rotation by `angle` radians and scaling about `center`, then translation.
    pub fn similarity_about(center: [f64; 2], angle: f64, scale: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = libm::sincos(angle);
        let (a, b) = (scale * c, -scale * s);
        let (cc, d) = (scale * s, scale * c);
        let ox = center[0] - a * center[0] - b * center[1] + tx;
        let oy = center[1] - cc * center[0] - d * center[1] + ty;
        Self { matrix: [a, b, ox, cc, d, oy], family: TransformFamily::Similarity }
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0] * m[4] - m[1] * m[3]
    }

    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.matrix;
        [m[0] * p[0] + m[1] * p[1] + m[2], m[3] * p[0] + m[4] * p[1] + m[5]]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.det();
        if !(det.abs() > Self::MIN_DET) {
            return Err(Error::SingularTransform(det));
        }
        let [a, b, tx, c, d, ty] = self.matrix;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(Self { matrix: [ia, ib, -(ia * tx + ib * ty), ic, id, -(ic * tx + id * ty)], family: self.family })
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let [a, b, tx, c, d, ty] = self.matrix;
        let [e, f, ux, g, h, uy] = other.matrix;
        let family =
            if self.family == TransformFamily::Affine || other.family == TransformFamily::Affine {
                TransformFamily::Affine
            } else {
                TransformFamily::Similarity
            };
        Self {
            matrix: [a * e + b * g, a * f + b * h, a * ux + b * uy + tx, c * e + d * g, c * f + d * h, c * ux + d * uy + ty],
            family,
        }
    }

    /// Mean distance between where `self` and `other` send the image corners.
    pub fn corner_error(&self, other: &Self, height: usize, width: usize) -> f64 {
        let (w, h) = ((width - 1) as f64, (height - 1) as f64);
        let corners = [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]];
        corners
            .iter()
            .map(|&p| {
                let (a, b) = (self.apply(p), other.apply(p));
                libm::hypot(a[0] - b[0], a[1] - b[1])
            })
            .sum::<f64>()
            / 4.0
    }
}
