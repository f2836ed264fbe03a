//! Cross-section alignment: keypoint registration of the central section
//! into each adjacent section's frame, and warping of the central maps.

mod keypoints;
mod matching;
mod ransac;
mod transform;
mod warp;

pub use keypoints::{descriptor_similarity, detect_keypoints, detect_keypoints_with, DetectorConfig, Keypoint, DESCRIPTOR_LEN};
pub use matching::{match_descriptors, DescriptorMatch};
pub use ransac::{estimate_transform_ransac, Correspondence, RansacConfig, RansacResult};
pub use transform::{PlanarTransform, TransformFamily};
pub use warp::{warp, warp_mask, warp_tensor, AlignedCentral};

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::filter::Plane;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub max_keypoints: usize,
    pub ratio: f32,
    pub detector: DetectorConfig,
    pub ransac: RansacConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self { max_keypoints: 500, ratio: 0.8, detector: DetectorConfig::default(), ransac: RansacConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    /// Maps central-frame coordinates into the adjacent frame.
    pub transform: PlanarTransform,
    pub ransac: RansacResult,
    pub keypoints: (usize, usize),
    pub matches: usize,
}

/// Estimates the transform taking `central` onto `adjacent`.
pub fn register(central: &Plane, adjacent: &Plane, cfg: &RegistrationConfig) -> Result<Registration> {
    let kc = detect_keypoints_with(central, cfg.max_keypoints, &cfg.detector)?;
    let ka = detect_keypoints_with(adjacent, cfg.max_keypoints, &cfg.detector)?;
    let matches = match_descriptors(&kc, &ka, cfg.ratio);
    let corr: Vec<Correspondence> = matches
        .iter()
        .map(|m| Correspondence {
            src: [kc[m.query].col as f64, kc[m.query].row as f64],
            dst: [ka[m.train].col as f64, ka[m.train].row as f64],
        })
        .collect();
    let ransac = estimate_transform_ransac(&corr, &cfg.ransac)?;
    Ok(Registration { transform: ransac.transform, keypoints: (kc.len(), ka.len()), matches: corr.len(), ransac })
}
