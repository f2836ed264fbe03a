//! Run configuration, command-line overrides and the config hash.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stdai_core::alignment::{RegistrationConfig, TransformFamily};
use stdai_core::metrics::Population;
use stdai_core::phantom::PhantomConfig;
use stdai_core::pipeline::{ReconstructConfig, Toggles, TrainConfig};

use crate::error::{Result, StdaiError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub toggles: Toggles,
    pub spacing: usize,
    /// Grid offset `[row, col]`.
    pub offset: [usize; 2],
    pub registration: RegistrationConfig,
    pub population: Population,
    /// Used by `synth` only.
    pub phantom: PhantomConfig,
    /// Directory of precomputed `section_<i>.stdf` feature maps.
    pub features: Option<String>,
    pub density_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            toggles: Toggles::all(),
            spacing: 2,
            offset: [0, 0],
            registration: RegistrationConfig::default(),
            population: Population::Unobserved,
            phantom: PhantomConfig::default(),
            features: None,
            density_bins: 64,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub toggles: Option<Toggles>,
    pub spacing: Option<usize>,
    pub offset: Option<[usize; 2]>,
    pub family: Option<TransformFamily>,
    pub literal_eq5: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| StdaiError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| StdaiError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.registration.ransac.seed = seed;
            self.phantom.seed = seed;
        }
        if let Some(t) = o.toggles {
            self.toggles = t;
        }
        if let Some(s) = o.spacing {
            self.spacing = s;
            self.phantom.spacing = s;
        }
        if let Some(off) = o.offset {
            self.offset = off;
        }
        if let Some(f) = o.family {
            self.registration.ransac.family = f;
        }
        if o.literal_eq5 {
            self.train.literal_eq5 = true;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StdaiError::Config(m));
        if self.spacing == 0 {
            return bad("spacing must be positive".into());
        }
        if self.offset[0] >= self.spacing || self.offset[1] >= self.spacing {
            return bad(format!("offset {:?} must be below the spacing {}", self.offset, self.spacing));
        }
        if self.density_bins == 0 {
            return bad("density_bins must be positive".into());
        }
        self.train.validate().map_err(|e| StdaiError::Config(e.to_string()))?;
        self.phantom.validate().map_err(|e| StdaiError::Config(e.to_string()))?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn reconstruct(&self) -> ReconstructConfig {
        ReconstructConfig {
            train: self.train.clone(),
            registration: self.registration.clone(),
            spacing: self.spacing,
            offset: (self.offset[0], self.offset[1]),
        }
    }
}
