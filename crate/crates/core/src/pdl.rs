//! Domain-alignment layers: zero-initialized channel-wise affine maps
//! `(1 + a) * f + b` placed after convolution blocks of a frozen backbone.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelParams, PdlSite};
use crate::{Error, Result, Tensor};

/// `(1 + a[c]) * f[c, h, w] + b[c]`.
pub fn pdl_apply(f: &Tensor, a: &[f32], b: &[f32]) -> Result<Tensor> {
    crate::tape::channel_affine_forward(f, a, b)
}

/// Adds zero-initialized scale/shift pairs at each listed block.
///
/// Backbone tensors are not touched. An empty list is a no-op.
pub fn insert_pdls(params: &mut ModelParams, sites: &[usize]) -> Result<()> {
    let mut seen = Vec::with_capacity(sites.len());
    for &site in sites {
        if params.config().site_channels(site).is_none() {
            return Err(Error::UnknownSite(site));
        }
        if seen.contains(&site) || params.pdls.contains_key(&site) {
            return Err(Error::DuplicateSite(site));
        }
        seen.push(site);
    }
    for &site in sites {
        let c = params.config().site_channels(site).expect("checked above");
        let scale = params.store.add(format!("pdl{site}.scale"), Tensor::zeros(&[c]), true);
        let shift = params.store.add(format!("pdl{site}.shift"), Tensor::zeros(&[c]), true);
        params.pdls.insert(site, PdlSite { scale, shift });
    }
    Ok(())
}

/// Every block output of the configured network.
pub fn all_sites(params: &ModelParams) -> Vec<usize> {
    (0..params.config().block_count()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    FmdrCentral,
    FmdrAdjacent,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "fmdr_central" => Ok(Stage::FmdrCentral),
            "fmdr_adjacent" => Ok(Stage::FmdrAdjacent),
            other => Err(Error::UnknownStage(String::from(other))),
        }
    }
}

/// Sets freeze flags for a training stage.
///
/// Pretraining trains everything; the central refinement branch trains only
/// the head; the adjacent branch trains the head and the PDLs.
pub fn trainable_subset(params: &mut ModelParams, stage: Stage) {
    let head = params.head_ids();
    let pdl: Vec<_> = params.pdls.values().flat_map(|s| [s.scale, s.shift]).collect();
    let ids: Vec<_> = params.store.ids().collect();
    for id in ids {
        let on = match stage {
            Stage::Pretrain => true,
            Stage::FmdrCentral => head.contains(&id),
            Stage::FmdrAdjacent => head.contains(&id) || pdl.contains(&id),
        };
        params.store.set_trainable(id, on);
    }
}
