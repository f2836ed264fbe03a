//! Output directory layout.
//!
//! Every run writes under `<out>/<bundle id>-<config hash>-s<seed>/`, one
//! subdirectory per stage. A stage writes into `<stage>.partial` and renames
//! it once everything is on disk, so a failed stage leaves its partial output
//! behind and a finished one is never rewritten.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, StdaiError};

pub fn run_root(out: &Path, bundle_id: &str, config_hash: &str, seed: u64) -> PathBuf {
    out.join(format!("{bundle_id}-{}-s{seed}", &config_hash[..12]))
}

#[derive(Debug)]
pub struct StageDir {
    partial: PathBuf,
    done: PathBuf,
}

impl StageDir {
    pub fn create(root: &Path, stage: &str) -> Result<Self> {
        let done = root.join(stage);
        let partial = root.join(format!("{stage}.partial"));
        if done.exists() {
            return Err(StdaiError::Exists(done));
        }
        if partial.exists() {
            log::warn!("removing leftover {}", partial.display());
            fs::remove_dir_all(&partial).map_err(StdaiError::io(&partial))?;
        }
        fs::create_dir_all(&partial).map_err(StdaiError::io(&partial))?;
        Ok(Self { partial, done })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.partial.join(file)
    }

    pub fn finish(self) -> Result<PathBuf> {
        fs::rename(&self.partial, &self.done).map_err(StdaiError::io(&self.done))?;
        Ok(self.done)
    }
}

/// A finished stage directory, or a configuration error naming the stage to run first.
pub fn finished(root: &Path, stage: &str) -> Result<PathBuf> {
    let dir = root.join(stage);
    if dir.is_dir() {
        Ok(dir)
    } else {
        Err(StdaiError::Config(format!("{} not found; run `stdai {stage}` with the same bundle, config and seed first", dir.display())))
    }
}
