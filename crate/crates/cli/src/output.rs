//! All-or-nothing output files.
//!
//! Commands write every output under a temporary name first and rename the
//! whole set only once the command has succeeded. Dropping an uncommitted
//! [`Staging`] deletes the temporaries, so a failed run leaves no partial
//! files behind.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

#[derive(Debug, Default)]
pub struct Staging {
    pending: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl Staging {
    pub fn new() -> Self {
        Self::default()
    }

    /// Temporary path to write instead of `target`; renamed on commit.
    pub fn stage(&mut self, target: &Path) -> Result<PathBuf> {
        let name = target
            .file_name()
            .with_context(|| format!("output path {} has no file name", target.display()))?
            .to_string_lossy();
        let tmp = target.with_file_name(format!(".{name}.partial"));
        self.register(tmp.clone(), target.to_path_buf());
        Ok(tmp)
    }

    /// Tracks a temporary file written by someone else (e.g. a checkpoint sidecar).
    pub fn register(&mut self, tmp: PathBuf, target: PathBuf) {
        self.pending.push((tmp, target));
    }

    pub fn write(&mut self, target: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
        let tmp = self.stage(target)?;
        fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))
    }

    /// Moves every staged file into place, returning the final paths.
    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        let mut done = Vec::with_capacity(self.pending.len());
        for (tmp, target) in &self.pending {
            fs::rename(tmp, target).with_context(|| format!("moving {} into place", target.display()))?;
            done.push(target.clone());
        }
        self.committed = true;
        Ok(done)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            for (tmp, _) in &self.pending {
                let _ = fs::remove_file(tmp);
            }
        }
    }
}
