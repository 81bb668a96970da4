//! Exclusive output directories.

use std::fs::{self, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};

use rmm_core::RunConfig;

use crate::commands::CliError;

pub const LOCK_NAME: &str = ".rmm.lock";
pub const CONFIG_ECHO: &str = "config.txt";

/// An output directory held for the lifetime of the value.
#[derive(Debug)]
pub struct OutDir {
    path: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    /// Creates `path` if needed, takes its lock file and echoes `cfg`.
    pub fn acquire(path: &Path, cfg: &RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(path).map_err(rmm_core::Error::from)?;
        let lock = path.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Err(CliError::Locked(lock)),
            Err(e) => return Err(rmm_core::Error::from(e).into()),
        }
        let dir = OutDir {
            path: path.to_path_buf(),
            lock,
        };
        fs::write(dir.join(CONFIG_ECHO), cfg.render()).map_err(rmm_core::Error::from)?;
        Ok(dir)
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
