//! Store directory handling: one process at a time, whole-directory swaps.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use wordlearn::lexicon::{load_store, save_store, Lexicon};

use crate::CliError;

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "store".into());
    name.push(suffix);
    dir.with_file_name(name)
}

/// Exclusive lock on a store, held as `<store>.lock` next to it so the store
/// directory itself can be swapped while the lock is held.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    pub fn acquire(store: &Path) -> Result<Self, CliError> {
        let path = sibling(store, ".lock");
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Locked(store.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Restores a store left behind mid-swap by an interrupted run.
fn recover(store: &Path) -> Result<(), CliError> {
    let old = sibling(store, ".old");
    if !store.exists() && old.exists() {
        log::warn!("restoring {} from an interrupted save", store.display());
        fs::rename(&old, store)?;
    }
    Ok(())
}

pub fn open(store: &Path) -> Result<Lexicon, CliError> {
    recover(store)?;
    if !store.exists() {
        return Err(CliError::Config(format!("store {} does not exist", store.display())));
    }
    Ok(load_store(store)?)
}

pub fn open_or_new(store: &Path, fresh: impl FnOnce() -> Lexicon) -> Result<Lexicon, CliError> {
    recover(store)?;
    if store.exists() {
        Ok(load_store(store)?)
    } else {
        Ok(fresh())
    }
}

/// Writes the whole store into a temporary sibling and swaps it in, so an
/// interrupted run leaves the previous store intact.
pub fn save(lexicon: &Lexicon, store: &Path, _lock: &StoreLock) -> Result<(), CliError> {
    let tmp = sibling(store, ".tmp");
    let old = sibling(store, ".old");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    save_store(lexicon, &tmp)?;
    if store.exists() {
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(store, &old)?;
        fs::rename(&tmp, store)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&tmp, store)?;
    }
    Ok(())
}
