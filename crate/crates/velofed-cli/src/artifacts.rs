//! Artifact plumbing: stamped JSON documents, atomic writes, and the
//! per-output-directory lock.
//!
//! Invariants:
//! - every artifact embeds a Stamp {config hash, seed, code version};
//! - readers refuse artifacts whose config hash differs from the current one;
//! - writes go to a temp file in the same directory then rename, so a crash
//!   never leaves a half-written artifact under the final name.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use velofed::{Error, Result};

/// Provenance carried by every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

impl Stamp {
    pub fn new(config_hash: &str, seed: u64) -> Stamp {
        Stamp {
            config_hash: config_hash.to_string(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// JSON envelope: stamp + module-defined payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub stamp: Stamp,
    pub payload: T,
}

/// Write bytes to `<path>.tmp` in the target directory, then rename over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.to_path_buf();
    let mut name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?
        .to_os_string();
    name.push(".tmp");
    tmp.set_file_name(name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize a stamped payload and write it atomically.
pub fn write_stamped<T: Serialize>(path: &Path, stamp: &Stamp, payload: &T) -> Result<()> {
    let doc = Stamped {
        stamp: stamp.clone(),
        payload,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Read a stamped artifact, refusing a config-hash mismatch.
pub fn read_stamped<T: DeserializeOwned>(path: &Path, expect: &Stamp) -> Result<Stamped<T>> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::config(format!("missing artifact {}: {e}", path.display()))
    })?;
    let doc: Stamped<T> = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("artifact {}: {e}", path.display())))?;
    if doc.stamp.config_hash != expect.config_hash {
        return Err(Error::config(format!(
            "artifact {} was produced under config {} but the current config is {}; \
             re-run the producing stage",
            path.display(),
            &doc.stamp.config_hash[..12.min(doc.stamp.config_hash.len())],
            &expect.config_hash[..12],
        )));
    }
    Ok(doc)
}

/// Exclusive lock on an output directory; released on drop.
///
/// Guards against concurrent invocations, not against crashes: a stale lock
/// after a kill must be removed by hand, and the error says so.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(out_dir: &Path) -> Result<LockGuard> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(".velofed-lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::invalid(
                format!(
                    "output directory {} is locked by another run (delete {} if stale)",
                    out_dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
