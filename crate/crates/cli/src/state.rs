//! Stage stamps and the corpus-root lock, both under `<root>/.rwrforge/`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const STATE_DIR: &str = ".rwrforge";

/// What a completed stage ran on and what it wrote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn stamp_path(root: &Path, stage: &str) -> PathBuf {
    root.join(STATE_DIR).join("stamps").join(format!("{stage}.json"))
}

pub fn read_stamp(root: &Path, stage: &str) -> Option<Stamp> {
    let text = fs::read_to_string(stamp_path(root, stage)).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn write_stamp(root: &Path, stamp: &Stamp) -> Result<(), CliError> {
    let path = stamp_path(root, &stamp.stage);
    let mut text = serde_json::to_string_pretty(stamp).expect("stamps serialize");
    text.push('\n');
    write_atomic(&path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("partial");
    fs::File::create(&tmp).and_then(|mut f| f.write_all(bytes)).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Exclusive claim on a corpus root, released on drop.
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(root: &Path) -> Result<Self, CliError> {
        let dir = root.join(STATE_DIR);
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join("lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(CliError::Io(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
