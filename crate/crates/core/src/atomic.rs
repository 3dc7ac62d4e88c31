//! Whole-file writes that never leave a partial file behind.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to `path` via a temporary file in the same directory and
/// an atomic rename, creating missing parent directories.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e.to_string()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::file(path, e.to_string()))?;
    tmp.write_all(bytes).map_err(|e| Error::file(path, e.to_string()))?;
    tmp.persist(path).map_err(|e| Error::file(path, e.error.to_string()))?;
    Ok(())
}
