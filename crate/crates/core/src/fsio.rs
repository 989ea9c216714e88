//! Filesystem helpers shared by checkpointing, reporting, and the CLI.

use std::fs;
use std::io;
use std::path::Path;

/// Write `bytes` to `path` atomically: the data lands in a sibling temp file
/// first and is renamed over the target, so readers never observe a partial
/// file. The temp file stays in the target's directory to keep the rename on
/// one filesystem.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let name = path.file_name().ok_or_else(|| {
        io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("{} has no file name", path.display()),
        )
    })?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    match fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}
