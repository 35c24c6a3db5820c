//! Lock files and atomic writes.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

/// Exclusive marker file, removed on drop.
#[derive(Debug)]
pub struct LockFile {
    path: PathBuf,
}

impl LockFile {
    /// Fail immediately if the lock is held.
    pub fn try_acquire(path: &Path) -> io::Result<LockFile> {
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(path)?;
        writeln!(f, "{}", std::process::id())?;
        Ok(LockFile { path: path.to_path_buf() })
    }

    /// Retry for up to ~10 s.
    pub fn acquire(path: &Path) -> io::Result<LockFile> {
        for _ in 0..2000 {
            match Self::try_acquire(path) {
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => thread::sleep(Duration::from_millis(5)),
                other => return other,
            }
        }
        Err(io::Error::new(io::ErrorKind::TimedOut, format!("{} held too long", path.display())))
    }
}

impl Drop for LockFile {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Replace `path` with `bytes` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
