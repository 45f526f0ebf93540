//! Output files are written to a temporary sibling and renamed into place,
//! so a failed command never leaves a half-written file. Files already
//! renamed by a command that later fails are removed by [`Outputs::rollback`].

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use stgraph::{Error, Result};

#[derive(Debug, Default)]
pub struct Outputs {
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn write<F>(&mut self, path: &Path, fill: F) -> Result<()>
    where
        F: FnOnce(&mut dyn Write) -> Result<()>,
    {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut builder = tempfile::Builder::new();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            builder.permissions(std::fs::Permissions::from_mode(0o644));
        }
        let mut tmp = builder.tempfile_in(dir).map_err(|e| Error::io(dir, e))?;
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            fill(&mut w)?;
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        self.written.push(path.to_path_buf());
        Ok(())
    }

    pub fn write_json<T: serde::Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        self.write(path, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w).map_err(|e| Error::io(path, e))
        })
    }

    /// Deletes every file written so far.
    pub fn rollback(self) {
        for p in self.written {
            if let Err(e) = std::fs::remove_file(&p) {
                log::warn!(target: "output", "could not remove {}: {e}", p.display());
            }
        }
    }
}
