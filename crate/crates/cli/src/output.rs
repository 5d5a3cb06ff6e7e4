use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

/// Files written by one command. Unless [`Outputs::commit`] is called, the
/// files (and directories this command created) are removed on drop.
pub struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new(root: &Path) -> Result<Self> {
        let mut out = Self {
            root: root.to_path_buf(),
            files: Vec::new(),
            dirs: Vec::new(),
            committed: false,
        };
        out.ensure_dir(root)?;
        Ok(out)
    }

    fn ensure_dir(&mut self, dir: &Path) -> Result<()> {
        if !dir.exists() {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            self.dirs.push(dir.to_path_buf());
        }
        Ok(())
    }

    /// Registers `rel` (relative to the output root) and returns its path.
    pub fn path(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            self.ensure_dir(&parent.to_path_buf())?;
        }
        self.files.push(p.clone());
        Ok(p)
    }

    pub fn create(&mut self, rel: impl AsRef<Path>) -> Result<BufWriter<File>> {
        let p = self.path(rel)?;
        let f = File::create(&p).with_context(|| format!("cannot create {}", p.display()))?;
        Ok(BufWriter::new(f))
    }

    pub fn write_json<V: Serialize>(&mut self, rel: impl AsRef<Path>, value: &V) -> Result<()> {
        let mut w = self.create(rel)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// Writes `{command}.run.json` and keeps every output.
    pub fn commit(mut self, command: &str, config: &RunConfig) -> Result<()> {
        let rel: Vec<String> = self
            .files
            .iter()
            .filter_map(|p| p.strip_prefix(&self.root).ok())
            .map(|p| p.display().to_string())
            .collect();
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            checkpoint_format: miktst_core::train::FORMAT_VERSION,
            config_sha256: config.hash(),
            seed: config.seed,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            outputs: rel,
            config,
        };
        self.write_json(format!("{command}.run.json"), &manifest)?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    checkpoint_format: u32,
    config_sha256: String,
    seed: u64,
    created_at: String,
    outputs: Vec<String>,
    config: &'a RunConfig,
}
