use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Version of the JSON layouts written by this binary.
pub const SCHEMA_VERSION: u32 = 1;

/// Exclusive writer lock on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Validation(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Io(format!("cannot create {}: {e}", path.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes files into the output directory, each tagged with the manifest hash.
pub struct Writer {
    pub dir: PathBuf,
    pub hash: String,
    files: Vec<String>,
}

impl Writer {
    pub fn new(dir: PathBuf, hash: String) -> Self {
        Writer {
            dir,
            hash,
            files: Vec::new(),
        }
    }

    /// CSV with a leading `# manifest: <hash>` comment line.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut f = File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
        writeln!(f, "# manifest: {}", self.hash).map_err(io)?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(header).map_err(|e| CliError::Io(e.to_string()))?;
        for r in rows {
            w.write_record(r).map_err(|e| CliError::Io(e.to_string()))?;
        }
        w.flush().map_err(io)?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// JSON object with `schema_version` and `manifest` added at the top.
    pub fn json(&mut self, name: &str, body: &impl Serialize) -> Result<(), CliError> {
        let mut v = serde_json::to_value(body).map_err(|e| CliError::Io(e.to_string()))?;
        let obj = v.as_object_mut().expect("JSON outputs are objects");
        obj.insert("schema_version".into(), json!(SCHEMA_VERSION));
        obj.insert("manifest".into(), json!(self.hash));
        let path = self.dir.join(name);
        let text = serde_json::to_string_pretty(&v).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }
}

/// Run metadata written to manifest.json after the command finishes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub artifact_version: String,
    pub command: String,
    /// Omitted in deterministic mode.
    pub started: Option<String>,
    pub finished: Option<String>,
    pub threads: usize,
    pub tolerances: Value,
    pub verdicts: Value,
    pub files: Vec<String>,
    pub config: ExperimentConfig,
}

/// Shortest round-trip representation; scientific outside [1e−4, 1e6).
pub fn fmt(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e6).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, fmt)
}
