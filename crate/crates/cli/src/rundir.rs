//! Run directories: resolved config, input digests and a log file.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fpgate::dataio::sha256_hex;
use serde::Serialize;

pub const OUT_ENV: &str = "FPGATE_OUT";

/// `explicit`, or `$FPGATE_OUT/<command>` (`runs/<command>` when unset).
pub fn resolve(explicit: Option<PathBuf>, command: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(command)
    })
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Default, Serialize)]
pub struct Inputs {
    files: Vec<FileDigest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset_digest: Option<String>,
}

impl Inputs {
    pub fn file(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.files.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn dataset(&mut self, digest: String) {
        self.dataset_digest = Some(digest);
    }
}

pub struct RunDir {
    path: PathBuf,
}

/// Writes to stderr and the run log.
struct Tee(File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stderr().write_all(buf)?;
        self.0.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stderr().flush()?;
        self.0.flush()
    }
}

impl RunDir {
    /// Creates the directory and starts logging into `run.log`.
    pub fn open(path: PathBuf, level: log::LevelFilter) -> Result<Self> {
        fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        let log = File::create(path.join("run.log")).with_context(|| format!("creating log in {}", path.display()))?;
        let _ = env_logger::Builder::new()
            .filter_level(level)
            .parse_default_env()
            .target(env_logger::Target::Pipe(Box::new(Tee(log))))
            .try_init();
        log::info!("run directory {}", path.display());
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<()> {
        let p = self.join(name);
        fs::write(&p, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_inputs(&self, inputs: &Inputs) -> Result<()> {
        self.write_json("inputs.json", inputs)
    }
}
