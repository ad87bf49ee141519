use std::path::{Path, PathBuf};
use std::time::Instant;

use hemoseg::config::KvFile;
use serde::Serialize;

/// Written next to every command's outputs. `args` plus `config` are
/// enough to rerun the command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: &'static str,
    pub wall_seconds: f64,
}

pub struct ManifestBuilder {
    command: &'static str,
    started: Instant,
    pub config: KvFile,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &'static str) -> Self {
        ManifestBuilder {
            command,
            started: Instant::now(),
            config: KvFile::new(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(self, path: &Path) -> hemoseg::Result<()> {
        let manifest = RunManifest {
            command: self.command.into(),
            args: std::env::args().skip(1).collect(),
            config: self.config.to_json(),
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            version: env!("CARGO_PKG_VERSION"),
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        write_json(path, &manifest)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> hemoseg::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// `dir/manifest.json` for directory outputs, `name.manifest.json` beside a file.
pub fn manifest_path(output: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        output.join("manifest.json")
    } else {
        output.with_extension("manifest.json")
    }
}

/// `path` with `suffix` appended to the file name.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
