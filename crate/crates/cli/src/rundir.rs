use std::path::PathBuf;

use anyhow::Context;
use chrono::Local;
use serde::Serialize;

use crate::settings::Settings;
use crate::{Failure, OUT_ENV};

pub const CONFIG_ECHO: &str = "config.txt";
pub const MANIFEST: &str = "manifest.json";

/// One invocation's output directory.
pub struct RunDir {
    pub path: PathBuf,
    command: &'static str,
    seed: u64,
    started: String,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    started: &'a str,
    finished: String,
    config: &'a str,
    files: &'a [String],
}

pub fn output_root(settings: &Settings) -> PathBuf {
    settings
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

impl RunDir {
    /// Creates the directory and echoes the effective settings into it.
    pub fn create(settings: &Settings, command: &'static str) -> Result<Self, Failure> {
        let now = Local::now();
        let name = settings
            .run_name
            .clone()
            .unwrap_or_else(|| format!("{command}-{}-s{}", now.format("%Y%m%d-%H%M%S%.3f"), settings.seed));
        let path = output_root(settings).join(name);
        std::fs::create_dir_all(&path)
            .with_context(|| format!("cannot create run directory {}", path.display()))?;
        let mut dir = Self {
            path,
            command,
            seed: settings.seed,
            started: now.to_rfc3339(),
            files: Vec::new(),
        };
        dir.write(CONFIG_ECHO, settings.to_kv().as_bytes())?;
        Ok(dir)
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
        let path = self.file(name);
        std::fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    pub fn finish(mut self) -> Result<PathBuf, Failure> {
        let files = self.files.clone();
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            started: &self.started,
            finished: Local::now().to_rfc3339(),
            config: CONFIG_ECHO,
            files: &files,
        };
        let text = serde_json::to_vec_pretty(&manifest).context("manifest")?;
        self.write(MANIFEST, &text)?;
        println!("run directory: {}", self.path.display());
        Ok(self.path)
    }
}
