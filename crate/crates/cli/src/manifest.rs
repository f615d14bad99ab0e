//! Run manifest written next to every command's output, on success and on
//! failure: what ran, with which config and seed, when, and what it wrote.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub git_describe: String,
    pub start_unix: u64,
    pub end_unix: u64,
    pub status: String,
    pub error: Option<String>,
    pub outputs: Vec<String>,
    #[serde(skip)]
    location: Option<PathBuf>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

impl RunManifest {
    pub fn begin(command: &str, seed: u64, config_path: Option<String>) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path,
            seed,
            git_describe: git_describe(),
            start_unix: now_unix(),
            end_unix: 0,
            status: "running".to_string(),
            error: None,
            outputs: Vec::new(),
            location: None,
        }
    }

    /// Chooses where the manifest lands: inside `out` when it is (or will
    /// be) a directory, else next to the output file.
    pub fn set_manifest_location(&mut self, out: &Path) {
        let is_dir_like = out.extension().is_none() || out.is_dir();
        let path = if is_dir_like {
            out.join("run_manifest.json")
        } else {
            out.with_extension("manifest.json")
        };
        self.location = Some(path);
    }

    pub fn finish_ok(&mut self, outputs: Vec<String>) {
        self.status = "ok".to_string();
        self.outputs = outputs;
        self.end_unix = now_unix();
    }

    pub fn finish_err(&mut self, error: &str) {
        self.status = "error".to_string();
        self.error = Some(error.to_string());
        self.end_unix = now_unix();
    }

    pub fn write(&self) -> std::io::Result<()> {
        let path = match &self.location {
            Some(p) => p.clone(),
            None => return Ok(()),
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json)
    }
}
