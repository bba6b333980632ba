use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use clap::{ArgMatches, CommandFactory};
use serde::Serialize;
use sha1::{Digest, Sha1};

/// Git blob id of `bytes`: SHA-1 over `"blob <len>\0"` followed by the content.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    Ok(git_blob_hash(&std::fs::read(path)?))
}

#[derive(Clone, Debug, Serialize)]
pub struct FileRef {
    pub path: String,
    pub git_blob: String,
}

impl FileRef {
    pub fn of(path: &Path) -> std::io::Result<Self> {
        Ok(FileRef {
            path: path.display().to_string(),
            git_blob: hash_file(path)?,
        })
    }
}

/// Provenance record written next to every artifact set.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_path: Option<String>,
    pub output_dir: String,
    pub started_at: String,
    pub finished_at: String,
    /// Every flag after merging the config file, as it was used.
    pub config: BTreeMap<String, String>,
    pub dataset: Option<FileRef>,
    pub artifacts: Vec<FileRef>,
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, matches: &ArgMatches, config_path: Option<&Path>, output_dir: &Path) -> Self {
        let mut config = BTreeMap::new();
        let cmd = crate::args::Cli::command();
        let sub = cmd.find_subcommand(command).expect("known subcommand");
        for arg in sub.get_arguments() {
            let key = arg.get_id().as_str();
            if key == "config" || key == "help" {
                continue;
            }
            if let Ok(Some(raw)) = matches.try_get_raw(key) {
                let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
                config.insert(key.to_string(), vals.join(","));
            }
        }
        let now = stamp(Utc::now());
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            output_dir: output_dir.display().to_string(),
            started_at: now.clone(),
            finished_at: now,
            config,
            dataset: None,
            artifacts: Vec::new(),
        }
    }

    /// Stamps the finish time and writes the manifest as TOML to `path`.
    pub fn finish(mut self, path: &Path) -> std::io::Result<PathBuf> {
        self.finished_at = stamp(Utc::now());
        let text = toml::to_string(&self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)?;
        Ok(path.to_path_buf())
    }
}
