use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const LOCK_FILE: &str = ".lock";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

/// An output directory claimed by one writer for the lifetime of the value.
#[derive(Debug)]
pub struct OutDir {
    path: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    /// Refuses a non-empty directory unless `force` is set.
    pub fn claim(path: &Path, force: bool) -> Result<OutDir> {
        let lock = path.join(LOCK_FILE);
        if path.exists() {
            if !path.is_dir() {
                anyhow::bail!(crate::usage(format!(
                    "{} exists and is not a directory",
                    path.display()
                )));
            }
            let occupied = std::fs::read_dir(path)
                .map_err(|e| eliot_core::Error::io(path, e))?
                .next()
                .is_some();
            if occupied && !force && !lock.exists() {
                anyhow::bail!(crate::usage(format!(
                    "output directory {} is not empty; pass --force to write into it",
                    path.display()
                )));
            }
        }
        std::fs::create_dir_all(path).map_err(|e| eliot_core::Error::io(path, e))?;
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => anyhow::anyhow!(
                    "{} is locked by another run (remove {} if that run died)",
                    path.display(),
                    lock.display()
                ),
                _ => eliot_core::Error::io(&lock, e).into(),
            })?;
        Ok(OutDir {
            path: path.to_path_buf(),
            lock,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

#[derive(Debug, Serialize)]
struct Formats {
    manifest: u32,
    scan: &'static str,
    poses: &'static str,
    checkpoint: u32,
    report: u32,
}

/// Records what a command read and wrote and the configuration it ran with.
#[derive(Debug)]
pub struct Manifest {
    pub command: &'static str,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub notes: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &'static str) -> Manifest {
        Manifest {
            command,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, key: &str, path: &Path) {
        self.inputs
            .insert(key.to_string(), path.display().to_string());
    }

    pub fn write(&self, out: &OutDir, config: Option<&RunConfig>) -> Result<PathBuf> {
        let mut t = toml::Table::new();
        t.insert("command".into(), self.command.into());
        t.insert("code_version".into(), env!("CARGO_PKG_VERSION").into());
        let formats = Formats {
            manifest: MANIFEST_VERSION,
            scan: "kitti-velodyne-f32x4",
            poses: "kitti-3x4-row-major",
            checkpoint: 1,
            report: 1,
        };
        t.insert("formats".into(), toml::Value::try_from(formats)?);
        if let Some(c) = config {
            t.insert("seed".into(), toml::Value::Integer(c.seed as i64));
            let snapshot: toml::Table =
                c.to_toml()?.parse().context("re-reading config snapshot")?;
            t.insert("config".into(), toml::Value::Table(snapshot));
        }
        t.insert("inputs".into(), toml::Value::try_from(&self.inputs)?);
        let outputs: Vec<String> = self
            .outputs
            .iter()
            .map(|p| {
                p.strip_prefix(out.path())
                    .unwrap_or(p)
                    .display()
                    .to_string()
            })
            .collect();
        t.insert("outputs".into(), toml::Value::try_from(outputs)?);
        if !self.notes.is_empty() {
            t.insert("notes".into(), toml::Value::try_from(&self.notes)?);
        }
        let path = out.join(MANIFEST_FILE);
        std::fs::write(&path, toml::to_string(&t)?).map_err(|e| eliot_core::Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn claim_refuses_occupied_directories() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let a = OutDir::claim(&out, false).unwrap();
        assert!(OutDir::claim(&out, true).is_err());
        drop(a);
        std::fs::write(out.join("x"), "1").unwrap();
        let e = OutDir::claim(&out, false).unwrap_err();
        assert!(crate::is_usage(&e));
        let b = OutDir::claim(&out, true).unwrap();
        assert!(out.join(LOCK_FILE).exists());
        drop(b);
        assert!(!out.join(LOCK_FILE).exists());
    }
}
