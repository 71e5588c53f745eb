//! Workdir layout, the lock file and per-stage manifests.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use igr_core::io::{content_hash, read_json, write_json};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DIRS: [&str; 6] = ["corpus", "interests", "embeddings", "codebooks", "checkpoints", "reports"];
const LOCK: &str = ".igr.lock";

/// Held for the lifetime of one command; the lock file goes away on drop.
#[derive(Debug)]
pub struct Workdir {
    root: PathBuf,
    lock: PathBuf,
}

impl Workdir {
    pub fn open(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root)?;
        for d in DIRS {
            fs::create_dir_all(root.join(d))?;
        }
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "pid {}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&lock).unwrap_or_default();
                return Err(CliError::Locked(lock, holder.trim().to_string()));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(Workdir {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

impl Drop for Workdir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Record of one stage run. `config_hash` covers the configuration the
/// stage depends on; `input_hash` additionally covers its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub input_hash: String,
    /// Workdir-relative input path to content hash at run time.
    pub inputs: BTreeMap<String, String>,
    /// Workdir-relative output path to content hash.
    pub outputs: BTreeMap<String, String>,
}

pub fn file_hash(path: &Path) -> CliResult<String> {
    Ok(content_hash(&fs::read(path)?))
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    content_hash(&serde_json::to_vec(value).unwrap_or_default())
}

/// Manifest of a produced stage, checked against the configuration the
/// caller expects. Missing artifacts name `producer`; a different config
/// hash or edited outputs are refused unless `force`.
pub fn require(wd: &Workdir, manifest: &str, producer: &str, config_hash: &str, force: bool) -> CliResult<Manifest> {
    let path = wd.path(manifest);
    if !path.exists() {
        return Err(CliError::Missing {
            path,
            producer: producer.into(),
        });
    }
    let m: Manifest = read_json(&path)?;
    // Inputs changed since the producer ran: its outputs are out of date.
    for (rel, hash) in &m.inputs {
        let p = wd.path(rel);
        if !force && (!p.exists() || file_hash(&p)? != *hash) {
            return Err(CliError::Stale {
                path: p,
                producer: producer.into(),
            });
        }
    }
    for (rel, hash) in &m.outputs {
        let out = wd.path(rel);
        if !out.exists() {
            return Err(CliError::Missing {
                path: out,
                producer: producer.into(),
            });
        }
        if !force && file_hash(&out)? != *hash {
            return Err(CliError::Stale {
                path: out,
                producer: producer.into(),
            });
        }
    }
    if m.config_hash != config_hash {
        if !force {
            return Err(CliError::Stale {
                path,
                producer: producer.into(),
            });
        }
        log::warn!("{} was produced under a different configuration; continuing because of --force", path.display());
    }
    Ok(m)
}

/// A stage invocation: its manifest location, configuration and inputs.
pub struct Stage<'a> {
    pub name: &'a str,
    pub manifest: String,
    pub config_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Stage<'_> {
    fn input_hashes(&self, wd: &Workdir) -> CliResult<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for rel in &self.inputs {
            let p = wd.path(rel);
            if !p.exists() {
                return Err(CliError::Other(format!("input {} disappeared", p.display())));
            }
            out.insert(rel.clone(), file_hash(&p)?);
        }
        Ok(out)
    }

    /// Run `work` unless a previous run with identical inputs left intact
    /// outputs. Returns whether the work ran.
    pub fn run(&self, wd: &Workdir, force: bool, work: impl FnOnce() -> CliResult<()>) -> CliResult<bool> {
        let inputs = self.input_hashes(wd)?;
        let input_hash = hash_json(&(&self.config_hash, &inputs));
        let mpath = wd.path(&self.manifest);
        if !force && mpath.exists() {
            if let Ok(m) = read_json::<Manifest>(&mpath) {
                if m.input_hash == input_hash && m.config_hash == self.config_hash && outputs_intact(wd, &m)? {
                    log::info!("{}: inputs unchanged, skipping", self.name);
                    return Ok(false);
                }
            }
        }
        // Invalidate first so an interrupted run never looks complete.
        if mpath.exists() {
            fs::remove_file(&mpath)?;
        }
        work()?;
        let mut outputs = BTreeMap::new();
        for rel in &self.outputs {
            outputs.insert(rel.clone(), file_hash(&wd.path(rel))?);
        }
        let m = Manifest {
            stage: self.name.into(),
            config_hash: self.config_hash.clone(),
            input_hash,
            inputs,
            outputs,
        };
        write_json(&mpath, &m)?;
        Ok(true)
    }
}

fn outputs_intact(wd: &Workdir, m: &Manifest) -> CliResult<bool> {
    for (rel, hash) in &m.outputs {
        let p = wd.path(rel);
        if !p.exists() || file_hash(&p)? != *hash {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_refused() {
        let dir = tempfile::tempdir().unwrap();
        let a = Workdir::open(dir.path()).unwrap();
        assert!(matches!(Workdir::open(dir.path()), Err(CliError::Locked(..))));
        drop(a);
        Workdir::open(dir.path()).unwrap();
    }

    #[test]
    fn stage_skips_unchanged_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::open(dir.path()).unwrap();
        fs::write(wd.path("corpus/in.txt"), "x").unwrap();
        let stage = Stage {
            name: "t",
            manifest: "reports/t.manifest.json".into(),
            config_hash: "c".into(),
            inputs: vec!["corpus/in.txt".into()],
            outputs: vec!["reports/out.txt".into()],
        };
        let write = || -> CliResult<()> {
            fs::write(wd.path("reports/out.txt"), "y")?;
            Ok(())
        };
        assert!(stage.run(&wd, false, write).unwrap());
        assert!(!stage.run(&wd, false, write).unwrap());
        fs::write(wd.path("corpus/in.txt"), "z").unwrap();
        assert!(stage.run(&wd, false, write).unwrap());
        assert!(stage.run(&wd, true, write).unwrap());
        let m = require(&wd, "reports/t.manifest.json", "t", "c", false).unwrap();
        assert_eq!(m.stage, "t");
        assert!(matches!(
            require(&wd, "reports/t.manifest.json", "t", "other", false),
            Err(CliError::Stale { .. })
        ));
        assert!(require(&wd, "reports/t.manifest.json", "t", "other", true).is_ok());
        assert!(matches!(
            require(&wd, "reports/none.json", "t", "c", false),
            Err(CliError::Missing { .. })
        ));
    }
}
