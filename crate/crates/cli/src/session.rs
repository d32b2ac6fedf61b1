//! Named transactions persisted between invocations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lakelog::txn::TxnSession;

pub struct Registry {
    dir: PathBuf,
}

impl Registry {
    pub fn new(root: &Path) -> Self {
        Self {
            dir: root.join("sessions"),
        }
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            bail!("session names may only contain letters, digits, '-' and '_'");
        }
        Ok(self.dir.join(format!("{name}.json")))
    }

    pub fn exists(&self, name: &str) -> Result<bool> {
        Ok(self.path(name)?.exists())
    }

    pub fn load(&self, name: &str) -> Result<TxnSession> {
        let path = self.path(name)?;
        let text = fs::read_to_string(&path).with_context(|| format!("no open session {name:?}"))?;
        serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))
    }

    pub fn save(&self, name: &str, session: &TxnSession) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        let path = self.path(name)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(session)?)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn remove(&self, name: &str) -> Result<()> {
        let path = self.path(name)?;
        if path.exists() {
            fs::remove_file(path)?;
        }
        Ok(())
    }

    /// Every persisted session except `except`.
    pub fn others(&self, except: Option<&str>) -> Result<Vec<TxnSession>> {
        let mut out = Vec::new();
        let Ok(entries) = fs::read_dir(&self.dir) else {
            return Ok(out);
        };
        for entry in entries {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            if Some(name) == except {
                continue;
            }
            out.push(serde_json::from_str(&fs::read_to_string(&path)?)?);
        }
        Ok(out)
    }
}
