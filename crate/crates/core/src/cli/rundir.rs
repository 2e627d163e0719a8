use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::config::{hash_value, RunConfig};
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Output directory of one run:
///
/// ```text
/// config.json      resolved configuration (its hash guards --resume)
/// metrics.jsonl    one JSON record per logged step
/// checkpoints/     step-N.wcck
/// latents/         exported sequences
/// reports/         evaluation and probe reports
/// ```
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates a fresh run directory, or reopens one when `resume` is set.
    /// A populated directory without `resume` is refused, and so is a resume
    /// whose configuration hash differs from the stored one.
    pub fn open(root: impl AsRef<Path>, cfg: &RunConfig, resume: bool) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let dir = Self { root };
        let cfg_path = dir.config_path();
        let populated = dir
            .root
            .read_dir()
            .map(|mut it| it.next().is_some())
            .unwrap_or(false);
        if populated && !resume {
            return Err(Error::data(format!(
                "run directory {} already exists; pass --resume to continue it",
                dir.root.display()
            )));
        }
        if populated && cfg_path.exists() {
            let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
            let stored: Value = serde_json::from_str(&text)
                .map_err(|e| Error::data(format!("{}: {e}", cfg_path.display())))?;
            if hash_value(&stored) != cfg.hash()? {
                return Err(Error::config(format!(
                    "configuration differs from the one stored in {}; refusing to resume",
                    cfg_path.display()
                )));
            }
        }
        for sub in [dir.root.clone(), dir.checkpoints(), dir.latents(), dir.reports()] {
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        if !cfg_path.exists() {
            let text = serde_json::to_string_pretty(cfg)?;
            fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
        }
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn latents(&self) -> PathBuf {
        self.root.join("latents")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step-{step}.wcck"))
    }

    /// Highest-numbered `step-N.wcck`, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<(u64, PathBuf)>> {
        let dir = self.checkpoints();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&dir, e)),
        };
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name();
            let step = name
                .to_str()
                .and_then(|n| n.strip_prefix("step-"))
                .and_then(|n| n.strip_suffix(".wcck"))
                .and_then(|n| n.parse::<u64>().ok());
            if let Some(s) = step {
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, entry.path()));
                }
            }
        }
        Ok(best)
    }

    /// Drops metric records at or past `step` so a resumed run appends
    /// exactly what the uninterrupted run would have written.
    pub fn truncate_metrics(&self, step: u64) -> Result<()> {
        let p = self.metrics_path();
        if !p.exists() {
            return Ok(());
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut kept = String::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: Value = serde_json::from_str(line)
                .map_err(|e| Error::data(format!("{}: {e}", p.display())))?;
            if v.get("step").and_then(Value::as_u64).is_none_or(|s| s < step) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        fs::write(&p, kept).map_err(|e| Error::io(&p, e))
    }

    pub fn append_metric(&self, record: &impl serde::Serialize) -> Result<()> {
        use std::io::Write;
        let p = self.metrics_path();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn existing_directory_needs_resume_and_matching_hash() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("run");
        let cfg = RunConfig::tiny();
        RunDir::open(&root, &cfg, false).unwrap();
        assert!(matches!(RunDir::open(&root, &cfg, false), Err(Error::Data(_))));
        RunDir::open(&root, &cfg, true).unwrap();
        let mut other = cfg.clone();
        other.stage1.peak_lr *= 2.0;
        assert!(matches!(RunDir::open(&root, &other, true), Err(Error::Config(_))));
    }

    #[test]
    fn latest_checkpoint_and_truncation() {
        let tmp = tempfile::tempdir().unwrap();
        let d = RunDir::open(tmp.path().join("r"), &RunConfig::tiny(), false).unwrap();
        assert!(d.latest_checkpoint().unwrap().is_none());
        for s in [5u64, 20, 10] {
            fs::write(d.checkpoint(s), b"x").unwrap();
        }
        fs::write(d.checkpoints().join("failed-step-30.wcck"), b"x").unwrap();
        assert_eq!(d.latest_checkpoint().unwrap().unwrap().0, 20);
        for s in 0..30u64 {
            d.append_metric(&serde_json::json!({ "step": s })).unwrap();
        }
        d.truncate_metrics(20).unwrap();
        let text = fs::read_to_string(d.metrics_path()).unwrap();
        assert_eq!(text.lines().count(), 20);
        assert!(text.lines().last().unwrap().contains("19"));
    }
}
