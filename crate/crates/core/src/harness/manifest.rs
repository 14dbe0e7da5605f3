use std::fs;
use std::path::{Path, PathBuf};

use super::config::Settings;
use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Record of what produced a directory of outputs: the command, the fully
/// resolved settings, the dataset hash and any extra `key=value` notes.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub settings: Settings,
    pub dataset_sha256: Option<String>,
    pub notes: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, settings: &Settings, dataset_sha256: Option<String>) -> Self {
        Manifest {
            command: command.to_string(),
            settings: settings.clone(),
            dataset_sha256,
            notes: Vec::new(),
        }
    }

    pub fn note(mut self, key: &str, value: impl ToString) -> Self {
        self.notes.push((key.to_string(), value.to_string()));
        self
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = format!("command={}\n", self.command);
        if let Some(d) = &self.dataset_sha256 {
            s += &format!("dataset.sha256={d}\n");
        }
        for (k, v) in &self.notes {
            s += &format!("note.{k}={v}\n");
        }
        s += &self.settings.to_text()?;
        Ok(s)
    }

    /// Writes `manifest.txt` into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()?)?;
        Ok(path)
    }
}

/// Manifest keys that are not settings; [`Settings::load`] skips them so a
/// manifest doubles as a config file.
pub fn is_annotation(key: &str) -> bool {
    key == "command" || key == "dataset.sha256" || key.starts_with("note.")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_can_be_read_back() {
        let mut s = Settings::default();
        s.set("train.seed", "42").unwrap();
        let m = Manifest::new("train", &s, Some("ab".repeat(32))).note("eval", "greedy");
        let dir = tempfile::tempdir().unwrap();
        let text = fs::read_to_string(m.write(dir.path()).unwrap()).unwrap();
        assert_eq!(Settings::load(Some(&text), &[]).unwrap(), s);
        assert!(text.contains("note.eval=greedy"));
    }
}
