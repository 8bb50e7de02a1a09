use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Content hash of the stage inputs.
    pub key: String,
    pub cache_hit: bool,
}

/// Directory of stage artifacts named `<stage>-<key prefix>.<ext>`.
///
/// Without a directory every stage is rebuilt.
#[derive(Debug, Clone, Default)]
pub struct StageCache {
    dir: Option<PathBuf>,
}

const KEY_CHARS: usize = 16;

impl StageCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn disabled() -> Self {
        Self { dir: None }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn path(&self, stage: &str, key: &str, ext: &str) -> Option<PathBuf> {
        let safe: String = stage
            .chars()
            .filter(|&c| c != ']')
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{safe}-{}.{ext}", &key[..KEY_CHARS.min(key.len())])))
    }

    /// Loads the artifact if present, otherwise builds and stores it.
    ///
    /// A present but unreadable artifact is an error naming the file, not a
    /// silent rebuild.
    pub fn get_or_build<T>(
        &self,
        stage: &str,
        key: &str,
        ext: &str,
        load: impl FnOnce(&Path) -> Result<T>,
        save: impl FnOnce(&T, &Path) -> Result<()>,
        build: impl FnOnce() -> Result<T>,
        log: &mut Vec<StageRecord>,
    ) -> Result<T> {
        let tag = |e| Error::stage(stage, e);
        let path = self.path(stage, key, ext);
        let mut record = StageRecord {
            stage: stage.into(),
            key: key.into(),
            cache_hit: false,
        };
        if let Some(p) = path.as_deref().filter(|p| p.exists()) {
            let value = load(p).map_err(tag)?;
            record.cache_hit = true;
            log.push(record);
            return Ok(value);
        }
        let value = build().map_err(tag)?;
        if let Some(p) = path {
            if let Some(d) = p.parent() {
                std::fs::create_dir_all(d).map_err(|e| tag(Error::io(d, e)))?;
            }
            // write then rename so an interrupted run never leaves a torn file
            let tmp = p.with_extension(format!("{ext}.tmp"));
            save(&value, &tmp).map_err(tag)?;
            std::fs::rename(&tmp, &p).map_err(|e| tag(Error::io(&p, e)))?;
        }
        log.push(record);
        Ok(value)
    }
}

/// JSON helpers for artifacts that are plain serde values.
pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::format(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_call_hits_and_corruption_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let cache = StageCache::new(dir.path());
        let mut log = Vec::new();
        let build = || Ok(vec![1.5f64, 2.0]);
        let a: Vec<f64> = cache
            .get_or_build(
                "toy",
                "abcdef0123456789ff",
                "json",
                load_json,
                save_json,
                build,
                &mut log,
            )
            .unwrap();
        let b: Vec<f64> = cache
            .get_or_build(
                "toy",
                "abcdef0123456789ff",
                "json",
                load_json,
                save_json,
                || panic!("rebuilt"),
                &mut log,
            )
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(log.iter().map(|r| r.cache_hit).collect::<Vec<_>>(), vec![false, true]);

        let path = cache.path("toy", "abcdef0123456789ff", "json").unwrap();
        std::fs::write(&path, "{not json").unwrap();
        let err = cache
            .get_or_build::<Vec<f64>>(
                "toy",
                "abcdef0123456789ff",
                "json",
                load_json,
                save_json,
                build,
                &mut log,
            )
            .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("toy") && msg.contains(&path.display().to_string()),
            "{msg}"
        );
    }

    #[test]
    fn disabled_cache_always_builds() {
        let mut log = Vec::new();
        let v: u32 = StageCache::disabled()
            .get_or_build("s", "k", "json", load_json, save_json, || Ok(7), &mut log)
            .unwrap();
        assert_eq!(v, 7);
        assert!(!log[0].cache_hit);
    }
}
