//! JSON-lines manifests for utterances and augmentation pools.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use bgflow_core::augment::Condition;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Audio to train on or score; the augmented twin in simulated manifests.
    pub audio: PathBuf,
    pub text: String,
    pub speaker: String,
    /// Frames per token; must sum to the utterance's mel frame count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub durations: Option<Vec<u32>>,
    /// Clean twin of `audio` in simulated manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_audio: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_ids: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolRecord {
    pub id: String,
    pub audio: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
}

/// Records plus the directory their relative paths are anchored at.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest<R> {
    pub path: PathBuf,
    pub records: Vec<R>,
}

pub trait HasId {
    fn id(&self) -> &str;
    fn audio(&self) -> &Path;
}

impl HasId for ManifestRecord {
    fn id(&self) -> &str {
        &self.id
    }
    fn audio(&self) -> &Path {
        &self.audio
    }
}

impl HasId for PoolRecord {
    fn id(&self) -> &str {
        &self.id
    }
    fn audio(&self) -> &Path {
        &self.audio
    }
}

impl<R: HasId + DeserializeOwned> Manifest<R> {
    /// Parse, require unique ids, and require every audio file to exist.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        let mut ids = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: R = serde_json::from_str(line)
                .map_err(|e| Error::manifest(path, format!("line {}: {e}", i + 1)))?;
            if !ids.insert(r.id().to_string()) {
                return Err(Error::manifest(path, format!("line {}: duplicate id {:?}", i + 1, r.id())));
            }
            records.push(r);
        }
        if records.is_empty() {
            return Err(Error::manifest(path, "no records"));
        }
        let m = Self {
            path: path.to_path_buf(),
            records,
        };
        for r in &m.records {
            let audio = m.resolve(r.audio());
            if !audio.is_file() {
                return Err(Error::manifest(
                    path,
                    format!("record {:?}: audio {} does not exist", r.id(), audio.display()),
                ));
            }
        }
        Ok(m)
    }
}

impl<R> Manifest<R> {
    pub fn dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new(""))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir().join(p)
        }
    }
}

pub fn write_jsonl<R: Serialize>(path: impl AsRef<Path>, records: &[R]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out += &serde_json::to_string(r).expect("record serializes");
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            audio: format!("{id}.wav").into(),
            text: "hi".into(),
            speaker: "s".into(),
            durations: Some(vec![2, 3]),
            clean_audio: None,
            condition: None,
            snr_db: None,
            source_ids: None,
        }
    }

    #[test]
    fn round_trip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.wav"), b"x").unwrap();
        let path = dir.path().join("m.jsonl");
        write_jsonl(&path, &[record("a")]).unwrap();
        let m = Manifest::<ManifestRecord>::read(&path).unwrap();
        assert_eq!(m.records, vec![record("a")]);
        assert_eq!(m.resolve(&m.records[0].audio), dir.path().join("a.wav"));
        assert!(!fs::read_to_string(&path).unwrap().contains("condition"));
    }

    #[test]
    fn duplicates_missing_audio_and_unknown_fields_fail() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.wav"), b"x").unwrap();
        let path = dir.path().join("m.jsonl");
        write_jsonl(&path, &[record("a"), record("a")]).unwrap();
        let err = Manifest::<ManifestRecord>::read(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        write_jsonl(&path, &[record("b")]).unwrap();
        let err = Manifest::<ManifestRecord>::read(&path).unwrap_err();
        assert!(err.to_string().contains("does not exist"), "{err}");

        fs::write(&path, r#"{"id":"a","audio":"a.wav","text":"","speaker":"s","extra":1}"#).unwrap();
        assert!(Manifest::<ManifestRecord>::read(&path).is_err());
    }
}
