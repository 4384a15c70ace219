//! Dataset manifests: a versioned header line followed by one JSON record
//! per utterance.
//!
//! ```text
//! # pesqnet-manifest v1
//! {"utterance_id":"u0000","clean_path":"clean/u0000.wav","rir_path":"none","noise_path":"noise/u0000.wav","snr_db":5.0,"split":"train"}
//! ```
//!
//! Relative paths resolve against the manifest's directory. `rir_path` is
//! `"none"` for utterances without reverberation.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "# pesqnet-manifest v1";
pub const NO_RIR: &str = "none";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "dev" => Split::Dev,
            "test" => Split::Test,
            _ => return Err(Error::Config(format!("unknown split `{s}`"))),
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub clean_path: String,
    pub rir_path: String,
    pub noise_path: String,
    pub snr_db: f64,
    pub split: Split,
}

impl ManifestEntry {
    pub fn has_reverb(&self) -> bool {
        self.rir_path != NO_RIR
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self { entries, base_dir: base_dir.into() };
        m.validate(Path::new("<manifest>"))?;
        Ok(m)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(Error::format(path, format!("duplicate utterance id `{}`", e.utterance_id)));
            }
            if !e.snr_db.is_finite() {
                return Err(Error::format(path, format!("{}: SNR {} is not finite", e.utterance_id, e.snr_db)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.into()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Fails if any referenced file is missing.
    pub fn check_paths(&self) -> Result<()> {
        for e in &self.entries {
            let mut paths = vec![&e.clean_path, &e.noise_path];
            if e.has_reverb() {
                paths.push(&e.rir_path);
            }
            for p in paths {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::format(full, format!("referenced by `{}` but missing", e.utterance_id)));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialise"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            Some((_, h)) => return Err(Error::format(path, format!("expected header `{MANIFEST_HEADER}`, found `{h}`"))),
            None => return Err(Error::format(path, "empty file; missing header")),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line).map_err(|err| Error::format(path, format!("line {}: {err}", i + 1)))?;
            entries.push(e);
        }
        let m = Self { entries, base_dir: base_dir.into() };
        m.validate(path)?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, split: Split) -> ManifestEntry {
        ManifestEntry { utterance_id: id.into(), clean_path: format!("clean/{id}.wav"), rir_path: NO_RIR.into(), noise_path: "noise/n.wav".into(), snr_db: 5.0, split }
    }

    #[test]
    fn text_round_trip() {
        let m = Manifest::new(vec![entry("a", Split::Train), entry("b", Split::Dev)], "/data").unwrap();
        let back = Manifest::parse(&m.to_text(), "/data", Path::new("m")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.split(Split::Dev).len(), 1);
        assert_eq!(back.resolve("x.wav"), PathBuf::from("/data/x.wav"));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Manifest::parse("{}\n", "", Path::new("m")).is_err());
        assert!(Manifest::new(vec![entry("a", Split::Train), entry("a", Split::Dev)], "").is_err());
        let text = format!("{MANIFEST_HEADER}\nnot json\n");
        assert!(Manifest::parse(&text, "", Path::new("m")).is_err());
        let empty = Manifest::parse(&format!("{MANIFEST_HEADER}\n"), "", Path::new("m")).unwrap();
        assert!(empty.entries.is_empty());
    }
}
