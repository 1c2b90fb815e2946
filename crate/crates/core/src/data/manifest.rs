use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Modality {
    Ct,
    Mri,
    Xray,
    Other,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Ct, Modality::Mri, Modality::Xray, Modality::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ct => "CT",
            Modality::Mri => "MRI",
            Modality::Xray => "XRAY",
            Modality::Other => "OTHER",
        }
    }

    /// Strict parse; `None` for unrecognised tags.
    pub fn parse(tag: &str) -> Option<Self> {
        match tag.trim().to_ascii_uppercase().replace(['-', ' ', '_'], "").as_str() {
            "CT" => Some(Modality::Ct),
            "MRI" | "MR" => Some(Modality::Mri),
            "XRAY" | "CXR" => Some(Modality::Xray),
            "OTHER" => Some(Modality::Other),
            _ => None,
        }
    }
}

/// Unknown tags become `Other`.
impl From<String> for Modality {
    fn from(s: String) -> Self {
        Modality::parse(&s).unwrap_or(Modality::Other)
    }
}

impl From<Modality> for String {
    fn from(m: Modality) -> Self {
        m.as_str().to_string()
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "unknown split `{s}` (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub image_path: PathBuf,
    pub caption: String,
    pub article_id: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl ManifestEntry {
    pub fn resolve_image(&self, base: &Path) -> PathBuf {
        if self.image_path.is_absolute() {
            self.image_path.clone()
        } else {
            base.join(&self.image_path)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RejectedLine {
    /// 1-based.
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub rejected: Vec<RejectedLine>,
    /// Directory the manifest was read from.
    pub base_dir: PathBuf,
}

pub fn parse_manifest(text: &str) -> (Vec<ManifestEntry>, Vec<RejectedLine>) {
    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let reject = |reason: String| RejectedLine { line: i + 1, reason };
        match serde_json::from_str::<ManifestEntry>(line) {
            Ok(e) if e.article_id.trim().is_empty() => rejected.push(reject("empty article_id".into())),
            Ok(e) if e.caption.trim().is_empty() => rejected.push(reject("empty caption".into())),
            Ok(e) => entries.push(e),
            Err(e) => rejected.push(reject(e.to_string())),
        }
    }
    (entries, rejected)
}

/// Reads a JSONL manifest. In strict mode any malformed line is an error
/// listing every bad line number.
pub fn load_manifest(path: &Path, strict: bool) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (entries, rejected) = parse_manifest(&text);
    if strict && !rejected.is_empty() {
        let lines: Vec<String> = rejected
            .iter()
            .map(|r| format!("line {}: {}", r.line, r.reason))
            .collect();
        return Err(Error::Data(format!(
            "{}: {} malformed line(s): {}",
            path.display(),
            rejected.len(),
            lines.join("; ")
        )));
    }
    Ok(Manifest {
        entries,
        rejected,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
