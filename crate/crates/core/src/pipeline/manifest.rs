//! Newline-delimited dataset manifest: one header line, then one record per line.
//! Paths are stored relative to the manifest's directory with `/` separators.

use crate::error::{Error, Result};
use crate::mask::PatchRect;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const SCHEMA: &str = "fgbg-manifest";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema: String,
    pub version: u32,
    pub dataset: String,
    /// Completed stages and the cache key they ran under.
    pub stages: BTreeMap<String, String>,
    /// Files produced by stages that are not tied to a single record
    /// (models, logs, reports, linked manifests).
    pub files: BTreeMap<String, String>,
    /// How the dataset's label sets are to be read, recorded for auditability.
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub image: String,
    pub image_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_bbox: Option<PatchRect>,
    pub object: String,
    pub split: Split,
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    #[serde(default)]
    pub flags: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn new(dataset: &str, records: Vec<Record>) -> Self {
        let mut notes = BTreeMap::new();
        notes.insert(
            "d_s".to_string(),
            "original images paired with their refined masks (artifact `refined`)".to_string(),
        );
        Self {
            header: ManifestHeader {
                schema: SCHEMA.into(),
                version: SCHEMA_VERSION,
                dataset: dataset.into(),
                stages: BTreeMap::new(),
                files: BTreeMap::new(),
                notes,
            },
            records,
        }
    }

    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_ndjson(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| Error::format(origin, "empty manifest"))?;
        let header: ManifestHeader = serde_json::from_str(head)?;
        if header.schema != SCHEMA {
            return Err(Error::format(origin, format!("unknown schema {:?}", header.schema)));
        }
        if header.version != SCHEMA_VERSION {
            return Err(Error::format(origin, format!("unsupported schema version {}", header.version)));
        }
        let records = lines.map(serde_json::from_str).collect::<std::result::Result<Vec<Record>, _>>()?;
        let m = Manifest { header, records };
        m.check_ids()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ndjson(&std::fs::read_to_string(path)?, path)
    }

    /// Write-temp-then-rename, so a killed writer leaves the old manifest intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_ndjson()?.as_bytes())
    }

    pub fn check_ids(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Config(format!("duplicate record id {:?}", r.id)));
            }
        }
        Ok(())
    }

    /// Ids unique and every referenced file present under `root`.
    pub fn validate(&self, root: &Path) -> Result<()> {
        self.check_ids()?;
        let mut missing = Vec::new();
        let mut check = |p: &str| {
            if !resolve(root, p).is_file() {
                missing.push(p.to_string());
            }
        };
        for r in &self.records {
            check(&r.image);
            if let Some(g) = &r.gt_mask {
                check(g);
            }
            r.artifacts.values().for_each(|p| check(p));
        }
        self.header.files.values().for_each(|p| check(p));
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Dependency(format!("missing files: {}", missing.join(", "))))
        }
    }

    pub fn flagged(&self) -> usize {
        self.records.iter().filter(|r| !r.flags.is_empty()).count()
    }

    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_ndjson()?.as_bytes()))
    }
}

pub fn resolve(root: &Path, stored: &str) -> PathBuf {
    let p = Path::new(stored);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Relative `/`-separated form when `path` lies under `root`, else absolute.
pub fn relativize(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| {
        std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
    });
    rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = temp_path(path);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs a writer against a temporary sibling path, then renames it into place.
pub fn write_atomic_with(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = temp_path(path);
    write(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
