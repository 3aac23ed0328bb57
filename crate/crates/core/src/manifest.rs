//! Corpus manifests: `path,content_id,distortion_type,level,mos`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub content_id: String,
    pub distortion_type: String,
    pub level: u32,
    pub mos: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Self {
        Self {
            root: root.into(),
            records,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers()?.clone();
        let expected = ["path", "content_id", "distortion_type", "level", "mos"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Manifest(format!(
                "{}: header must be `{}`",
                path.display(),
                expected.join(",")
            )));
        }
        let mut records = Vec::new();
        for (i, row) in reader.deserialize().enumerate() {
            let rec: ManifestRecord = row?;
            if !rec.mos.is_finite() {
                return Err(Error::Manifest(format!("row {}: non-finite mos", i + 1)));
            }
            if rec.content_id.is_empty() {
                return Err(Error::Manifest(format!("row {}: empty content_id", i + 1)));
            }
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::Empty(format!("manifest {}", path.display())));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        w.into_inner()
            .map_err(|e| Error::Manifest(format!("flushing csv: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// References live at `references/<content_id>.ply` next to the manifest.
    pub fn reference_path(&self, content_id: &str) -> PathBuf {
        self.root.join("references").join(format!("{content_id}.ply"))
    }

    /// Sorted distinct content ids.
    pub fn content_ids(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.content_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn select(&self, content_ids: &BTreeSet<String>) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| content_ids.contains(&r.content_id))
            .collect()
    }
}
