//! Cohort manifest: CSV with header `subject_id,path,score,split[,labels]`.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub path: PathBuf,
    pub score: f64,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct CohortManifest {
    pub rows: Vec<ManifestRow>,
}

impl CohortManifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let m = Self { rows };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if row.subject_id.is_empty() {
                return Err(Error::Validation("empty subject_id in manifest".into()));
            }
            if !seen.insert(row.subject_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate subject_id {:?} in manifest",
                    row.subject_id
                )));
            }
            if !row.score.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite score for subject {:?}",
                    row.subject_id
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, subject_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.subject_id == subject_id)
    }
}

/// Reads a manifest; relative tract and label paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<CohortManifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut rows = Vec::new();
    for rec in reader.deserialize::<ManifestRow>() {
        let mut row = rec.map_err(|e| Error::format(path, e.to_string()))?;
        if row.path.is_relative() {
            row.path = base.join(&row.path);
        }
        if let Some(l) = &row.labels {
            if l.as_os_str().is_empty() {
                row.labels = None;
            } else if l.is_relative() {
                row.labels = Some(base.join(l));
            }
        }
        rows.push(row);
    }
    CohortManifest::new(rows)
}

/// Writes paths exactly as stored in the rows.
pub fn write_manifest(manifest: &CohortManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate()?;
    let with_labels = manifest.rows.iter().any(|r| r.labels.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Internal(e.to_string());
    if with_labels {
        w.write_record(["subject_id", "path", "score", "split", "labels"])
            .map_err(csv_err)?;
    } else {
        w.write_record(["subject_id", "path", "score", "split"])
            .map_err(csv_err)?;
    }
    for r in &manifest.rows {
        let mut rec = vec![
            r.subject_id.clone(),
            r.path.to_string_lossy().into_owned(),
            format_f64(r.score),
            r.split.to_string(),
        ];
        if with_labels {
            rec.push(
                r.labels
                    .as_ref()
                    .map(|p| p.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Shortest decimal that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}
