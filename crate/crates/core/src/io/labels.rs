//! Per-point anatomical labels: CSV `point_row,label_id` plus an optional JSON
//! name table (`{"<label_id>": "<name>"}`) stored next to it with a `.json` extension.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointLabels {
    /// Label id of each flattened point, in `flatten_points` order.
    pub labels: Vec<u32>,
    pub names: BTreeMap<u32, String>,
}

impl PointLabels {
    pub fn name(&self, id: u32) -> String {
        self.names
            .get(&id)
            .cloned()
            .unwrap_or_else(|| format!("label_{id}"))
    }
}

#[derive(Deserialize, Serialize)]
struct LabelRow {
    point_row: usize,
    label_id: u32,
}

pub fn names_path(labels_csv: &Path) -> PathBuf {
    labels_csv.with_extension("json")
}

pub fn read_labels(path: impl AsRef<Path>, expected_point_count: usize) -> Result<PointLabels> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut labels = Vec::new();
    for (i, rec) in reader.deserialize::<LabelRow>().enumerate() {
        let row = rec.map_err(|e| Error::format(path, e.to_string()))?;
        if row.point_row != i {
            return Err(Error::Validation(format!(
                "{}: line {} has point_row {}, expected {i} (rows must be in point order)",
                path.display(),
                i + 2,
                row.point_row
            )));
        }
        labels.push(row.label_id);
    }
    if labels.len() != expected_point_count {
        return Err(Error::Validation(format!(
            "{} has {} labels but the tract has {expected_point_count} points",
            path.display(),
            labels.len()
        )));
    }
    let names_file = names_path(path);
    let names = if names_file.exists() {
        let text = std::fs::read_to_string(&names_file).map_err(|e| Error::io(&names_file, e))?;
        let raw: BTreeMap<String, String> =
            serde_json::from_str(&text).map_err(|e| Error::format(&names_file, e.to_string()))?;
        raw.into_iter()
            .map(|(k, v)| {
                k.parse::<u32>()
                    .map(|id| (id, v))
                    .map_err(|_| Error::format(&names_file, format!("label id {k:?} is not an integer")))
            })
            .collect::<Result<_>>()?
    } else {
        BTreeMap::new()
    };
    Ok(PointLabels { labels, names })
}

pub fn write_labels(labels: &PointLabels, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    for (point_row, &label_id) in labels.labels.iter().enumerate() {
        w.serialize(LabelRow { point_row, label_id })
            .map_err(|e| Error::Internal(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    if !labels.names.is_empty() {
        let raw: BTreeMap<String, &String> =
            labels.names.iter().map(|(k, v)| (k.to_string(), v)).collect();
        let json = serde_json::to_string_pretty(&raw).map_err(|e| Error::Internal(e.to_string()))?;
        let np = names_path(path);
        std::fs::write(&np, json).map_err(|e| Error::io(&np, e))?;
    }
    Ok(())
}
