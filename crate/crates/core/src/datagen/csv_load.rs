//! CSV loading with a declared schema.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

/// Which header columns carry the label and (optionally) the group id.
/// Every other column is read as a feature, in header order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label: String,
    #[serde(default)]
    pub group: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema { label: "label".to_string(), group: None }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path.as_ref())?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty CSV".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();

    let label_col = columns
        .iter()
        .position(|&c| c == schema.label)
        .ok_or_else(|| Error::Parse(format!("label column {:?} not in header", schema.label)))?;
    let group_col = match &schema.group {
        Some(name) => Some(
            columns
                .iter()
                .position(|&c| c == *name)
                .ok_or_else(|| Error::Parse(format!("group column {name:?} not in header")))?,
        ),
        None => None,
    };

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut side = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::Parse(format!(
                "row {} has {} cells, header has {}",
                lineno + 2,
                cells.len(),
                columns.len()
            )));
        }
        let mut row = Vec::with_capacity(columns.len() - 1);
        for (i, cell) in cells.iter().enumerate() {
            if i == label_col {
                let y: usize = cell
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad label {cell:?} on row {}", lineno + 2)))?;
                labels.push(y);
            } else if Some(i) == group_col {
                if cell.is_empty() {
                    side.push(None);
                } else {
                    let z: usize = cell
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad group {cell:?} on row {}", lineno + 2)))?;
                    side.push(Some(z));
                }
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad feature {cell:?} on row {}", lineno + 2)))?;
                row.push(v);
            }
        }
        if group_col.is_none() {
            side.push(None);
        }
        features.push(row);
    }
    if labels.is_empty() {
        return Err(Error::Parse("CSV has a header but no data rows".into()));
    }
    let num_labels = labels.iter().copied().max().unwrap() + 1;
    let num_groups = side.iter().flatten().copied().max().map_or(0, |g| g + 1);
    LabeledDataset::new(features, labels, Some(side), num_labels, num_groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(name: &str, text: &str) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(format!("ecp-csv-{name}-{}", std::process::id()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        path
    }

    #[test]
    fn header_and_three_rows() {
        let path = write_tmp("ok", "f0,f1,label\n0.5,1.5,0\n1.0,2.0,1\n-1.0,0.0,0\n");
        let ds = load_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.feature_row(1), &[1.0, 2.0]);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn group_column_with_missing_values() {
        let path = write_tmp("grp", "f0,label,group\n1.0,0,2\n2.0,1,\n3.0,1,0\n");
        let schema = CsvSchema { label: "label".into(), group: Some("group".into()) };
        let ds = load_csv(&path, &schema).unwrap();
        assert_eq!(ds.side(0), Some(2));
        assert_eq!(ds.side(1), None);
        assert_eq!(ds.num_groups(), 3);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn arity_mismatch_is_an_error() {
        let path = write_tmp("bad", "f0,f1,label\n0.5,0\n");
        assert!(load_csv(&path, &CsvSchema::default()).is_err());
        std::fs::remove_file(path).ok();
    }
}
