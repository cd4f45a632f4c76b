use crate::DatasetError;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shutter {
    #[serde(rename = "RS")]
    Rs,
    #[serde(rename = "GS")]
    Gs,
}

impl std::fmt::Display for Shutter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Shutter::Rs => "RS",
            Shutter::Gs => "GS",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub timestamp_ns: i64,
    /// Relative to the dataset directory.
    pub path: String,
    pub shutter: Shutter,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DatasetError::csv(path, e))?;
    for e in entries {
        w.serialize(e).map_err(|e| DatasetError::csv(path, e))?;
    }
    w.flush().map_err(|e| DatasetError::io(path, e))
}

/// Reads `manifest.csv`; timestamps must strictly increase.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DatasetError::csv(path, e))?;
    let header = r.headers().map_err(|e| DatasetError::csv(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["timestamp_ns", "path", "shutter"] {
        return Err(DatasetError::Parse {
            file: path.display().to_string(),
            line: 1,
            message: "header must be 'timestamp_ns,path,shutter'".into(),
        });
    }
    let mut out: Vec<ManifestEntry> = Vec::new();
    for (i, rec) in r.deserialize::<ManifestEntry>().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| DatasetError::Parse {
            file: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        if let Some(prev) = out.last() {
            if rec.timestamp_ns <= prev.timestamp_ns {
                return Err(DatasetError::Parse {
                    file: path.display().to_string(),
                    line,
                    message: format!(
                        "timestamp {} is not after the previous image ({})",
                        rec.timestamp_ns, prev.timestamp_ns
                    ),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}
