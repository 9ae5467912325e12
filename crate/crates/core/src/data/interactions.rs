use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 5] = ["user_id", "item_id", "item_title", "timestamp", "label"];

/// One logged user-item event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub item_title: String,
    pub timestamp: u64,
    pub label: u8,
}

impl Interaction {
    /// Total order used for temporal splitting.
    pub fn temporal_key(&self) -> (u64, &str, &str) {
        (self.timestamp, &self.user_id, &self.item_id)
    }
}

/// Layout of an interaction log on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvFormat {
    pub delimiter: u8,
}

impl Default for CsvFormat {
    fn default() -> Self {
        Self { delimiter: b',' }
    }
}

/// Parses and validates an interaction CSV. Errors carry the 1-based line
/// number of the offending row.
pub fn load_interactions(path: &Path, format: &CsvFormat) -> Result<Vec<Interaction>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_interactions(file, path, format)
}

pub fn read_interactions<R: std::io::Read>(
    reader: R,
    path: &Path,
    format: &CsvFormat,
) -> Result<Vec<Interaction>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut idx = [0usize; 5];
    for (slot, col) in idx.iter_mut().zip(COLUMNS) {
        *slot = header
            .iter()
            .position(|h| h.trim() == col)
            .ok_or_else(|| Error::Schema {
                path: path.to_path_buf(),
                msg: format!("missing column `{col}`"),
            })?;
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Validation {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Validation {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let field = |i: usize| record.get(idx[i]).unwrap_or("").trim();
        let timestamp = field(3)
            .parse::<u64>()
            .map_err(|_| bad(format!("timestamp `{}` is not a non-negative integer", field(3))))?;
        let label = match field(4) {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label `{other}` is not binary"))),
        };
        if field(0).is_empty() || field(1).is_empty() || field(2).is_empty() {
            return Err(bad("empty user_id, item_id or item_title".into()));
        }
        out.push(Interaction {
            user_id: field(0).to_string(),
            item_id: field(1).to_string(),
            item_title: field(2).to_string(),
            timestamp,
            label,
        });
    }
    Ok(out)
}

pub fn write_interactions(path: &Path, data: &[Interaction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for row in data {
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
