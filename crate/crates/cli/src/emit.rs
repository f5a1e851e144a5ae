//! Result writers. All output goes through here, single-threaded, with one
//! header row per CSV; units ride as column-name suffixes (_s seconds,
//! _nats information) and coordinates are in domain units.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::Failure;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut file = File::create(path)
        .map_err(|e| Failure::Io(format!("create {}: {e}", path.display())))?;
    serde_json::to_writer_pretty(&mut file, value)
        .map_err(|e| Failure::Io(format!("write {}: {e}", path.display())))?;
    file.write_all(b"\n")
        .map_err(|e| Failure::Io(format!("write {}: {e}", path.display())))?;
    Ok(())
}

pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), Failure> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Failure::Io(format!("create {}: {e}", path.display())))?;
    writer
        .write_record(header)
        .map_err(|e| Failure::Io(format!("write {}: {e}", path.display())))?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Failure::Io(format!(
                "row width {} does not match header width {} in {}",
                row.len(),
                header.len(),
                path.display()
            )));
        }
        writer
            .write_record(&row)
            .map_err(|e| Failure::Io(format!("write {}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Failure::Io(format!("flush {}: {e}", path.display())))?;
    Ok(())
}

/// Shortest-roundtrip float formatting; deterministic for a given value.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}
