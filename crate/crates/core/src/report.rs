//! CSV output and cross-run comparison tables.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fedsim::RoundReport;

/// Writes `rows` with a header row taken from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// The same CSV as [`write_csv`], as a string.
pub fn to_csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Malformed(e.to_string()))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Malformed(format!("csv: {other:?}")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub round: usize,
    pub run: String,
    pub test_acc: f64,
    pub test_loss: f64,
    pub uplink_bytes: u64,
    pub uplink_bytes_uncompressed: u64,
    /// `1 − uplink / uncompressed`.
    pub bytes_saved: f64,
    pub recon_snr: f64,
    pub delta_spent: f64,
}

/// One row per (round, run), ordered by round and then by the order of
/// `runs`.
pub fn compare(runs: &[(String, Vec<RoundReport>)]) -> Result<Vec<ComparisonRow>> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no transcripts to compare".into()));
    }
    let mut rows = Vec::new();
    for (name, reports) in runs {
        for r in reports {
            rows.push(ComparisonRow {
                round: r.round,
                run: name.clone(),
                test_acc: r.test_acc,
                test_loss: r.test_loss,
                uplink_bytes: r.uplink_bytes,
                uplink_bytes_uncompressed: r.uplink_bytes_uncompressed,
                bytes_saved: 1.0 - r.uplink_bytes as f64 / r.uplink_bytes_uncompressed as f64,
                recon_snr: r.recon_snr,
                delta_spent: r.delta_spent,
            });
        }
    }
    // Stable sort keeps the run order within a round.
    rows.sort_by_key(|r| r.round);
    Ok(rows)
}
