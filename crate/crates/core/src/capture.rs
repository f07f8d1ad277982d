//! Snapshot stores of client update canvases.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "CGFG"  u16 version=1  u32 rows  u32 cols  u32 count
//! count × { u32 client_id  u32 round  rows·cols × f32 }
//! ```

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bytes::{header, put_f32s, Cursor};
use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CGFG";
pub const STORE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4;
pub const RECORD_PREFIX_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub client_id: u32,
    pub round: u32,
    /// Values are kept at f32 precision so the store round-trips exactly.
    pub canvas: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotStore {
    rows: usize,
    cols: usize,
    records: Vec<Snapshot>,
}

impl SnapshotStore {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, records: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Snapshot] {
        &self.records
    }

    pub fn canvases(&self) -> Vec<Tensor> {
        self.records.iter().map(|r| r.canvas.clone()).collect()
    }

    /// Appends a record, rounding the canvas to f32.
    pub fn push(&mut self, client_id: u32, round: u32, canvas: &Tensor) -> Result<()> {
        if canvas.shape() != [self.rows, self.cols] {
            return Err(Error::Shape(format!(
                "snapshot {:?} does not match store {}x{}",
                canvas.shape(),
                self.rows,
                self.cols
            )));
        }
        if self.records.iter().any(|r| r.client_id == client_id && r.round == round) {
            return Err(Error::InvalidArgument(format!("duplicate snapshot (client {client_id}, round {round})")));
        }
        self.records.push(Snapshot { client_id, round, canvas: canvas.round_f32() });
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(HEADER_LEN + self.records.len() * (RECORD_PREFIX_LEN + 4 * self.rows * self.cols));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.client_id.to_le_bytes());
            out.extend_from_slice(&r.round.to_le_bytes());
            put_f32s(&mut out, r.canvas.data());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(buf);
        header(&mut cur, MAGIC, STORE_VERSION)?;
        let rows = cur.u32("rows")? as usize;
        let cols = cur.u32("cols")? as usize;
        let count = cur.u32("count")? as usize;
        let mut store = Self::new(rows, cols);
        for i in 0..count {
            let client_id = cur.u32("record client id")?;
            let round = cur.u32("record round")?;
            let data = cur.f32s(rows * cols, &format!("record {i} payload"))?;
            let canvas = Tensor::new(&[rows, cols], data)?;
            store.push(client_id, round, &canvas).map_err(|e| Error::Malformed(e.to_string()))?;
        }
        if cur.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes", cur.remaining())));
        }
        Ok(store)
    }
}

pub fn write_store(store: &SnapshotStore, path: &Path) -> Result<()> {
    std::fs::write(path, store.to_bytes())?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<SnapshotStore> {
    SnapshotStore::from_bytes(&std::fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.9, seed: 0 }
    }
}

/// Shuffled train/test partition of the records. The train side gets
/// `round(fraction · n)` records, clamped so both sides are non-empty.
pub fn split(store: &SnapshotStore, spec: &SplitSpec) -> Result<(SnapshotStore, SnapshotStore)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {} not in (0, 1)", spec.train_fraction)));
    }
    let n = store.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("{n} snapshots cannot be split")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(spec.seed, &[stream::SPLIT, 1]));
    let n_train = ((n as f64 * spec.train_fraction).round() as usize).clamp(1, n - 1);
    let pick = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        SnapshotStore {
            rows: store.rows,
            cols: store.cols,
            records: ids.iter().map(|&i| store.records[i].clone()).collect(),
        }
    };
    Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RoundStats {
    pub round: u32,
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

/// Per-round extrema, mean and population standard deviation of all
/// canvas values recorded in that round.
pub fn snapshot_stats(store: &SnapshotStore) -> Vec<RoundStats> {
    let rounds: Vec<u32> = {
        let mut r: Vec<u32> = store.records.iter().map(|s| s.round).collect::<HashSet<_>>().into_iter().collect();
        r.sort_unstable();
        r
    };
    rounds
        .into_iter()
        .map(|round| {
            let recs: Vec<&Snapshot> = store.records.iter().filter(|s| s.round == round).collect();
            let vals = || recs.iter().flat_map(|s| s.canvas.data().iter().copied());
            let n = vals().count() as f64;
            let mean = vals().sum::<f64>() / n;
            let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            RoundStats {
                round,
                count: recs.len(),
                min: vals().fold(f64::INFINITY, f64::min),
                max: vals().fold(f64::NEG_INFINITY, f64::max),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}
