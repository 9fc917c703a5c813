//! Trip/count ingestion, binning and low-demand filtering.

use std::fs::File;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::registry::NodeRegistry;
use super::tensor::{DemandTensor, StudyWindow, INFLOW, OUTFLOW};
use crate::error::{Error, Result};
use crate::mode::Mode;

/// Header names for trip files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripColumns {
    pub origin: String,
    pub destination: String,
    pub start: String,
    pub end: String,
}

impl Default for TripColumns {
    fn default() -> Self {
        Self {
            origin: "origin".into(),
            destination: "destination".into(),
            start: "start".into(),
            end: "end".into(),
        }
    }
}

/// Header names for per-bin station counts (e.g. turnstile aggregates).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CountColumns {
    pub station: String,
    pub bin_start: String,
    pub entries: String,
    pub exits: String,
    /// Channel receiving entries; exits go to the other one.
    pub entries_to_outflow: bool,
}

impl Default for CountColumns {
    fn default() -> Self {
        Self {
            station: "station".into(),
            bin_start: "bin_start".into(),
            entries: "entries".into(),
            exits: "exits".into(),
            entries_to_outflow: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripRecord {
    pub origin: usize,
    pub destination: usize,
    pub start: i64,
    pub end: i64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DropCounts {
    pub unknown_node: usize,
    pub out_of_window: usize,
    pub invalid: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.unknown_node + self.out_of_window + self.invalid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripTable {
    pub mode: Mode,
    pub records: Vec<TripRecord>,
    pub dropped: DropCounts,
}

/// Unix seconds (integer or fractional), RFC 3339, or a naive
/// `YYYY-MM-DD[ T]HH:MM:SS[.fff]` read as UTC.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then(|| v.floor() as i64);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

fn open_csv(path: &Path, delimiter: u8) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_reader(file))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Malformed(format!("{}: missing column {name:?}", path.display())))
}

/// Reads trip records, dropping rows whose nodes are unknown, whose times
/// fall outside the study window, or which are otherwise invalid
/// (unparseable, or ending before they start).
pub fn load_trips(
    path: &Path,
    mode: Mode,
    registry: &NodeRegistry,
    columns: &TripColumns,
    window: &StudyWindow,
    delimiter: u8,
) -> Result<TripTable> {
    let mut rdr = open_csv(path, delimiter)?;
    let headers = rdr.headers()?.clone();
    let idx = [
        column(&headers, &columns.origin, path)?,
        column(&headers, &columns.destination, path)?,
        column(&headers, &columns.start, path)?,
        column(&headers, &columns.end, path)?,
    ];
    let mut records = Vec::new();
    let mut dropped = DropCounts::default();
    let mut rows = 0usize;
    for row in rdr.records() {
        let row = row?;
        rows += 1;
        let field = |i: usize| row.get(idx[i]).unwrap_or("").trim();
        let (Some(start), Some(end)) = (parse_timestamp(field(2)), parse_timestamp(field(3))) else {
            dropped.invalid += 1;
            continue;
        };
        if end < start {
            dropped.invalid += 1;
            continue;
        }
        let (Some(origin), Some(destination)) =
            (registry.index_of(field(0)), registry.index_of(field(1)))
        else {
            dropped.unknown_node += 1;
            continue;
        };
        if !window.contains(start) || !window.contains(end) {
            dropped.out_of_window += 1;
            continue;
        }
        records.push(TripRecord {
            origin,
            destination,
            start,
            end,
        });
    }
    if rows > 0 && dropped.total() * 2 > rows {
        return Err(Error::Malformed(format!(
            "{}: {} of {rows} rows dropped ({dropped:?})",
            path.display(),
            dropped.total()
        )));
    }
    Ok(TripTable {
        mode,
        records,
        dropped,
    })
}

/// Trip starts count as outflow of the origin in the start bin; trip ends
/// count as inflow of the destination in the end bin.
pub fn bin_demand(trips: &TripTable, window: &StudyWindow, registry: &NodeRegistry) -> Result<DemandTensor> {
    window.validate()?;
    let mut t = DemandTensor::for_window(trips.mode, registry.len(), window);
    for r in &trips.records {
        let (Some(sb), Some(eb)) = (window.bin_of(r.start), window.bin_of(r.end)) else {
            return Err(Error::Malformed(format!("trip {r:?} outside the study window")));
        };
        t.add(r.origin, sb, OUTFLOW, 1.0);
        t.add(r.destination, eb, INFLOW, 1.0);
    }
    Ok(t)
}

/// Aggregates per-station per-bin entry/exit counts. Rows for the same
/// station and bin (e.g. several turnstiles) are summed; missing bins are
/// zero. Rows for unknown stations or outside the window are skipped and
/// counted.
pub fn ingest_counts(
    path: &Path,
    registry: &NodeRegistry,
    columns: &CountColumns,
    window: &StudyWindow,
    delimiter: u8,
) -> Result<(DemandTensor, DropCounts)> {
    window.validate()?;
    let mut rdr = open_csv(path, delimiter)?;
    let headers = rdr.headers()?.clone();
    let idx = [
        column(&headers, &columns.station, path)?,
        column(&headers, &columns.bin_start, path)?,
        column(&headers, &columns.entries, path)?,
        column(&headers, &columns.exits, path)?,
    ];
    let (entry_ch, exit_ch) = if columns.entries_to_outflow {
        (OUTFLOW, INFLOW)
    } else {
        (INFLOW, OUTFLOW)
    };
    let mut t = DemandTensor::for_window(registry.mode(), registry.len(), window);
    let mut dropped = DropCounts::default();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let field = |i: usize| row.get(idx[i]).unwrap_or("").trim();
        let count = |i: usize| -> Result<f64> {
            let v: f64 = field(i).parse().map_err(|_| {
                Error::Malformed(format!("{} row {}: bad count {:?}", path.display(), line + 2, field(i)))
            })?;
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Malformed(format!(
                    "{} row {}: negative count {v}",
                    path.display(),
                    line + 2
                )));
            }
            Ok(v)
        };
        let (entries, exits) = (count(2)?, count(3)?);
        let Some(node) = registry.index_of(field(0)) else {
            dropped.unknown_node += 1;
            continue;
        };
        let Some(bin) = parse_timestamp(field(1)).and_then(|ts| window.bin_of(ts)) else {
            dropped.out_of_window += 1;
            continue;
        };
        t.add(node, bin, entry_ch, entries);
        t.add(node, bin, exit_ch, exits);
    }
    Ok((t, dropped))
}

/// Mean orders per hour of a node: `(inflow + outflow)` per bin divided by
/// the bin length in hours, averaged over the whole window.
pub fn orders_per_hour(tensor: &DemandTensor, node: usize) -> f64 {
    let hours = tensor.interval_secs as f64 / 3600.0;
    let total: f64 = tensor.total_series(node).iter().sum();
    total / (tensor.n_steps as f64 * hours)
}

/// Drops nodes averaging fewer than `threshold` orders per hour.
pub fn filter_low_demand(
    tensor: &DemandTensor,
    registry: &NodeRegistry,
    threshold: f64,
) -> Result<(DemandTensor, NodeRegistry)> {
    if threshold < 0.0 || !threshold.is_finite() {
        return Err(Error::Config(format!("threshold {threshold} must be >= 0")));
    }
    if tensor.n_nodes != registry.len() {
        return Err(Error::Config(format!(
            "{} tensor has {} nodes but registry has {}",
            tensor.mode,
            tensor.n_nodes,
            registry.len()
        )));
    }
    let keep: Vec<usize> = (0..tensor.n_nodes)
        .filter(|&i| orders_per_hour(tensor, i) >= threshold)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "all {} nodes fall below {threshold} orders/hour",
            tensor.mode
        )));
    }
    Ok((tensor.select_nodes(&keep), registry.subset(&keep)?))
}
