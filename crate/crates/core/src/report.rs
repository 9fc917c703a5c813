//! Plot-ready exports: error tables, explanation tables and GeoJSON
//! overlays. Nothing here renders; it only writes files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{Location, NodeRegistry};
use crate::error::{Error, Result};
use crate::explainer::{ExplanationSubgraph, ImportanceTable};
use crate::mode::{Mode, ModeMap};
use crate::trainer::{CellMetrics, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    /// CSV tables.
    Delimited,
    /// JSON documents.
    Structured,
    GeoJson,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Delimited, ReportFormat::Structured, ReportFormat::GeoJson];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportOptions {
    /// Per-station and per-time-of-day rows; off gives header-only files.
    pub breakdowns: bool,
    pub per_channel: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            breakdowns: true,
            per_channel: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Explanations<'a> {
    pub table: &'a ImportanceTable,
    pub subgraphs: &'a [ExplanationSubgraph],
}

/// What a report can draw on. Either part may be absent.
#[derive(Debug, Clone, Copy)]
pub struct ReportInput<'a> {
    pub metrics: Option<&'a MetricsReport>,
    pub explanations: Option<Explanations<'a>>,
    pub registries: &'a ModeMap<NodeRegistry>,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_cells(path: &Path, key: &str, cells: &[CellMetrics], include: bool) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([key, "n", "rmse", "mae"])?;
    if include {
        for c in cells {
            w.write_record([c.key.clone(), c.n.to_string(), c.rmse.to_string(), c.mae.to_string()])?;
        }
    }
    finish(w, path)
}

pub fn write_per_station(path: &Path, report: &MetricsReport, bike: &NodeRegistry, include: bool) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["index", "id", "name", "lat", "lon", "n", "rmse", "mae"])?;
    if include {
        for (i, c) in report.per_station.iter().enumerate() {
            let node = bike.node(i);
            let (lat, lon) = node
                .location
                .as_ref()
                .map_or((String::new(), String::new()), |l| {
                    let p = l.centroid();
                    (p.lat.to_string(), p.lon.to_string())
                });
            w.write_record([
                i.to_string(),
                node.id.clone(),
                node.name.clone(),
                lat,
                lon,
                c.n.to_string(),
                c.rmse.to_string(),
                c.mae.to_string(),
            ])?;
        }
    }
    finish(w, path)
}

pub fn write_per_time_of_day(path: &Path, report: &MetricsReport, include: bool) -> Result<()> {
    write_cells(path, "time_of_day", &report.per_time_of_day, include)
}

pub fn write_importance(path: &Path, table: &ImportanceTable) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["mode", "index", "id", "count", "frequency"])?;
    for r in &table.rows {
        w.write_record([r.mode.name().to_string(), r.index.to_string(), r.id.clone(), r.count.to_string(), r.frequency.to_string()])?;
    }
    finish(w, path)
}

/// One row per (target, mode, ranked node); `selected` marks the chosen
/// prefix.
pub fn write_explanations(path: &Path, subgraphs: &[ExplanationSubgraph]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["target", "mode", "rank", "index", "id", "weight", "selected"])?;
    for s in subgraphs {
        for (mode, list) in &s.ranked {
            let n_sel = s.selected(*mode).len();
            for (rank, n) in list.iter().enumerate() {
                w.write_record([
                    s.target.to_string(),
                    mode.name().to_string(),
                    (rank + 1).to_string(),
                    n.index.to_string(),
                    n.id.clone(),
                    n.weight.to_string(),
                    (rank < n_sel).to_string(),
                ])?;
            }
        }
    }
    finish(w, path)
}

fn geometry(loc: &Location) -> Value {
    match loc {
        Location::Point(p) => json!({"type": "Point", "coordinates": [p.lon, p.lat]}),
        Location::Polygon(ring) => {
            let mut coords: Vec<Value> = ring.iter().map(|p| json!([p.lon, p.lat])).collect();
            if let Some(first) = coords.first().cloned() {
                coords.push(first);
            }
            json!({"type": "Polygon", "coordinates": [coords]})
        }
    }
}

fn feature(reg: &NodeRegistry, index: usize, mut props: serde_json::Map<String, Value>) -> Option<Value> {
    let node = reg.node(index);
    let loc = node.location.as_ref()?;
    props.insert("mode".into(), json!(reg.mode().name()));
    props.insert("index".into(), json!(index));
    props.insert("id".into(), json!(node.id));
    props.insert("name".into(), json!(node.name));
    Some(json!({"type": "Feature", "geometry": geometry(loc), "properties": props}))
}

fn collection(features: Vec<Value>) -> Value {
    json!({"type": "FeatureCollection", "features": features})
}

/// Bike stations as points carrying their test errors.
pub fn station_errors_geojson(report: &MetricsReport, bike: &NodeRegistry) -> Value {
    let features = report
        .per_station
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let mut p = serde_json::Map::new();
            p.insert("n".into(), json!(c.n));
            p.insert("rmse".into(), json!(c.rmse));
            p.insert("mae".into(), json!(c.mae));
            feature(bike, i, p)
        })
        .collect();
    collection(features)
}

/// Each explained station with its selected nodes; zones keep their
/// polygons.
pub fn explanations_geojson(subgraphs: &[ExplanationSubgraph], registries: &ModeMap<NodeRegistry>) -> Result<Value> {
    let bike = registries
        .get(Mode::Bike)
        .ok_or_else(|| Error::Config("no bike registry".into()))?;
    let mut features = Vec::new();
    for s in subgraphs {
        let mut p = serde_json::Map::new();
        p.insert("target".into(), json!(s.target));
        p.insert("role".into(), json!("target"));
        features.extend(feature(bike, s.target, p));
        for (mode, list) in &s.selected {
            let reg = registries
                .get(*mode)
                .ok_or_else(|| Error::Config(format!("no {mode} registry")))?;
            for (rank, n) in list.iter().enumerate() {
                let mut p = serde_json::Map::new();
                p.insert("target".into(), json!(s.target));
                p.insert("role".into(), json!("selected"));
                p.insert("rank".into(), json!(rank + 1));
                p.insert("weight".into(), json!(n.weight));
                features.extend(feature(reg, n.index, p));
            }
        }
    }
    Ok(collection(features))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), v)?;
    Ok(())
}

/// Writes every requested table for whatever `input` holds and returns
/// the files written.
pub fn export_report(input: &ReportInput, dir: &Path, formats: &[ReportFormat], opts: ReportOptions) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    let mut emit = |name: &str, f: &mut dyn FnMut(&Path) -> Result<()>| -> Result<()> {
        let p = dir.join(name);
        f(&p)?;
        out.push(p);
        Ok(())
    };
    let bike = input.registries.get(Mode::Bike);
    for &fmt in formats {
        match fmt {
            ReportFormat::Delimited => {
                if let Some(m) = input.metrics {
                    let bike = bike.ok_or_else(|| Error::Config("no bike registry".into()))?;
                    emit("per_station.csv", &mut |p| write_per_station(p, m, bike, opts.breakdowns))?;
                    emit("per_time_of_day.csv", &mut |p| write_per_time_of_day(p, m, opts.breakdowns))?;
                    emit("per_channel.csv", &mut |p| write_cells(p, "channel", &m.per_channel, opts.per_channel))?;
                }
                if let Some(e) = input.explanations {
                    emit("importance.csv", &mut |p| write_importance(p, e.table))?;
                    emit("explanations.csv", &mut |p| write_explanations(p, e.subgraphs))?;
                }
            }
            ReportFormat::Structured => {
                if let Some(m) = input.metrics {
                    emit("metrics.json", &mut |p| write_json(p, m))?;
                }
                if let Some(e) = input.explanations {
                    emit("explanations.json", &mut |p| {
                        write_json(p, &json!({"importance": e.table, "subgraphs": e.subgraphs}))
                    })?;
                }
            }
            ReportFormat::GeoJson => {
                if let Some(m) = input.metrics {
                    let bike = bike.ok_or_else(|| Error::Config("no bike registry".into()))?;
                    emit("station_errors.geojson", &mut |p| write_json(p, &station_errors_geojson(m, bike)))?;
                }
                if let Some(e) = input.explanations {
                    let v = explanations_geojson(e.subgraphs, input.registries)?;
                    emit("explanations.geojson", &mut |p| write_json(p, &v))?;
                }
            }
        }
    }
    Ok(out)
}
