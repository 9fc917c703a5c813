use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mode::Mode;

/// Latitude/longitude in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Location {
    Point(LatLon),
    /// Outer ring of a zone; the first vertex need not be repeated.
    Polygon(Vec<LatLon>),
}

impl Location {
    /// Point itself, or the area centroid of a polygon (planar shoelace in
    /// degrees, adequate for city-scale zones).
    pub fn centroid(&self) -> LatLon {
        match self {
            Location::Point(p) => *p,
            Location::Polygon(ring) => polygon_centroid(ring),
        }
    }
}

fn polygon_centroid(ring: &[LatLon]) -> LatLon {
    let n = ring.len();
    let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (p, q) = (ring[i], ring[(i + 1) % n]);
        let cross = p.lon * q.lat - q.lon * p.lat;
        a += cross;
        cx += (p.lon + q.lon) * cross;
        cy += (p.lat + q.lat) * cross;
    }
    if a.abs() < 1e-18 {
        // degenerate ring: vertex mean
        let k = n.max(1) as f64;
        return LatLon {
            lat: ring.iter().map(|p| p.lat).sum::<f64>() / k,
            lon: ring.iter().map(|p| p.lon).sum::<f64>() / k,
        };
    }
    LatLon {
        lat: cy / (3.0 * a),
        lon: cx / (3.0 * a),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeInfo {
    pub id: String,
    pub name: String,
    pub location: Option<Location>,
}

impl NodeInfo {
    pub fn point(id: impl Into<String>, name: impl Into<String>, lat: f64, lon: f64) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            location: Some(Location::Point(LatLon { lat, lon })),
        }
    }
}

/// Stations or zones of one mode, in tensor row order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRegistry {
    mode: Mode,
    nodes: Vec<NodeInfo>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryRow {
    id: String,
    #[serde(default)]
    name: String,
    #[serde(default)]
    lat: Option<f64>,
    #[serde(default)]
    lon: Option<f64>,
    /// `lat lon;lat lon;...`
    #[serde(default)]
    polygon: Option<String>,
}

impl NodeRegistry {
    pub fn new(mode: Mode, nodes: Vec<NodeInfo>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::EmptyDataset(format!("{mode} registry has no nodes")));
        }
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::Malformed(format!(
                    "duplicate node id {:?} in {mode} registry",
                    n.id
                )));
            }
        }
        Ok(Self { mode, nodes, index })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeInfo] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &NodeInfo {
        &self.nodes[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.id.as_str())
    }

    /// Centroids of every node; fails if any node lacks a location.
    pub fn centroids(&self) -> Result<Vec<LatLon>> {
        self.nodes
            .iter()
            .map(|n| {
                n.location.as_ref().map(Location::centroid).ok_or_else(|| {
                    Error::Config(format!("{} node {:?} has no coordinates", self.mode, n.id))
                })
            })
            .collect()
    }

    /// Keeps the nodes at `keep` (in that order).
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        Self::new(self.mode, keep.iter().map(|&i| self.nodes[i].clone()).collect())
    }

    pub fn load_csv(path: &Path, mode: Mode) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Malformed(format!("cannot read {}: {e}", path.display())),
            _ => Error::Csv(e),
        })?;
        let mut nodes = Vec::new();
        for row in rdr.deserialize::<RegistryRow>() {
            let row = row?;
            let location = match (row.lat, row.lon, row.polygon.as_deref()) {
                (Some(lat), Some(lon), _) => Some(Location::Point(LatLon { lat, lon })),
                (_, _, Some(poly)) if !poly.trim().is_empty() => {
                    Some(Location::Polygon(parse_ring(poly)?))
                }
                _ => None,
            };
            nodes.push(NodeInfo {
                name: if row.name.is_empty() { row.id.clone() } else { row.name },
                id: row.id,
                location,
            });
        }
        Self::new(mode, nodes)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for n in &self.nodes {
            let (lat, lon, polygon) = match &n.location {
                Some(Location::Point(p)) => (Some(p.lat), Some(p.lon), None),
                Some(Location::Polygon(r)) => (
                    None,
                    None,
                    Some(
                        r.iter()
                            .map(|p| format!("{} {}", p.lat, p.lon))
                            .collect::<Vec<_>>()
                            .join(";"),
                    ),
                ),
                None => (None, None, None),
            };
            w.serialize(RegistryRow {
                id: n.id.clone(),
                name: n.name.clone(),
                lat,
                lon,
                polygon,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn parse_ring(s: &str) -> Result<Vec<LatLon>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let mut it = pair.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next()) {
                (Some(Ok(lat)), Some(Ok(lon))) => Ok(LatLon { lat, lon }),
                _ => Err(Error::Malformed(format!("bad polygon vertex {pair:?}"))),
            }
        })
        .collect()
}
