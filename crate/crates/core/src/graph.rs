//! Geographic and pattern adjacency, row normalization and the
//! multi-relational graph container.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use diffcore::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DemandData, DemandTensor, LatLon, NodeRegistry, INFLOW, OUTFLOW};
use crate::error::{Error, Result};
use crate::mode::Mode;

const ADJ_MAGIC: &[u8; 8] = b"MRGADJ01";
const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjKind {
    Geo,
    Pattern,
}

impl AdjKind {
    pub const ALL: [AdjKind; 2] = [AdjKind::Geo, AdjKind::Pattern];

    pub fn name(self) -> &'static str {
        match self {
            AdjKind::Geo => "geo",
            AdjKind::Pattern => "pattern",
        }
    }
}

impl fmt::Display for AdjKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which demand series drives pattern similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternChannel {
    #[default]
    Total,
    Inflow,
    Outflow,
}

impl PatternChannel {
    fn series(self, t: &DemandTensor, node: usize, steps: usize) -> Vec<f64> {
        (0..steps)
            .map(|s| match self {
                PatternChannel::Total => t.get(node, s, INFLOW) + t.get(node, s, OUTFLOW),
                PatternChannel::Inflow => t.get(node, s, INFLOW),
                PatternChannel::Outflow => t.get(node, s, OUTFLOW),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Gaussian kernel width in metres.
    pub sigma_m: f64,
    /// Distance cutoff in metres.
    pub d_max_m: f64,
    /// Neighbours kept per row of a pattern graph.
    pub k: usize,
    pub pattern_channel: PatternChannel,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            sigma_m: 500.0,
            d_max_m: 1200.0,
            k: 5,
            pattern_channel: PatternChannel::Total,
        }
    }
}

/// Dense nonnegative matrix, rows indexed by `rows` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    pub rows: Mode,
    pub cols: Mode,
    pub kind: AdjKind,
    pub n_rows: usize,
    pub n_cols: usize,
    pub values: Vec<f64>,
}

impl AdjacencyMatrix {
    pub fn zeros(rows: Mode, cols: Mode, kind: AdjKind, n_rows: usize, n_cols: usize) -> Self {
        Self {
            rows,
            cols,
            kind,
            n_rows,
            n_cols,
            values: vec![0.0; n_rows * n_cols],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n_cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn is_intra(&self) -> bool {
        self.rows == self.cols
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.n_rows, self.n_cols], self.values.clone()).expect("matrix shape")
    }

    pub fn sha256(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("write to vec");
        hex::encode(Sha256::digest(&buf))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(ADJ_MAGIC)?;
        w.write_all(&[self.rows.index() as u8, self.cols.index() as u8, self.kind as u8])?;
        w.write_all(&(self.n_rows as u64).to_le_bytes())?;
        w.write_all(&(self.n_cols as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: String| Error::Malformed(format!("adjacency file: {m}"));
        let mut head = [0u8; 8 + 3 + 16];
        r.read_exact(&mut head).map_err(|_| bad("truncated header".into()))?;
        if &head[..8] != ADJ_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mode = |b: u8| Mode::ALL.get(b as usize).copied().ok_or_else(|| bad(format!("mode byte {b}")));
        let kind = match head[10] {
            0 => AdjKind::Geo,
            1 => AdjKind::Pattern,
            b => return Err(bad(format!("kind byte {b}"))),
        };
        let n_rows = u64::from_le_bytes(head[11..19].try_into().expect("8 bytes")) as usize;
        let n_cols = u64::from_le_bytes(head[19..27].try_into().expect("8 bytes")) as usize;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| bad(e.to_string()))?;
        if Some(payload.len()) != n_rows.checked_mul(n_cols).and_then(|n| n.checked_mul(8)) {
            return Err(bad(format!("{} payload bytes for {n_rows}x{n_cols}", payload.len())));
        }
        Ok(Self {
            rows: mode(head[8])?,
            cols: mode(head[9])?,
            kind,
            n_rows,
            n_cols,
            values: payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        })
    }
}

/// Great-circle distance in metres.
pub fn haversine_m(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// `exp(-d²/σ²)` within `d_max`, zero beyond; self-loops of 1 when both
/// sides are the same mode.
pub fn geo_adjacency(rows: &NodeRegistry, cols: &NodeRegistry, sigma_m: f64, d_max_m: f64) -> Result<AdjacencyMatrix> {
    if !(sigma_m > 0.0 && d_max_m > 0.0) {
        return Err(Error::Config(format!("sigma ({sigma_m}) and d_max ({d_max_m}) must be positive")));
    }
    let (rp, cp) = (rows.centroids()?, cols.centroids()?);
    let mut a = AdjacencyMatrix::zeros(rows.mode(), cols.mode(), AdjKind::Geo, rp.len(), cp.len());
    for (i, &p) in rp.iter().enumerate() {
        for (j, &q) in cp.iter().enumerate() {
            let d = haversine_m(p, q);
            if d <= d_max_m {
                a.set(i, j, (-(d * d) / (sigma_m * sigma_m)).exp());
            }
        }
    }
    if a.is_intra() {
        for i in 0..a.n_rows {
            a.set(i, i, 1.0);
        }
    }
    Ok(a)
}

/// Pearson correlation; 0 when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Clamped Pearson similarity over the first `train_steps` bins, keeping
/// the `k` largest entries per row (ties to the lower column). For
/// same-mode graphs the diagonal is excluded from the ranking and then set
/// to 1.
pub fn pattern_adjacency(
    rows: &DemandTensor,
    cols: &DemandTensor,
    train_steps: usize,
    k: usize,
    channel: PatternChannel,
) -> Result<AdjacencyMatrix> {
    if k == 0 {
        return Err(Error::Config("pattern k must be >= 1".into()));
    }
    if rows.interval_secs != cols.interval_secs || train_steps > rows.n_steps.min(cols.n_steps) || train_steps < 2 {
        return Err(Error::Config(format!(
            "pattern graph {}x{} needs a shared interval and 2..={} training bins, got {train_steps}",
            rows.mode,
            cols.mode,
            rows.n_steps.min(cols.n_steps)
        )));
    }
    let intra = rows.mode == cols.mode;
    let rs: Vec<Vec<f64>> = (0..rows.n_nodes).map(|i| channel.series(rows, i, train_steps)).collect();
    let cs: Vec<Vec<f64>> = if intra {
        rs.clone()
    } else {
        (0..cols.n_nodes).map(|j| channel.series(cols, j, train_steps)).collect()
    };
    let mut a = AdjacencyMatrix::zeros(rows.mode, cols.mode, AdjKind::Pattern, rows.n_nodes, cols.n_nodes);
    for (i, x) in rs.iter().enumerate() {
        let mut cand: Vec<(usize, f64)> = cs
            .iter()
            .enumerate()
            .filter(|&(j, _)| !(intra && i == j))
            .map(|(j, y)| (j, pearson(x, y).max(0.0)))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        cand.sort_by(|p, q| q.1.total_cmp(&p.1).then(p.0.cmp(&q.0)));
        for &(j, s) in cand.iter().take(k) {
            a.set(i, j, s);
        }
        if intra {
            a.set(i, i, 1.0);
        }
    }
    Ok(a)
}

/// Divides each row by its sum; all-zero rows stay zero.
pub fn row_normalize(a: &AdjacencyMatrix) -> AdjacencyMatrix {
    let mut out = a.clone();
    for row in out.values.chunks_mut(a.n_cols.max(1)) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationKey {
    pub rows: Mode,
    pub cols: Mode,
    pub kind: AdjKind,
}

impl RelationKey {
    pub fn file_name(&self) -> String {
        format!("{}_{}_{}.adj", self.rows, self.cols, self.kind)
    }
}

impl fmt::Display for RelationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}<-{}:{}", self.rows, self.cols, self.kind)
    }
}

#[derive(Debug, Clone)]
pub struct Relation {
    pub raw: AdjacencyMatrix,
    pub normalized: Arc<Tensor>,
}

impl Relation {
    pub fn new(raw: AdjacencyMatrix) -> Self {
        let normalized = Arc::new(row_normalize(&raw).to_tensor());
        Self { raw, normalized }
    }

    pub fn key(&self) -> RelationKey {
        RelationKey {
            rows: self.raw.rows,
            cols: self.raw.cols,
            kind: self.raw.kind,
        }
    }
}

/// Intra graphs for every included mode plus bike←auxiliary graphs, each
/// in geographic and pattern variants.
#[derive(Debug, Clone)]
pub struct MultiRelationalGraph {
    modes: Vec<Mode>,
    relations: Vec<Relation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationManifestEntry {
    pub file: String,
    pub rows: Mode,
    pub cols: Mode,
    pub kind: AdjKind,
    pub n_rows: usize,
    pub n_cols: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphManifest {
    pub modes: Vec<Mode>,
    pub relations: Vec<RelationManifestEntry>,
    /// SHA-256 over the concatenated per-relation hashes.
    pub combined_sha256: String,
}

/// Relation keys in canonical order for a sorted mode list.
pub fn relation_keys(modes: &[Mode]) -> Vec<RelationKey> {
    let mut keys = Vec::new();
    for &m in modes {
        for kind in AdjKind::ALL {
            keys.push(RelationKey { rows: m, cols: m, kind });
        }
    }
    for &m in modes.iter().filter(|m| m.is_auxiliary()) {
        for kind in AdjKind::ALL {
            keys.push(RelationKey {
                rows: Mode::Bike,
                cols: m,
                kind,
            });
        }
    }
    keys
}

impl MultiRelationalGraph {
    pub fn from_relations(modes: &[Mode], relations: Vec<Relation>) -> Result<Self> {
        let mut modes = modes.to_vec();
        modes.sort();
        modes.dedup();
        let expected = relation_keys(&modes);
        let got: Vec<RelationKey> = relations.iter().map(Relation::key).collect();
        if expected != got {
            return Err(Error::Config(format!(
                "relations {:?} do not match modes {modes:?}",
                got.iter().map(ToString::to_string).collect::<Vec<_>>()
            )));
        }
        Ok(Self { modes, relations })
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn relation(&self, rows: Mode, cols: Mode, kind: AdjKind) -> Option<&Relation> {
        self.relations
            .iter()
            .find(|r| r.raw.rows == rows && r.raw.cols == cols && r.raw.kind == kind)
    }

    /// Row-normalized matrix; panics if the relation is absent.
    pub fn normalized(&self, rows: Mode, cols: Mode, kind: AdjKind) -> &Arc<Tensor> {
        &self
            .relation(rows, cols, kind)
            .unwrap_or_else(|| panic!("relation {rows}<-{cols}:{kind} not in graph"))
            .normalized
    }

    pub fn n_nodes(&self, mode: Mode) -> Option<usize> {
        self.relation(mode, mode, AdjKind::Geo).map(|r| r.raw.n_rows)
    }

    pub fn manifest(&self) -> GraphManifest {
        let relations: Vec<RelationManifestEntry> = self
            .relations
            .iter()
            .map(|r| RelationManifestEntry {
                file: r.key().file_name(),
                rows: r.raw.rows,
                cols: r.raw.cols,
                kind: r.raw.kind,
                n_rows: r.raw.n_rows,
                n_cols: r.raw.n_cols,
                sha256: r.raw.sha256(),
            })
            .collect();
        let mut h = Sha256::new();
        for e in &relations {
            h.update(e.sha256.as_bytes());
        }
        GraphManifest {
            modes: self.modes.clone(),
            relations,
            combined_sha256: hex::encode(h.finalize()),
        }
    }

    /// Writes one file per relation plus `manifest.json`; returns the paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for r in &self.relations {
            let p = dir.join(r.key().file_name());
            let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
            let mut w = BufWriter::new(f);
            r.raw
                .write_to(&mut w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&self.manifest())?).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(written)
    }

    /// Loads and verifies every relation against the manifest hashes.
    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join("manifest.json");
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: GraphManifest = serde_json::from_str(&text)?;
        let mut relations = Vec::new();
        for e in &manifest.relations {
            let p = dir.join(&e.file);
            let f = File::open(&p).map_err(|err| Error::io(&p, err))?;
            let raw = AdjacencyMatrix::read_from(BufReader::new(f))?;
            if raw.sha256() != e.sha256 {
                return Err(Error::Malformed(format!("{} does not match its manifest hash", p.display())));
            }
            relations.push(Relation::new(raw));
        }
        let g = Self::from_relations(&manifest.modes, relations)?;
        if g.manifest().combined_sha256 != manifest.combined_sha256 {
            return Err(Error::Malformed("graph manifest combined hash mismatch".into()));
        }
        Ok(g)
    }

    /// Checks node counts against demand data.
    pub fn check_against(&self, data: &DemandData) -> Result<()> {
        for (m, t) in data.tensors.iter() {
            match self.n_nodes(m) {
                Some(n) if n == t.n_nodes => {}
                other => {
                    return Err(Error::Config(format!(
                        "graph has {other:?} {m} nodes, data has {}",
                        t.n_nodes
                    )))
                }
            }
        }
        if self.modes != data.modes() {
            return Err(Error::Config(format!(
                "graph modes {:?} differ from data modes {:?}",
                self.modes,
                data.modes()
            )));
        }
        Ok(())
    }
}

/// Builds every relation for the modes present in `data`. Pattern graphs
/// only see the first `train_steps` bins.
pub fn build_multigraph(data: &DemandData, train_steps: usize, config: &GraphConfig) -> Result<MultiRelationalGraph> {
    let modes = data.modes();
    if !modes.contains(&Mode::Bike) {
        return Err(Error::Config("bike mode is required".into()));
    }
    let relations = relation_keys(&modes)
        .par_iter()
        .map(|key| {
            let raw = match key.kind {
                AdjKind::Geo => geo_adjacency(
                    data.registries.expect(key.rows),
                    data.registries.expect(key.cols),
                    config.sigma_m,
                    config.d_max_m,
                )?,
                AdjKind::Pattern => pattern_adjacency(
                    data.tensors.expect(key.rows),
                    data.tensors.expect(key.cols),
                    train_steps,
                    config.k,
                    config.pattern_channel,
                )?,
            };
            Ok(Relation::new(raw))
        })
        .collect::<Result<Vec<_>>>()?;
    MultiRelationalGraph::from_relations(&modes, relations)
}
