//! On-disk formats for demand tensors and prepared data directories.
//!
//! A data directory holds, per mode, `<mode>.mmdt` (binary tensor),
//! `<mode>.json` (sidecar metadata) and `<mode>_nodes.csv` (registry).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::registry::NodeRegistry;
use super::tensor::{DemandTensor, CHANNELS};
use crate::error::{Error, Result};
use crate::mode::{Mode, ModeMap};

const TENSOR_MAGIC: &[u8; 8] = b"MMDT0001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSidecar {
    pub mode: Mode,
    pub n_nodes: usize,
    pub n_steps: usize,
    pub interval_secs: i64,
    pub t0: i64,
    pub channels: [String; CHANNELS],
    pub total: f64,
}

impl TensorSidecar {
    pub fn of(t: &DemandTensor) -> Self {
        Self {
            mode: t.mode,
            n_nodes: t.n_nodes,
            n_steps: t.n_steps,
            interval_secs: t.interval_secs,
            t0: t.t0,
            channels: ["inflow".into(), "outflow".into()],
            total: t.total(),
        }
    }
}

/// `magic | mode u8 | N u64 | T u64 | interval i64 | t0 i64 | f64 LE payload`.
pub fn write_tensor<W: Write>(t: &DemandTensor, mut w: W) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[t.mode.index() as u8])?;
    w.write_all(&(t.n_nodes as u64).to_le_bytes())?;
    w.write_all(&(t.n_steps as u64).to_le_bytes())?;
    w.write_all(&t.interval_secs.to_le_bytes())?;
    w.write_all(&t.t0.to_le_bytes())?;
    for v in &t.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<DemandTensor> {
    let bad = |m: &str| Error::Malformed(format!("tensor container: {m}"));
    let mut head = [0u8; 8 + 1 + 8 * 4];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..8] != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    let mode = *Mode::ALL.get(head[8] as usize).ok_or_else(|| bad("unknown mode"))?;
    let word = |k: usize| <[u8; 8]>::try_from(&head[9 + 8 * k..17 + 8 * k]).expect("8 bytes");
    let n = u64::from_le_bytes(word(0)) as usize;
    let steps = u64::from_le_bytes(word(1)) as usize;
    let interval = i64::from_le_bytes(word(2));
    let t0 = i64::from_le_bytes(word(3));
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| bad(&e.to_string()))?;
    let expected = n
        .checked_mul(steps)
        .and_then(|x| x.checked_mul(CHANNELS * 8))
        .ok_or_else(|| bad("header overflow"))?;
    if payload.len() != expected {
        return Err(bad(&format!("payload has {} bytes, header implies {expected}", payload.len())));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    DemandTensor::from_values(mode, n, steps, interval, t0, values)
}

pub fn save_tensor(t: &DemandTensor, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(t, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))?;
    let sidecar = path.with_extension("json");
    fs::write(&sidecar, serde_json::to_string_pretty(&TensorSidecar::of(t))?)
        .map_err(|e| Error::io(&sidecar, e))
}

pub fn load_tensor(path: &Path) -> Result<DemandTensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(BufReader::new(f))
}

/// Long-format CSV: `node_id,step,bin_start,inflow,outflow`.
pub fn export_tensor_csv(t: &DemandTensor, registry: &NodeRegistry, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node_id", "step", "bin_start", "inflow", "outflow"])?;
    for (i, node) in registry.nodes().iter().enumerate().take(t.n_nodes) {
        for s in 0..t.n_steps {
            w.write_record([
                node.id.clone(),
                s.to_string(),
                (t.t0 + s as i64 * t.interval_secs).to_string(),
                t.get(i, s, 0).to_string(),
                t.get(i, s, 1).to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn tensor_path(dir: &Path, mode: Mode) -> PathBuf {
    dir.join(format!("{mode}.mmdt"))
}

pub fn registry_path(dir: &Path, mode: Mode) -> PathBuf {
    dir.join(format!("{mode}_nodes.csv"))
}

/// Demand tensors with their registries, one entry per mode.
#[derive(Debug, Clone)]
pub struct DemandData {
    pub tensors: ModeMap<DemandTensor>,
    pub registries: ModeMap<NodeRegistry>,
}

impl DemandData {
    pub fn modes(&self) -> Vec<Mode> {
        self.tensors.modes()
    }

    pub fn restrict(&self, modes: &[Mode]) -> Result<Self> {
        let mut out = DemandData {
            tensors: ModeMap::new(),
            registries: ModeMap::new(),
        };
        for &m in modes {
            let (Some(t), Some(r)) = (self.tensors.get(m), self.registries.get(m)) else {
                return Err(Error::Config(format!("mode {m} is not present in the data")));
            };
            out.tensors.insert(m, t.clone());
            out.registries.insert(m, r.clone());
        }
        Ok(out)
    }

    /// Returns the written file paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (m, t) in self.tensors.iter() {
            let tp = tensor_path(dir, m);
            save_tensor(t, &tp)?;
            let rp = registry_path(dir, m);
            self.registries.expect(m).write_csv(&rp)?;
            written.extend([tp.clone(), tp.with_extension("json"), rp]);
        }
        Ok(written)
    }

    /// Loads the requested modes (or every mode present when `modes` is
    /// empty).
    pub fn load(dir: &Path, modes: &[Mode]) -> Result<Self> {
        let wanted: Vec<Mode> = if modes.is_empty() {
            Mode::ALL
                .into_iter()
                .filter(|&m| tensor_path(dir, m).exists())
                .collect()
        } else {
            modes.to_vec()
        };
        if !wanted.contains(&Mode::Bike) {
            return Err(Error::Config(format!("no bike demand in {}", dir.display())));
        }
        let mut tensors = ModeMap::new();
        let mut registries = ModeMap::new();
        for m in wanted {
            let t = load_tensor(&tensor_path(dir, m))?;
            if t.mode != m {
                return Err(Error::Malformed(format!("{} holds {} data", tensor_path(dir, m).display(), t.mode)));
            }
            let r = NodeRegistry::load_csv(&registry_path(dir, m), m)?;
            if r.len() != t.n_nodes {
                return Err(Error::Malformed(format!(
                    "{m}: registry has {} nodes, tensor {}",
                    r.len(),
                    t.n_nodes
                )));
            }
            tensors.insert(m, t);
            registries.insert(m, r);
        }
        Ok(Self { tensors, registries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let mut t = DemandTensor::zeros(Mode::Subway, 3, 4, 14_400, 1_519_862_400);
        t.set(2, 3, 1, 7.25);
        t.set(0, 0, 0, 1e-300);
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        assert_eq!(read_tensor(buf.as_slice()).unwrap(), t);
        buf.pop();
        assert!(matches!(read_tensor(buf.as_slice()), Err(Error::Malformed(_))));
    }
}
