use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DCKPT001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named learnable arrays. Names are unique and shapes never change after
/// registration.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.add_with(name, value, true)
    }

    pub fn add_with(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DiffError::InvalidArgument {
                op: "ParamStore::add",
                msg: format!("duplicate parameter name {name:?}"),
            });
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
            trainable,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Overwrites a parameter value; the shape must match.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Bitwise equality of names, shapes and values.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Writes `magic | manifest length (u64 LE) | JSON manifest | f64 LE payload`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut offset = 0;
        let manifest: Vec<ManifestEntry> = self
            .params
            .iter()
            .map(|p| {
                let e = ManifestEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                    trainable: p.trainable,
                };
                offset += p.value.len();
                e
            })
            .collect();
        let manifest =
            serde_json::to_vec(&manifest).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        for p in &self.params {
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(DiffError::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut manifest = vec![0u8; len];
        r.read_exact(&mut manifest)?;
        let manifest: Vec<ManifestEntry> =
            serde_json::from_slice(&manifest).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() % 8 != 0 {
            return Err(DiffError::Checkpoint("truncated payload".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut store = ParamStore::new();
        for e in manifest {
            let n: usize = e.shape.iter().product();
            let slice = values.get(e.offset..e.offset + n).ok_or_else(|| {
                DiffError::Checkpoint(format!("parameter {} out of payload bounds", e.name))
            })?;
            store.add_with(
                e.name,
                Tensor::from_vec(&e.shape, slice.to_vec())?,
                e.trainable,
            )?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Copies values from `other` by name. Every parameter of `self` must be
    /// present in `other` with the same shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| DiffError::Checkpoint(format!("missing parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "load_values_from",
                    lhs: p.value.shape().to_vec(),
                    rhs: src.value.shape().to_vec(),
                });
            }
            p.value = src.value.clone();
        }
        if other.len() != self.len() {
            return Err(DiffError::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("w", Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.add(
            "a",
            Tensor::from_vec(&[2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        )
        .unwrap();
        s.add_with("b", Tensor::scalar(std::f64::consts::PI), false)
            .unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(buf.as_slice()).unwrap();
        assert!(s.same_values(&back));
        assert!(!back.get(back.id("b").unwrap()).trainable);
    }

    #[test]
    fn truncated_checkpoint_fails() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[4])).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(ParamStore::read_from(buf.as_slice()).is_err());
    }
}
