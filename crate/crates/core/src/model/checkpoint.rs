use std::fs;
use std::path::{Path, PathBuf};

use diffcore::ParamStore;
use serde::{Deserialize, Serialize};

use super::{Model, TrainConfig};
use crate::data::{NormStats, SplitFractions};
use crate::error::{Error, Result};
use crate::graph::{GraphConfig, MultiRelationalGraph};

/// Structured-text companion of a parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub config: TrainConfig,
    /// Combined hash of the relation manifest the model was trained on.
    pub graph_sha256: String,
    pub graph: GraphConfig,
    pub splits: SplitFractions,
    pub norm_stats: Vec<NormStats>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub arch: ArchDescriptor,
}

pub fn arch_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".arch.json");
    PathBuf::from(s)
}

impl Checkpoint {
    /// Writes the parameter container and `<path>.arch.json`.
    pub fn save(&self, path: &Path) -> Result<Vec<PathBuf>> {
        self.model.store.save(path).map_err(|e| match e {
            diffcore::DiffError::Io(io) => Error::io(path, io),
            other => Error::Diff(other),
        })?;
        let ap = arch_path(path);
        fs::write(&ap, serde_json::to_string_pretty(&self.arch)?).map_err(|e| Error::io(&ap, e))?;
        Ok(vec![path.to_path_buf(), ap])
    }

    /// Reads a checkpoint without checking it against a graph.
    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let ap = arch_path(path);
        let text = fs::read_to_string(&ap).map_err(|e| Error::io(&ap, e))?;
        let arch: ArchDescriptor = serde_json::from_str(&text)?;
        let store = ParamStore::load(path).map_err(|e| match e {
            diffcore::DiffError::Io(io) => Error::io(path, io),
            other => Error::Malformed(format!("{}: {other}", path.display())),
        })?;
        let model = Model::with_params(arch.config.clone(), store)?;
        Ok(Self { model, arch })
    }

    /// Reads a checkpoint and refuses it unless `graph` is the one it was
    /// trained against.
    pub fn load(path: &Path, graph: &MultiRelationalGraph) -> Result<Self> {
        let ck = Self::load_unchecked(path)?;
        ck.verify_graph(graph)?;
        Ok(ck)
    }

    pub fn verify_graph(&self, graph: &MultiRelationalGraph) -> Result<()> {
        let got = graph.manifest().combined_sha256;
        if got != self.arch.graph_sha256 {
            return Err(Error::Config(format!(
                "checkpoint expects graph {}, got {got}",
                self.arch.graph_sha256
            )));
        }
        Ok(())
    }
}
