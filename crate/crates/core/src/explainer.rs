//! Node-mask explanations of a bike station's prediction across every
//! mode, subgraph selection and global importance counts.

use diffcore::{Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{NodeRegistry, WindowedDataset, CHANNELS};
use crate::error::{Error, Result};
use crate::graph::MultiRelationalGraph;
use crate::mode::{Mode, ModeMap};
use crate::model::{fnv1a, ForwardOptions, Model};

/// Added under the square root of the distance so its gradient stays
/// finite at zero.
const DIST_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskOptimizer {
    #[default]
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SelectionRule {
    TopK { k: usize },
    Threshold { min_weight: f64 },
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule::TopK { k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainerSettings {
    pub steps: usize,
    pub lr: f64,
    /// Weight of the mean mask-weight penalty.
    pub beta: f64,
    pub init_std: f64,
    pub optimizer: MaskOptimizer,
    pub rule: SelectionRule,
    /// Test windows averaged per explanation.
    pub windows: usize,
    pub seed: u64,
}

impl Default for ExplainerSettings {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.01,
            beta: 0.005,
            init_std: 0.1,
            optimizer: MaskOptimizer::Adam,
            rule: SelectionRule::default(),
            windows: 5,
            seed: 0,
        }
    }
}

impl ExplainerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.beta >= 0.0) || !(self.init_std >= 0.0) || self.windows == 0 {
            return Err(Error::Config("explainer needs lr > 0, beta >= 0, init_std >= 0, windows >= 1".into()));
        }
        Ok(())
    }
}

/// Raw (pre-sigmoid) node masks for one target station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerMasks {
    pub target: usize,
    pub masks: Vec<(Mode, Vec<f64>)>,
    /// Objective before each update.
    pub trace: Vec<f64>,
}

impl ExplainerMasks {
    pub fn mask(&self, mode: Mode) -> Option<&[f64]> {
        self.masks.iter().find(|(m, _)| *m == mode).map(|(_, v)| v.as_slice())
    }

    /// Mean of σ(M) over every node of every mode.
    pub fn mean_weight(&self) -> f64 {
        let all: Vec<f64> = self.masks.iter().flat_map(|(_, v)| v.iter().map(|&x| sigmoid(x))).collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct MaskState {
    values: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl MaskState {
    fn update(&mut self, grads: &[Vec<f64>], s: &ExplainerSettings) {
        self.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for (k, g) in grads.iter().enumerate() {
            for (i, &gi) in g.iter().enumerate() {
                let step = match s.optimizer {
                    MaskOptimizer::Sgd => gi,
                    MaskOptimizer::Adam => {
                        self.m[k][i] = b1 * self.m[k][i] + (1.0 - b1) * gi;
                        self.v[k][i] = b2 * self.v[k][i] + (1.0 - b2) * gi * gi;
                        let mh = self.m[k][i] / (1.0 - b1.powi(self.t));
                        let vh = self.v[k][i] / (1.0 - b2.powi(self.t));
                        mh / (vh.sqrt() + eps)
                    }
                };
                self.values[k][i] -= s.lr * step;
            }
        }
    }
}

/// Bike prediction `(2)` of `target` for a single-sample input.
fn target_prediction(model: &Model, graph: &MultiRelationalGraph, inputs: &ModeMap<Tensor>, target: usize) -> Result<Vec<f64>> {
    let p = model.predict_tensors(graph, inputs)?;
    let bike = p.expect(Mode::Bike).data();
    Ok(bike[target * CHANNELS..(target + 1) * CHANNELS].to_vec())
}

fn objective(
    tape: &mut Tape,
    model: &Model,
    graph: &MultiRelationalGraph,
    inputs: &ModeMap<Tensor>,
    masks: &[Vec<f64>],
    modes: &[Mode],
    full: &[f64],
    target: usize,
    beta: f64,
) -> Result<(Var, Vec<Var>)> {
    let mut leaves = Vec::with_capacity(modes.len());
    let mut masked = ModeMap::new();
    let mut weights = Vec::with_capacity(modes.len());
    for (k, &m) in modes.iter().enumerate() {
        let x = inputs.expect(m);
        let n = x.shape()[1];
        let leaf = tape.leaf(Tensor::from_vec(&[n], masks[k].clone())?);
        leaves.push(leaf);
        let w = tape.sigmoid(leaf);
        weights.push(w);
        let w4 = tape.reshape(w, &[1, n, 1, 1])?;
        let wb = tape.broadcast_to(w4, x.shape())?;
        let xc = tape.constant(x.clone());
        masked.insert(m, tape.mul(xc, wb)?);
    }
    let opts = ForwardOptions {
        discriminator: Some(false),
        ..Default::default()
    };
    let out = model.forward(tape, graph, &masked, &opts)?;
    let pred = tape.select(*out.preds.expect(Mode::Bike), 1, target)?;
    let reference = tape.constant(Tensor::from_vec(&[1, CHANNELS], full.to_vec())?);
    let diff = tape.sub(pred, reference)?;
    let sq = tape.mul(diff, diff)?;
    let ss = tape.sum(sq);
    let eps = tape.constant(Tensor::scalar(DIST_EPS));
    let ss = tape.add(ss, eps)?;
    let dist = tape.sqrt(ss)?;
    let total = if beta > 0.0 {
        let all = tape.concat(&weights, 0)?;
        let mean = tape.mean(all)?;
        let pen = tape.scale(mean, beta);
        tape.add(dist, pen)?
    } else {
        dist
    };
    Ok((total, leaves))
}

/// Optimizes node masks so the masked input reproduces the target's
/// prediction while using few nodes. `inputs` hold one sample
/// (`B = 1`). The model's parameters are never modified.
pub fn explain_station(
    model: &Model,
    graph: &MultiRelationalGraph,
    inputs: &ModeMap<Tensor>,
    target: usize,
    settings: &ExplainerSettings,
) -> Result<ExplainerMasks> {
    settings.validate()?;
    let modes = model.modes();
    let n_bike = inputs.expect(Mode::Bike).shape()[1];
    if target >= n_bike {
        return Err(Error::Config(format!("target station {target} out of range ({n_bike} stations)")));
    }
    let frozen = model.frozen();
    let full = target_prediction(&frozen, graph, inputs, target)?;

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ fnv1a(format!("explain/{target}").as_bytes()));
    let init = Normal::new(0.0, settings.init_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let values: Vec<Vec<f64>> = modes
        .iter()
        .map(|&m| {
            let n = inputs.expect(m).shape()[1];
            (0..n)
                .map(|_| if settings.init_std > 0.0 { init.sample(&mut rng) } else { 0.0 })
                .collect()
        })
        .collect();
    let zeros: Vec<Vec<f64>> = values.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut state = MaskState {
        values,
        m: zeros.clone(),
        v: zeros,
        t: 0,
    };
    let mut trace = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let mut tape = Tape::new();
        let (obj, leaves) = objective(
            &mut tape,
            &frozen,
            graph,
            inputs,
            &state.values,
            &modes,
            &full,
            target,
            settings.beta,
        )?;
        let value = tape.value(obj).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("explainer objective non-finite at iteration {step}")));
        }
        trace.push(value);
        tape.backward(obj)?;
        let grads: Vec<Vec<f64>> = leaves
            .iter()
            .map(|&l| tape.grad(l).map_or_else(|| vec![0.0; tape.shape(l)[0]], |g| g.data().to_vec()))
            .collect();
        state.update(&grads, settings);
    }
    Ok(ExplainerMasks {
        target,
        masks: modes.into_iter().zip(state.values).collect(),
        trace,
    })
}

/// Objective value for given raw masks (for tests and diagnostics).
pub fn explanation_objective(
    model: &Model,
    graph: &MultiRelationalGraph,
    inputs: &ModeMap<Tensor>,
    masks: &ExplainerMasks,
    beta: f64,
) -> Result<f64> {
    let frozen = model.frozen();
    let full = target_prediction(&frozen, graph, inputs, masks.target)?;
    let modes: Vec<Mode> = masks.masks.iter().map(|(m, _)| *m).collect();
    let values: Vec<Vec<f64>> = masks.masks.iter().map(|(_, v)| v.clone()).collect();
    let mut tape = Tape::new();
    let (obj, _) = objective(&mut tape, &frozen, graph, inputs, &values, &modes, &full, masks.target, beta)?;
    Ok(tape.value(obj).data()[0])
}

/// Sample indices used for explanations: `w` distinct windows drawn with
/// the seed, in ascending order.
pub fn sample_windows(n: usize, w: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, w.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Masks averaged over several windows, with per-node variance of σ(M).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedExplanation {
    pub masks: ExplainerMasks,
    pub weight_variance: Vec<(Mode, Vec<f64>)>,
    pub windows: Vec<usize>,
}

pub fn explain_station_windows(
    model: &Model,
    graph: &MultiRelationalGraph,
    dataset: &WindowedDataset,
    target: usize,
    settings: &ExplainerSettings,
) -> Result<AveragedExplanation> {
    if dataset.is_empty() {
        return Err(Error::Config(format!("{} split has no windows to explain", dataset.split)));
    }
    let windows = sample_windows(dataset.len(), settings.windows, settings.seed);
    let runs = windows
        .iter()
        .map(|&w| explain_station(model, graph, &dataset.batch(&[w]).inputs, target, settings))
        .collect::<Result<Vec<_>>>()?;
    let k = runs.len() as f64;
    let mut masks = runs[0].clone();
    let mut variance = Vec::new();
    for (mi, (mode, avg)) in masks.masks.iter_mut().enumerate() {
        let mut var = vec![0.0; avg.len()];
        for i in 0..avg.len() {
            avg[i] = runs.iter().map(|r| r.masks[mi].1[i]).sum::<f64>() / k;
            let ws: Vec<f64> = runs.iter().map(|r| sigmoid(r.masks[mi].1[i])).collect();
            let mean = ws.iter().sum::<f64>() / k;
            var[i] = ws.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / k;
        }
        variance.push((*mode, var));
    }
    masks.trace = runs[0].trace.clone();
    Ok(AveragedExplanation {
        masks,
        weight_variance: variance,
        windows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedNode {
    pub index: usize,
    pub id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSubgraph {
    pub target: usize,
    pub rule: SelectionRule,
    /// Every node per mode, by descending weight.
    pub ranked: Vec<(Mode, Vec<RankedNode>)>,
    /// Selected prefix of `ranked` per mode.
    pub selected: Vec<(Mode, Vec<RankedNode>)>,
}

impl ExplanationSubgraph {
    pub fn selected(&self, mode: Mode) -> &[RankedNode] {
        self.selected
            .iter()
            .find(|(m, _)| *m == mode)
            .map_or(&[], |(_, v)| v.as_slice())
    }

    pub fn ranked(&self, mode: Mode) -> &[RankedNode] {
        self.ranked
            .iter()
            .find(|(m, _)| *m == mode)
            .map_or(&[], |(_, v)| v.as_slice())
    }
}

/// Ranks σ(M) per mode (ties to the lower index) and applies the rule.
/// The target never appears in its own bike list.
pub fn select_subgraph(
    masks: &ExplainerMasks,
    registries: &ModeMap<NodeRegistry>,
    rule: SelectionRule,
) -> Result<ExplanationSubgraph> {
    let mut ranked = Vec::new();
    let mut selected = Vec::new();
    for (mode, raw) in &masks.masks {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite {mode} mask")));
        }
        let reg = registries
            .get(*mode)
            .ok_or_else(|| Error::Config(format!("no {mode} registry")))?;
        let mut list: Vec<RankedNode> = raw
            .iter()
            .enumerate()
            .filter(|&(i, _)| !(*mode == Mode::Bike && i == masks.target))
            .map(|(i, &v)| RankedNode {
                index: i,
                id: reg.node(i).id.clone(),
                weight: sigmoid(v),
            })
            .collect();
        list.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.index.cmp(&b.index)));
        let take = match rule {
            SelectionRule::TopK { k } => k.min(list.len()),
            SelectionRule::Threshold { min_weight } => list.iter().take_while(|n| n.weight > min_weight).count(),
        };
        selected.push((*mode, list[..take].to_vec()));
        ranked.push((*mode, list));
    }
    Ok(ExplanationSubgraph {
        target: masks.target,
        rule,
        ranked,
        selected,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub mode: Mode,
    pub index: usize,
    pub id: String,
    pub count: usize,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub n_targets: usize,
    pub rows: Vec<ImportanceRow>,
}

impl ImportanceTable {
    pub fn mode_rows(&self, mode: Mode) -> impl Iterator<Item = &ImportanceRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }
}

#[derive(Debug, Clone)]
pub struct GlobalExplanation {
    pub table: ImportanceTable,
    pub subgraphs: Vec<ExplanationSubgraph>,
    pub explanations: Vec<AveragedExplanation>,
}

/// Explains every bike station (in parallel) and counts how often each
/// node lands in a selected subgraph, normalized by the station count.
pub fn global_importance(
    model: &Model,
    graph: &MultiRelationalGraph,
    dataset: &WindowedDataset,
    registries: &ModeMap<NodeRegistry>,
    settings: &ExplainerSettings,
) -> Result<GlobalExplanation> {
    let n_bike = dataset.series.expect(Mode::Bike).n_nodes;
    explain_targets(model, graph, dataset, registries, settings, &(0..n_bike).collect::<Vec<_>>())
}

pub fn explain_targets(
    model: &Model,
    graph: &MultiRelationalGraph,
    dataset: &WindowedDataset,
    registries: &ModeMap<NodeRegistry>,
    settings: &ExplainerSettings,
    targets: &[usize],
) -> Result<GlobalExplanation> {
    let explanations = targets
        .par_iter()
        .map(|&i| explain_station_windows(model, graph, dataset, i, settings))
        .collect::<Result<Vec<_>>>()?;
    let subgraphs = explanations
        .iter()
        .map(|e| select_subgraph(&e.masks, registries, settings.rule))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for mode in model.modes() {
        let reg = registries
            .get(mode)
            .ok_or_else(|| Error::Config(format!("no {mode} registry")))?;
        for (i, node) in reg.nodes().iter().enumerate() {
            let count = subgraphs
                .iter()
                .filter(|s| s.selected(mode).iter().any(|n| n.index == i))
                .count();
            rows.push(ImportanceRow {
                mode,
                index: i,
                id: node.id.clone(),
                count,
                frequency: count as f64 / targets.len().max(1) as f64,
            });
        }
    }
    Ok(GlobalExplanation {
        table: ImportanceTable {
            n_targets: targets.len(),
            rows,
        },
        subgraphs,
        explanations,
    })
}
