//! Optimization loop, early stopping, metrics and replicated experiments.

use std::time::Instant;

use diffcore::{ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::normalize::{fit_stats, fraction_steps, normalize_with};
use crate::data::{DemandData, NormStats, SplitFractions, WindowedDataset, CHANNELS};
use crate::error::{Error, Result};
use crate::graph::{build_multigraph, GraphConfig, MultiRelationalGraph};
use crate::mode::{Mode, ModeMap};
use crate::model::{fnv1a, ArchDescriptor, Checkpoint, ForwardOptions, LossBundle, Model, TrainConfig};

/// Everything a run needs: normalized splits, stats and the graph.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub stats: ModeMap<NormStats>,
    pub graph: MultiRelationalGraph,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub graph_config: GraphConfig,
    pub fractions: SplitFractions,
}

impl Prepared {
    pub fn bike_stats(&self) -> &NormStats {
        self.stats.expect(Mode::Bike)
    }
}

/// Restricts `data` to the configured modes, fits stats on the training
/// bins, builds the graph from raw training-range demand and windows the
/// normalized series.
pub fn prepare(data: &DemandData, config: &TrainConfig, graph_config: &GraphConfig, fractions: SplitFractions) -> Result<Prepared> {
    config.validate()?;
    fractions.validate()?;
    let data = data.restrict(&config.modes())?;
    let n_steps = data.tensors.expect(Mode::Bike).n_steps;
    let train_steps = fraction_steps(n_steps, fractions.train);
    let stats = data.tensors.try_map(|_, t| fit_stats(t, train_steps))?;
    let normalized = data.tensors.try_map(|m, t| normalize_with(t, stats.expect(m)))?;
    let graph = build_multigraph(&data, train_steps, graph_config)?;
    let [train, val, test] = crate::data::window_split(normalized, config.history, fractions)?;
    Ok(Prepared {
        stats,
        graph,
        train,
        val,
        test,
        graph_config: graph_config.clone(),
        fractions,
    })
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = |_: ()| store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let g = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of the training losses.
    pub train: LossBundle,
    pub val_rmse: f64,
    pub val_mae: f64,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
}

impl TrainHistory {
    /// Copy with wall-clock times zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut h = self.clone();
        h.epochs.iter_mut().for_each(|e| e.secs = 0.0);
        h
    }

    /// Per-epoch losses and validation metrics; timing goes to
    /// [`TrainHistory::write_timing_csv`] so this file is reproducible.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "l_pre", "l_aux", "l_adv", "l_total", "val_rmse", "val_mae", "best"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train.pre.to_string(),
                e.train.aux.to_string(),
                e.train.adv.to_string(),
                e.train.total.to_string(),
                e.val_rmse.to_string(),
                e.val_mae.to_string(),
                (e.epoch == self.best_epoch).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_timing_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "secs"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.secs.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub history: TrainHistory,
}

impl TrainResult {
    pub fn checkpoint(&self, prepared: &Prepared) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            arch: ArchDescriptor {
                config: self.model.config.clone(),
                graph_sha256: prepared.graph.manifest().combined_sha256,
                graph: prepared.graph_config.clone(),
                splits: prepared.fractions,
                norm_stats: prepared.stats.iter().map(|(_, s)| *s).collect(),
            },
        }
    }
}

fn step_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed ^ fnv1a(format!("{epoch}/{batch}").as_bytes())
}

/// Trains from the configured initialization. Non-finite losses abort with
/// a numerical error naming the epoch and batch.
pub fn train(prepared: &Prepared, config: &TrainConfig) -> Result<TrainResult> {
    train_from(prepared, Model::new(config.clone())?, &ForwardOptions::default())
}

/// Trains an existing model; `opts` controls discriminator and GRL use.
pub fn train_from(prepared: &Prepared, mut model: Model, opts: &ForwardOptions) -> Result<TrainResult> {
    let config = model.config.clone();
    if prepared.train.is_empty() || prepared.val.is_empty() {
        return Err(Error::Config("training and validation splits must be nonempty".into()));
    }
    let mut opt = AdamW::new(&model.store, config.learning_rate, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..prepared.train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0usize;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = LossBundle::default();
        let mut n_batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = prepared.train.batch(chunk);
            let mut tape = Tape::training(step_seed(config.seed, epoch, bi));
            let inputs = batch.inputs.map(|_, t| tape.constant(t.clone()));
            let targets = batch.targets.map(|_, t| tape.constant(t.clone()));
            let out = model.forward(&mut tape, &prepared.graph, &inputs, opts)?;
            let loss = model.loss(&mut tape, &out, &targets)?;
            let vals = loss.values(&tape);
            if ![vals.pre, vals.aux, vals.adv, vals.total].iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}: {vals:?}"
                )));
            }
            tape.backward(loss.total)?;
            model.store.zero_grads();
            tape.accumulate_into(&mut model.store);
            opt.step(&mut model.store);
            sums.pre += vals.pre;
            sums.aux += vals.aux;
            sums.adv += vals.adv;
            sums.total += vals.total;
            n_batches += 1;
        }
        let nb = n_batches as f64;
        let val = evaluate(&model, &prepared.graph, &prepared.val, prepared.bike_stats())?;
        if !val.rmse.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation RMSE at epoch {epoch}")));
        }
        epochs.push(EpochRecord {
            epoch,
            train: LossBundle {
                pre: sums.pre / nb,
                aux: sums.aux / nb,
                adv: sums.adv / nb,
                total: sums.total / nb,
            },
            val_rmse: val.rmse,
            val_mae: val.mae,
            secs: started.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: loss {:.5} val rmse {:.4}", sums.total / nb, val.rmse);
        if best.as_ref().is_none_or(|b| val.rmse < b.1) {
            best = Some((epoch, val.rmse, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_rmse, store) =
        best.ok_or_else(|| Error::Config("epochs must be >= 1".into()))?;
    model.store = store;
    Ok(TrainResult {
        model,
        history: TrainHistory {
            epochs,
            best_epoch,
            best_val_rmse,
        },
    })
}

/// Error of one breakdown cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub key: String,
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub n: usize,
    /// One row per bike station (by index).
    pub per_station: Vec<CellMetrics>,
    /// One row per daily bin of the target step.
    pub per_time_of_day: Vec<CellMetrics>,
    pub per_channel: Vec<CellMetrics>,
}

/// Pooled RMSE, MAE and R². R² is `1 − SSE/SST` with SST about the target
/// mean; a constant target gives 1 for an exact fit and 0 otherwise.
pub fn metrics(preds: &[f64], targets: &[f64]) -> (f64, f64, f64) {
    let n = preds.len().max(1) as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let (mut sse, mut sae, mut sst) = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        sse += (p - t) * (p - t);
        sae += (p - t).abs();
        sst += (t - mean) * (t - mean);
    }
    let r2 = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        0.0
    };
    ((sse / n).sqrt(), sae / n, r2)
}

fn cell(key: String, pairs: &[(f64, f64)]) -> CellMetrics {
    let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let (rmse, mae, _) = metrics(&p, &t);
    CellMetrics {
        key,
        n: pairs.len(),
        rmse,
        mae,
    }
}

/// Denormalized bike predictions and targets, `(sample, node, channel)`
/// flattened, in chunks of `chunk` samples.
pub fn predict_split(
    model: &Model,
    graph: &MultiRelationalGraph,
    data: &WindowedDataset,
    stats: &NormStats,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let chunk = model.config.batch_size.max(1);
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk) {
        let batch = data.batch(part);
        let inputs: ModeMap<Tensor> = batch.inputs;
        let out = model.predict_tensors(graph, &inputs)?;
        preds.extend(crate::data::denormalize(out.expect(Mode::Bike).data(), stats));
        targets.extend(crate::data::denormalize(batch.targets.expect(Mode::Bike).data(), stats));
    }
    Ok((preds, targets))
}

/// Metrics on denormalized bike demand, pooled over stations, channels
/// and samples, with breakdowns.
pub fn evaluate(
    model: &Model,
    graph: &MultiRelationalGraph,
    data: &WindowedDataset,
    stats: &NormStats,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Config(format!("{} split is empty", data.split)));
    }
    let (preds, targets) = predict_split(model, graph, data, stats)?;
    let bike = data.series.expect(Mode::Bike);
    let n_nodes = bike.n_nodes;
    let (rmse, mae, r2) = metrics(&preds, &targets);

    let mut by_station = vec![Vec::new(); n_nodes];
    let mut by_tod = vec![Vec::new(); bike.bins_per_day()];
    let mut by_channel = vec![Vec::new(); CHANNELS];
    for (k, (&p, &t)) in preds.iter().zip(&targets).enumerate() {
        let c = k % CHANNELS;
        let node = (k / CHANNELS) % n_nodes;
        let sample = k / (CHANNELS * n_nodes);
        by_station[node].push((p, t));
        by_tod[bike.time_of_day(data.target_step(sample))].push((p, t));
        by_channel[c].push((p, t));
    }
    let tod_label = |b: usize| {
        let start = b as i64 * bike.interval_secs;
        let end = start + bike.interval_secs;
        format!("{:02}:{:02}-{:02}:{:02}", start / 3600, start % 3600 / 60, end / 3600, end % 3600 / 60)
    };
    Ok(MetricsReport {
        rmse,
        mae,
        r2,
        n: preds.len(),
        per_station: by_station
            .iter()
            .enumerate()
            .map(|(i, v)| cell(i.to_string(), v))
            .collect(),
        per_time_of_day: by_tod.iter().enumerate().map(|(b, v)| cell(tod_label(b), v)).collect(),
        per_channel: by_channel
            .iter()
            .zip(["inflow", "outflow"])
            .map(|(v, name)| cell(name.into(), v))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Mode subset, e.g. `bike+subway`.
    pub label: String,
    pub runs: Vec<RunSummary>,
    pub rmse: MeanStd,
    pub mae: MeanStd,
    pub r2: MeanStd,
}

pub fn mode_label(modes: &[Mode]) -> String {
    modes.iter().map(|m| m.name()).collect::<Vec<_>>().join("+")
}

/// Trains `replicates` models with seeds `seed, seed+1, …` and aggregates
/// their test metrics.
pub fn run_experiment(prepared: &Prepared, config: &TrainConfig, replicates: usize) -> Result<ExperimentReport> {
    run_experiment_with(prepared, config, replicates, &ForwardOptions::default())
}

pub fn run_experiment_with(
    prepared: &Prepared,
    config: &TrainConfig,
    replicates: usize,
    opts: &ForwardOptions,
) -> Result<ExperimentReport> {
    if replicates == 0 {
        return Err(Error::Config("replicates must be >= 1".into()));
    }
    let runs = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let cfg = TrainConfig {
                seed: config.seed.wrapping_add(r),
                ..config.clone()
            };
            let res = train_from(prepared, Model::new(cfg.clone())?, opts)?;
            let m = evaluate(&res.model, &prepared.graph, &prepared.test, prepared.bike_stats())?;
            Ok(RunSummary {
                seed: cfg.seed,
                rmse: m.rmse,
                mae: m.mae,
                r2: m.r2,
                best_epoch: res.history.best_epoch,
                epochs_run: res.history.epochs.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&RunSummary) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(ExperimentReport {
        label: mode_label(&config.modes()),
        rmse: col(|r| r.rmse),
        mae: col(|r| r.mae),
        r2: col(|r| r.r2),
        runs,
    })
}
