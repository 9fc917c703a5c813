use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};

use mmdemand::config::RunConfig;
use mmdemand::data::io::export_tensor_csv;
use mmdemand::data::{bin_demand, filter_low_demand, ingest_counts, load_trips, DemandData, NodeRegistry};
use mmdemand::explainer::{explain_targets, global_importance};
use mmdemand::graph::{build_multigraph, MultiRelationalGraph};
use mmdemand::manifest::{ManifestBuilder, OutputLock};
use mmdemand::model::Checkpoint;
use mmdemand::mode::parse_modes;
use mmdemand::report::{export_report, Explanations, ReportFormat, ReportInput, ReportOptions};
use mmdemand::trainer::{evaluate, prepare, run_experiment, train, Prepared};
use mmdemand::{synth, Error, Mode, ModeMap};

use super::{Command, Common};

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_env()?,
    };
    if let Some(m) = &c.modes {
        cfg.model.modes = parse_modes(m)?;
    }
    if let Some(s) = c.seed {
        cfg.model.seed = s;
        cfg.synth.seed = s;
        cfg.explainer.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Locks `dir`, runs `f` and writes the manifest of everything it
/// recorded.
fn in_run_dir(command: &str, dir: &Path, seed: u64, cfg: &RunConfig, f: impl FnOnce(&mut ManifestBuilder) -> Result<()>) -> Result<()> {
    let _lock = OutputLock::acquire(dir)?;
    let mut manifest = ManifestBuilder::new(command, dir, seed, cfg.to_toml()?);
    f(&mut manifest)?;
    let p = manifest.finish()?;
    info!("{command}: manifest at {}", p.display());
    Ok(())
}

fn report_options(cfg: &RunConfig) -> ReportOptions {
    ReportOptions {
        breakdowns: cfg.output.breakdowns,
        per_channel: cfg.output.per_channel,
    }
}

fn data_inputs(dir: &Path, modes: &[Mode]) -> Vec<PathBuf> {
    modes
        .iter()
        .flat_map(|&m| {
            [
                mmdemand::data::io::tensor_path(dir, m),
                mmdemand::data::io::registry_path(dir, m),
            ]
        })
        .collect()
}

fn checkpoint_inputs(path: &Path) -> Vec<PathBuf> {
    vec![path.to_path_buf(), mmdemand::model::arch_path(path)]
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Schema => {
            print!("{}", mmdemand::config::schema());
            Ok(())
        }
        Command::Ingest { common } => {
            let cfg = load_config(&common)?;
            let out = common.out.clone().unwrap_or_else(|| cfg.data.dir.clone());
            in_run_dir("ingest", &out, cfg.model.seed, &cfg, |m| ingest(&cfg, &out, m))
        }
        Command::Synth { common } => {
            let cfg = load_config(&common)?;
            let out = common.out.clone().unwrap_or_else(|| cfg.data.dir.clone());
            in_run_dir("synth", &out, cfg.synth.seed, &cfg, |m| {
                let generated = synth::generate(&cfg.synth)?;
                m.artifacts(generated.save(&out)?);
                info!(
                    "synth: {} couplings planted ({} weak) into {}",
                    generated.couplings.len(),
                    generated.weak_couplings.len(),
                    out.display()
                );
                Ok(())
            })
        }
        Command::BuildGraphs { common, data } => {
            let cfg = load_config(&common)?;
            let data_dir = data.unwrap_or_else(|| cfg.data.dir.clone());
            let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.join("graphs"));
            in_run_dir("build-graphs", &out, cfg.model.seed, &cfg, |m| {
                let modes = cfg.model.modes();
                let demand = DemandData::load(&data_dir, &modes)?;
                let n_steps = demand.tensors.expect(Mode::Bike).n_steps;
                let train_steps = mmdemand::data::normalize::fraction_steps(n_steps, cfg.data.splits.train);
                let graph = build_multigraph(&demand, train_steps, &cfg.graph)?;
                for p in data_inputs(&data_dir, &modes) {
                    m.input(p);
                }
                m.artifacts(graph.save(&out)?);
                info!("build-graphs: {} relations, hash {}", graph.len(), graph.manifest().combined_sha256);
                Ok(())
            })
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common)?;
            let data_dir = data.unwrap_or_else(|| cfg.data.dir.clone());
            let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
            in_run_dir("train", &out, cfg.model.seed, &cfg, |m| {
                let modes = cfg.model.modes();
                let demand = DemandData::load(&data_dir, &modes)?;
                for p in data_inputs(&data_dir, &modes) {
                    m.input(p);
                }
                let prepared = prepare(&demand, &cfg.model, &cfg.graph, cfg.data.splits)?;
                info!(
                    "train: {} train / {} val / {} test samples, modes {:?}",
                    prepared.train.len(),
                    prepared.val.len(),
                    prepared.test.len(),
                    modes
                );
                let result = train(&prepared, &cfg.model)?;
                let ck_path = out.join("model.ckpt");
                m.artifacts(result.checkpoint(&prepared).save(&ck_path)?);
                let hist = out.join("history.csv");
                result.history.write_csv(&hist)?;
                m.artifact(hist);
                let times = out.join("epoch_times.csv");
                result.history.write_timing_csv(&times)?;
                m.timing_artifact(times);
                info!(
                    "train: best epoch {} of {}, val rmse {:.4}",
                    result.history.best_epoch,
                    result.history.epochs.len(),
                    result.history.best_val_rmse
                );
                m.artifacts(evaluate_and_report(&result.model, &prepared, &demand.registries, &out, report_options(&cfg))?);
                Ok(())
            })
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
            graphs,
        } => {
            let mut cfg = load_config(&common)?;
            let ck = Checkpoint::load_unchecked(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            cfg.model = ck.arch.config.clone();
            cfg.graph = ck.arch.graph.clone();
            cfg.data.splits = ck.arch.splits;
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("evaluation"));
            in_run_dir("evaluate", &out, cfg.model.seed, &cfg, |m| {
                let modes = cfg.model.modes();
                let demand = DemandData::load(&data, &modes)?;
                let prepared = prepare_for(&ck, &demand, graphs.as_deref())?;
                for p in data_inputs(&data, &modes).into_iter().chain(checkpoint_inputs(&checkpoint)) {
                    m.input(p);
                }
                m.artifacts(evaluate_and_report(&ck.model, &prepared, &demand.registries, &out, report_options(&cfg))?);
                Ok(())
            })
        }
        Command::Experiment {
            common,
            data,
            replicates,
        } => {
            let cfg = load_config(&common)?;
            let data_dir = data.unwrap_or_else(|| cfg.data.dir.clone());
            let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.join("experiment"));
            in_run_dir("experiment", &out, cfg.model.seed, &cfg, |m| {
                let modes = cfg.model.modes();
                let demand = DemandData::load(&data_dir, &modes)?;
                for p in data_inputs(&data_dir, &modes) {
                    m.input(p);
                }
                let prepared = prepare(&demand, &cfg.model, &cfg.graph, cfg.data.splits)?;
                let report = run_experiment(&prepared, &cfg.model, replicates)?;
                let p = out.join("experiment.json");
                std::fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
                m.artifact(p);
                let p = out.join("runs.csv");
                let mut w = csv::Writer::from_path(&p)?;
                for r in &report.runs {
                    w.serialize(r)?;
                }
                w.flush().map_err(|e| Error::io(&p, e))?;
                m.artifact(p);
                info!(
                    "experiment {}: rmse {:.4} ± {:.4}, mae {:.4} ± {:.4}, r2 {:.4} ± {:.4} over {replicates} runs",
                    report.label, report.rmse.mean, report.rmse.std, report.mae.mean, report.mae.std, report.r2.mean, report.r2.std
                );
                Ok(())
            })
        }
        Command::Explain {
            common,
            checkpoint,
            data,
            station,
        } => {
            let mut cfg = load_config(&common)?;
            let ck = Checkpoint::load_unchecked(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            cfg.model = ck.arch.config.clone();
            cfg.graph = ck.arch.graph.clone();
            cfg.data.splits = ck.arch.splits;
            let data_dir = data.unwrap_or_else(|| cfg.data.dir.clone());
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("explanations"));
            in_run_dir("explain", &out, cfg.explainer.seed, &cfg, |m| {
                let modes = cfg.model.modes();
                let demand = DemandData::load(&data_dir, &modes)?;
                let prepared = prepare_for(&ck, &demand, None)?;
                for p in data_inputs(&data_dir, &modes).into_iter().chain(checkpoint_inputs(&checkpoint)) {
                    m.input(p);
                }
                let explained = match station.as_deref().filter(|s| *s != "all") {
                    Some(list) => {
                        let targets = station_indices(demand.registries.expect(Mode::Bike), list)?;
                        explain_targets(&ck.model, &prepared.graph, &prepared.test, &demand.registries, &cfg.explainer, &targets)?
                    }
                    None => global_importance(&ck.model, &prepared.graph, &prepared.test, &demand.registries, &cfg.explainer)?,
                };
                let input = ReportInput {
                    metrics: None,
                    explanations: Some(Explanations {
                        table: &explained.table,
                        subgraphs: &explained.subgraphs,
                    }),
                    registries: &demand.registries,
                };
                m.artifacts(export_report(&input, &out, &ReportFormat::ALL, report_options(&cfg))?);
                info!("explain: {} stations explained", explained.subgraphs.len());
                Ok(())
            })
        }
    }
}

fn station_indices(bike: &NodeRegistry, list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|id| {
            bike.index_of(id)
                .ok_or_else(|| Error::Config(format!("unknown bike station {id:?}")).into())
        })
        .collect()
}

/// Rebuilds the checkpoint's splits and graph (or loads saved graphs) and
/// refuses a graph that differs from the one it was trained on.
fn prepare_for(ck: &Checkpoint, demand: &DemandData, graphs: Option<&Path>) -> Result<Prepared> {
    let mut prepared = prepare(demand, &ck.arch.config, &ck.arch.graph, ck.arch.splits)?;
    if let Some(dir) = graphs {
        let g = MultiRelationalGraph::load(dir)?;
        g.check_against(&demand.restrict(&ck.arch.config.modes())?)?;
        prepared.graph = g;
    }
    ck.verify_graph(&prepared.graph)?;
    let fitted: Vec<_> = prepared.stats.iter().map(|(_, s)| *s).collect();
    if fitted != ck.arch.norm_stats {
        warn!("normalization stats differ from the checkpoint's; the data directory may have changed");
    }
    Ok(prepared)
}

fn evaluate_and_report(
    model: &mmdemand::model::Model,
    prepared: &Prepared,
    registries: &ModeMap<NodeRegistry>,
    out: &Path,
    opts: ReportOptions,
) -> Result<Vec<PathBuf>> {
    let metrics = evaluate(model, &prepared.graph, &prepared.test, prepared.bike_stats())?;
    info!("test: rmse {:.4}, mae {:.4}, r2 {:.4} over {} values", metrics.rmse, metrics.mae, metrics.r2, metrics.n);
    let input = ReportInput {
        metrics: Some(&metrics),
        explanations: None,
        registries,
    };
    Ok(export_report(&input, out, &ReportFormat::ALL, opts)?)
}

fn ingest(cfg: &RunConfig, out: &Path, m: &mut ManifestBuilder) -> Result<()> {
    let window = cfg.data.window()?;
    let delimiter = cfg.data.delimiter_byte()?;
    let mut tensors = ModeMap::new();
    let mut registries = ModeMap::new();
    for mode in Mode::ALL {
        let src = cfg.data.source(mode);
        if !src.is_configured() {
            continue;
        }
        let Some(reg_path) = &src.registry else {
            bail!(Error::Config(format!("data.{mode}.registry is required")));
        };
        let registry = NodeRegistry::load_csv(reg_path, mode)?;
        registry.centroids()?;
        m.input(reg_path);
        let (tensor, drops) = match (&src.trips, &src.counts) {
            (Some(p), None) => {
                m.input(p);
                let trips = load_trips(p, mode, &registry, &cfg.data.trip_columns, &window, delimiter)?;
                let drops = trips.dropped;
                (bin_demand(&trips, &window, &registry)?, drops)
            }
            (None, Some(p)) => {
                m.input(p);
                ingest_counts(p, &registry, &cfg.data.count_columns, &window, delimiter)?
            }
            _ => bail!(Error::Config(format!("data.{mode}: set exactly one of trips or counts"))),
        };
        if drops.total() > 0 {
            warn!(
                "{mode}: dropped {} unknown-node, {} out-of-window, {} invalid rows",
                drops.unknown_node, drops.out_of_window, drops.invalid
            );
        }
        let before = registry.len();
        let (tensor, registry) = filter_low_demand(&tensor, &registry, src.min_orders_per_hour)?;
        info!("{mode}: kept {} of {before} nodes, {} steps", registry.len(), tensor.n_steps);
        tensors.insert(mode, tensor);
        registries.insert(mode, registry);
    }
    if !tensors.contains(Mode::Bike) {
        bail!(Error::Config("data.bike is not configured".into()));
    }
    let demand = DemandData { tensors, registries };
    m.artifacts(demand.save(out)?);
    for (mode, t) in demand.tensors.iter() {
        let p = out.join(format!("{mode}_demand.csv"));
        export_tensor_csv(t, demand.registries.expect(mode), &p)?;
        m.artifact(p);
    }
    Ok(())
}
