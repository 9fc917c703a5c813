//! Run configuration: one TOML document with a section per stage.
//!
//! Every key is optional. Unknown keys are rejected. Any documented key can
//! be overridden from the environment as `MMDEMAND_<SECTION>_<KEY>` with
//! dots turned into underscores, e.g. `MMDEMAND_MODEL_EPOCHS=50` or
//! `MMDEMAND_DATA_SPLITS_TRAIN=0.7`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ingest::{CountColumns, TripColumns};
use crate::data::{parse_timestamp, SplitFractions, StudyWindow};
use crate::error::{Error, Result};
use crate::explainer::ExplainerSettings;
use crate::graph::GraphConfig;
use crate::mode::Mode;
use crate::model::TrainConfig;
use crate::synth::SynthConfig;

pub const ENV_PREFIX: &str = "MMDEMAND_";

/// Raw inputs of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeSource {
    pub registry: Option<PathBuf>,
    pub trips: Option<PathBuf>,
    pub counts: Option<PathBuf>,
    pub min_orders_per_hour: f64,
}

impl Default for ModeSource {
    fn default() -> Self {
        Self {
            registry: None,
            trips: None,
            counts: None,
            min_orders_per_hour: 0.0,
        }
    }
}

impl ModeSource {
    pub fn is_configured(&self) -> bool {
        self.registry.is_some() || self.trips.is_some() || self.counts.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Ingested tensors and registries live here.
    pub dir: PathBuf,
    pub start: String,
    pub end: String,
    pub interval_secs: i64,
    pub delimiter: char,
    pub splits: SplitFractions,
    pub trip_columns: TripColumns,
    pub count_columns: CountColumns,
    pub bike: ModeSource,
    pub subway: ModeSource,
    pub ridehail: ModeSource,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            start: "2018-03-01T00:00:00Z".into(),
            end: "2018-09-01T00:00:00Z".into(),
            interval_secs: 4 * 3600,
            delimiter: ',',
            splits: SplitFractions::default(),
            trip_columns: TripColumns::default(),
            count_columns: CountColumns::default(),
            bike: ModeSource {
                min_orders_per_hour: 3.0,
                ..ModeSource::default()
            },
            subway: ModeSource::default(),
            ridehail: ModeSource::default(),
        }
    }
}

impl DataSection {
    pub fn window(&self) -> Result<StudyWindow> {
        let parse = |s: &str| {
            parse_timestamp(s).ok_or_else(|| Error::Config(format!("cannot parse study window bound {s:?}")))
        };
        StudyWindow::new(parse(&self.start)?, parse(&self.end)?, self.interval_secs)
    }

    pub fn source(&self, mode: Mode) -> &ModeSource {
        match mode {
            Mode::Bike => &self.bike,
            Mode::Subway => &self.subway,
            Mode::Ridehail => &self.ridehail,
        }
    }

    pub fn delimiter_byte(&self) -> Result<u8> {
        u8::try_from(self.delimiter)
            .ok()
            .filter(u8::is_ascii)
            .ok_or_else(|| Error::Config(format!("delimiter {:?} is not a single ASCII byte", self.delimiter)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Per-station and per-time-of-day tables; when off the files are
    /// still written, header only.
    pub breakdowns: bool,
    pub per_channel: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            breakdowns: true,
            per_channel: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub graph: GraphConfig,
    pub model: TrainConfig,
    pub explainer: ExplainerSettings,
    pub synth: SynthConfig,
    pub output: OutputSection,
}

impl RunConfig {
    /// Reads `path`, applies environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, |k| std::env::var(k).ok())
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults plus environment overrides, for runs without a file.
    pub fn from_env() -> Result<Self> {
        Self::from_toml_str("", |k| std::env::var(k).ok())
    }

    pub fn from_toml_str(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        apply_overrides(&mut table, env)?;
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.splits.validate()?;
        self.data.window()?;
        self.data.delimiter_byte()?;
        self.model.validate()?;
        self.explainer.validate()?;
        self.synth.validate()?;
        if !(self.graph.sigma_m > 0.0) || !(self.graph.d_max_m >= 0.0) || self.graph.k == 0 {
            return Err(Error::Config("graph needs sigma_m > 0, d_max_m >= 0 and k >= 1".into()));
        }
        for m in Mode::ALL {
            let s = self.data.source(m);
            if s.trips.is_some() && s.counts.is_some() {
                return Err(Error::Config(format!("data.{m}: set trips or counts, not both")));
            }
            if !(s.min_orders_per_hour >= 0.0) {
                return Err(Error::Config(format!("data.{m}.min_orders_per_hour must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn mode_source_docs(mode: &str) -> Vec<(String, &'static str)> {
    vec![
        (format!("data.{mode}.registry"), "node list csv: id, name, then lat/lon or a polygon of `lat lon;...` vertices"),
        (format!("data.{mode}.trips"), "trip records with origin, destination, start and end columns"),
        (format!("data.{mode}.counts"), "per-bin entry/exit counts per station (instead of trips)"),
        (format!("data.{mode}.min_orders_per_hour"), "drop nodes averaging fewer in+out orders per hour"),
    ]
}

/// Every configurable key, in schema order, with a one-line description.
/// A table's own keys come before its sub-tables.
pub fn documented_keys() -> Vec<(String, &'static str)> {
    let mut docs: Vec<(String, &'static str)> = [
        ("data.dir", "directory of ingested tensors and node registries"),
        ("data.start", "study window start, RFC 3339 or epoch seconds"),
        ("data.end", "study window end (exclusive)"),
        ("data.interval_secs", "bin width in seconds; must divide a day"),
        ("data.delimiter", "field separator of raw input files"),
        ("data.splits.train", "chronological training fraction"),
        ("data.splits.val", "validation fraction"),
        ("data.splits.test", "test fraction"),
        ("data.trip_columns.origin", "header of the origin node id"),
        ("data.trip_columns.destination", "header of the destination node id"),
        ("data.trip_columns.start", "header of the departure time"),
        ("data.trip_columns.end", "header of the arrival time"),
        ("data.count_columns.station", "header of the station id"),
        ("data.count_columns.bin_start", "header of the bin start time"),
        ("data.count_columns.entries", "header of the entry count"),
        ("data.count_columns.exits", "header of the exit count"),
        ("data.count_columns.entries_to_outflow", "entries feed the outflow channel (exits the inflow one)"),
    ]
    .into_iter()
    .map(|(k, d)| (k.to_string(), d))
    .collect();
    for m in Mode::ALL {
        docs.extend(mode_source_docs(m.name()));
    }
    docs.extend(
        [
            ("graph.sigma_m", "geographic kernel width in metres"),
            ("graph.d_max_m", "geographic cutoff in metres"),
            ("graph.k", "neighbours kept per row of a pattern graph"),
            ("graph.pattern_channel", "series correlated for pattern graphs: total, inflow or outflow"),
            ("model.history", "input steps per sample"),
            ("model.num_blocks", "stacked spatio-temporal blocks"),
            ("model.tcn_kernel", "temporal convolution width"),
            ("model.channels", "hidden channels per node"),
            ("model.disc_hidden", "hidden layer sizes of the mode discriminator"),
            ("model.eps_aux", "weight of the auxiliary-mode prediction loss"),
            ("model.eps_adv", "weight of the adversarial loss"),
            ("model.dropout", "dropout rate inside blocks and discriminator"),
            ("model.learning_rate", "optimizer step size"),
            ("model.batch_size", "samples per mini-batch"),
            ("model.epochs", "maximum training epochs"),
            ("model.weight_decay", "decoupled weight decay"),
            ("model.patience", "epochs without validation improvement before stopping"),
            ("model.seed", "initialization, shuffling and dropout seed"),
            ("model.modes", "modes used, bike first: bike, subway, ridehail"),
            ("model.use_diff_gcn", "include the inter-modal difference convolutions"),
            ("model.readout", "how heads read the sequence: last or mean"),
            ("model.disc_source", "discriminator input: first or second temporal convolution"),
            ("explainer.steps", "mask optimization steps"),
            ("explainer.lr", "mask learning rate"),
            ("explainer.beta", "weight of the mean mask-weight penalty"),
            ("explainer.init_std", "std of the normal mask initialization"),
            ("explainer.optimizer", "adam or sgd"),
            ("explainer.windows", "test windows averaged per explanation"),
            ("explainer.seed", "window sampling and mask initialization seed"),
            ("explainer.rule.kind", "node selection: topk or threshold"),
            ("explainer.rule.k", "nodes kept per mode (topk)"),
            ("explainer.rule.min_weight", "weights strictly above this are kept (threshold)"),
            ("synth.n_bike", "bike stations"),
            ("synth.n_subway", "subway stations"),
            ("synth.n_ridehail", "ride-hailing zones"),
            ("synth.days", "days generated"),
            ("synth.interval_secs", "bin width in seconds"),
            ("synth.t0", "first bin start, epoch seconds"),
            ("synth.noise_std", "std of the additive gaussian noise"),
            ("synth.scale_min", "lower bound of per-node demand scale"),
            ("synth.scale_max", "upper bound of per-node demand scale"),
            ("synth.center_lat", "layout centre latitude"),
            ("synth.center_lon", "layout centre longitude"),
            ("synth.extent_m", "side of the square layout in metres"),
            ("synth.seed", "generator seed"),
            ("synth.couplings", "extra explicit couplings: {source_mode, source, target, lag, gain}"),
            ("synth.planted", "planted coupling pattern: none, nearest or hub"),
            ("synth.planted_mode", "mode of the planted sources"),
            ("synth.planted_lag", "lag in steps of planted couplings"),
            ("synth.planted_gain", "gain of planted couplings"),
            ("synth.hub_fraction", "share of bike stations fed by the hub"),
            ("output.dir", "directory for run artifacts"),
            ("output.breakdowns", "write per-station and per-time-of-day tables with rows"),
            ("output.per_channel", "write the per-channel metrics table with rows"),
        ]
        .into_iter()
        .map(|(k, d)| (k.to_string(), d)),
    );
    docs
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_ascii_uppercase())
}

fn lookup<'a>(table: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn parse_override(raw: &str, default: Option<&toml::Value>) -> toml::Value {
    if let Ok(mut t) = toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        if let Some(v) = t.remove("v") {
            return v;
        }
    }
    // comma lists for array keys, e.g. MMDEMAND_MODEL_MODES=bike,subway
    if matches!(default, Some(toml::Value::Array(_))) {
        return toml::Value::Array(
            raw.split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| parse_override(p.trim(), None))
                .collect(),
        );
    }
    toml::Value::String(raw.to_string())
}

fn apply_overrides(table: &mut toml::Table, env: impl Fn(&str) -> Option<String>) -> Result<()> {
    let defaults = default_table();
    for (key, _) in documented_keys() {
        let Some(raw) = env(&env_name(&key)) else { continue };
        let value = parse_override(&raw, lookup(&defaults, &key));
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().expect("documented keys are dotted");
        let mut cur = &mut *table;
        for p in parts {
            cur = cur
                .entry(p)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
        }
        log::debug!("{} overrides {key}", env_name(&key));
        cur.insert(leaf.to_string(), value);
    }
    Ok(())
}

fn default_table() -> toml::Table {
    toml::Table::try_from(RunConfig::default()).expect("default config serializes")
}

/// Annotated TOML listing every key with its default.
pub fn schema() -> String {
    let defaults = default_table();
    let mut out = String::from(
        "# mmdemand run configuration.\n\
         # Every key is optional and shown with its default; unknown keys are rejected.\n\
         # Override any key from the environment as MMDEMAND_<SECTION>_<KEY>\n\
         # (dots become underscores), e.g. MMDEMAND_MODEL_EPOCHS=50.\n",
    );
    let mut current = String::new();
    for (key, doc) in documented_keys() {
        let (table, leaf) = key.rsplit_once('.').expect("documented keys are dotted");
        if table != current {
            out.push_str(&format!("\n[{table}]\n"));
            current = table.to_string();
        }
        out.push_str(&format!("# {doc}\n"));
        match lookup(&defaults, &key) {
            Some(v) => out.push_str(&format!("{leaf} = {v}\n")),
            None => out.push_str(&format!("# {leaf} = (unset)\n")),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaves(prefix: &str, t: &toml::Table, out: &mut Vec<String>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(sub) => leaves(&key, sub, out),
                _ => out.push(key),
            }
        }
    }

    #[test]
    fn every_default_is_documented() {
        let documented: Vec<String> = documented_keys().into_iter().map(|(k, _)| k).collect();
        let mut all = Vec::new();
        leaves("", &default_table(), &mut all);
        for k in all {
            assert!(documented.contains(&k), "{k} missing from schema");
        }
    }

    #[test]
    fn schema_parses_back_to_defaults() {
        let cfg = RunConfig::from_toml_str(&schema(), |_| None).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[model]\nepoch = 3\n", |_| None).is_err());
        assert!(RunConfig::from_toml_str("[modle]\n", |_| None).is_err());
        assert!(RunConfig::from_toml_str("[data.splits]\ntrain = 0.5\nval = 0.25\ntest = 0.25\nextra = 1\n", |_| None).is_err());
    }

    #[test]
    fn env_overrides_win_over_file() {
        let env = |k: &str| match k {
            "MMDEMAND_MODEL_EPOCHS" => Some("7".to_string()),
            "MMDEMAND_MODEL_MODES" => Some("bike,subway".to_string()),
            "MMDEMAND_DATA_SPLITS_TRAIN" => Some("0.7".to_string()),
            "MMDEMAND_DATA_SPLITS_VAL" => Some("0.1".to_string()),
            "MMDEMAND_OUTPUT_DIR" => Some("/tmp/x".to_string()),
            _ => None,
        };
        let cfg = RunConfig::from_toml_str("[model]\nepochs = 3\n", env).unwrap();
        assert_eq!(cfg.model.epochs, 7);
        assert_eq!(cfg.model.modes, vec![Mode::Bike, Mode::Subway]);
        assert_eq!(cfg.data.splits.train, 0.7);
        assert_eq!(cfg.output.dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/run.toml"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn default_window_is_whole_bins() {
        let w = RunConfig::default().data.window().unwrap();
        assert_eq!(w.n_steps(), 184 * 6);
    }
}
