//! Synthetic multimodal demand with diurnal profiles, Gaussian noise and
//! planted lagged couplings from auxiliary nodes into bike stations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DemandData, DemandTensor, NodeInfo, NodeRegistry, CHANNELS};
use crate::error::{Error, Result};
use crate::graph::haversine_m;
use crate::mode::{Mode, ModeMap};

/// Levels for the six 4-hour bins of a day (00–04, …, 20–24), per channel
/// `[inflow, outflow]`.
pub type DailyProfile = [[f64; 6]; CHANNELS];

/// Bike peaks 16–20, subway inflow has morning and evening peaks,
/// ride-hailing is heaviest 16–24.
pub fn default_profile(mode: Mode) -> DailyProfile {
    match mode {
        Mode::Bike => [[0.15, 0.35, 0.6, 0.7, 1.0, 0.45], [0.15, 0.45, 0.55, 0.75, 1.0, 0.4]],
        Mode::Subway => [[0.1, 0.35, 1.0, 0.45, 0.9, 0.3], [0.1, 0.9, 0.5, 0.5, 1.0, 0.35]],
        Mode::Ridehail => [[0.55, 0.2, 0.4, 0.55, 0.9, 1.0], [0.6, 0.25, 0.45, 0.5, 0.85, 1.0]],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coupling {
    pub source_mode: Mode,
    /// Source node index in its registry.
    pub source: usize,
    /// Target bike station index.
    pub target: usize,
    pub lag: usize,
    pub gain: f64,
}

/// Generated couplings on top of the explicit list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Planted {
    #[default]
    None,
    /// Every bike station copies its geographically nearest source node.
    Nearest,
    /// The source node nearest the layout centre feeds the `hub_fraction`
    /// of bike stations closest to it.
    Hub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_bike: usize,
    pub n_subway: usize,
    pub n_ridehail: usize,
    pub days: usize,
    pub interval_secs: i64,
    /// First bin start, Unix seconds.
    pub t0: i64,
    pub noise_std: f64,
    /// Per-node scale drawn uniformly from this range.
    pub scale_min: f64,
    pub scale_max: f64,
    pub center_lat: f64,
    pub center_lon: f64,
    /// Side of the square layout in metres.
    pub extent_m: f64,
    pub seed: u64,
    pub couplings: Vec<Coupling>,
    pub planted: Planted,
    pub planted_mode: Mode,
    pub planted_lag: usize,
    pub planted_gain: f64,
    pub hub_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_bike: 20,
            n_subway: 10,
            n_ridehail: 6,
            days: 60,
            interval_secs: 4 * 3600,
            t0: 1_519_862_400,
            noise_std: 1.0,
            scale_min: 5.0,
            scale_max: 15.0,
            center_lat: 40.75,
            center_lon: -73.98,
            extent_m: 3000.0,
            seed: 7,
            couplings: Vec::new(),
            planted: Planted::Nearest,
            planted_mode: Mode::Subway,
            planted_lag: 1,
            planted_gain: 2.0,
            hub_fraction: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn n_nodes(&self, mode: Mode) -> usize {
        match mode {
            Mode::Bike => self.n_bike,
            Mode::Subway => self.n_subway,
            Mode::Ridehail => self.n_ridehail,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.days * (86_400 / self.interval_secs.max(1)) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_bike == 0 {
            return fail("synth needs at least one bike station".into());
        }
        if self.interval_secs <= 0 || 86_400 % self.interval_secs != 0 || self.days == 0 {
            return fail(format!("interval {}s / days {} invalid", self.interval_secs, self.days));
        }
        if !(self.noise_std >= 0.0) || !(self.scale_min >= 0.0 && self.scale_max >= self.scale_min) {
            return fail("noise_std >= 0 and 0 <= scale_min <= scale_max required".into());
        }
        if !(self.extent_m > 0.0) || !(0.0..=1.0).contains(&self.hub_fraction) {
            return fail("extent_m > 0 and hub_fraction in [0, 1] required".into());
        }
        if self.planted != Planted::None {
            if !self.planted_mode.is_auxiliary() || self.n_nodes(self.planted_mode) == 0 {
                return fail(format!("planted couplings need auxiliary nodes of {}", self.planted_mode));
            }
            if self.planted_lag == 0 || !self.planted_gain.is_finite() {
                return fail("planted lag must be >= 1 and gain finite".into());
            }
        }
        for c in &self.couplings {
            if c.lag == 0 || !c.gain.is_finite() || !c.source_mode.is_auxiliary() {
                return fail(format!("invalid coupling {c:?}"));
            }
            if c.source >= self.n_nodes(c.source_mode) || c.target >= self.n_bike {
                return fail(format!("coupling {c:?} refers to a missing node"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub data: DemandData,
    pub couplings: Vec<Coupling>,
    /// Couplings whose planted lag did not win the lagged correlation check.
    pub weak_couplings: Vec<Coupling>,
}

fn layout(cfg: &SynthConfig, mode: Mode, n: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    if n == 0 {
        return Vec::new();
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let dx = cfg.extent_m / cols as f64;
    let dy = cfg.extent_m / rows as f64;
    // offset each mode's grid a little so nodes of different modes never coincide
    let shift = 0.17 * mode.index() as f64;
    (0..n)
        .map(|k| {
            let (r, c) = (k / cols, k % cols);
            let jx = rng.random_range(-0.25..0.25);
            let jy = rng.random_range(-0.25..0.25);
            (
                (c as f64 + 0.5 + shift + jx) * dx - cfg.extent_m / 2.0,
                (r as f64 + 0.5 + shift + jy) * dy - cfg.extent_m / 2.0,
            )
        })
        .collect()
}

fn to_latlon(cfg: &SynthConfig, x: f64, y: f64) -> (f64, f64) {
    let m_per_deg = 111_195.08;
    (
        cfg.center_lat + y / m_per_deg,
        cfg.center_lon + x / (m_per_deg * cfg.center_lat.to_radians().cos()),
    )
}

fn planted(cfg: &SynthConfig, regs: &ModeMap<NodeRegistry>) -> Result<Vec<Coupling>> {
    let mode = cfg.planted_mode;
    let make = |source: usize, target: usize| Coupling {
        source_mode: mode,
        source,
        target,
        lag: cfg.planted_lag,
        gain: cfg.planted_gain,
    };
    let bikes = regs.expect(Mode::Bike).centroids()?;
    let sources = regs.expect(mode).centroids()?;
    Ok(match cfg.planted {
        Planted::None => Vec::new(),
        Planted::Nearest => bikes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let j = (0..sources.len())
                    .min_by(|&p, &q| haversine_m(*b, sources[p]).total_cmp(&haversine_m(*b, sources[q])))
                    .expect("nonempty sources");
                make(j, i)
            })
            .collect(),
        Planted::Hub => {
            let center = crate::data::LatLon {
                lat: cfg.center_lat,
                lon: cfg.center_lon,
            };
            let hub = (0..sources.len())
                .min_by(|&p, &q| haversine_m(center, sources[p]).total_cmp(&haversine_m(center, sources[q])))
                .expect("nonempty sources");
            let mut order: Vec<usize> = (0..bikes.len()).collect();
            order.sort_by(|&p, &q| {
                haversine_m(sources[hub], bikes[p]).total_cmp(&haversine_m(sources[hub], bikes[q]))
            });
            let n = (cfg.hub_fraction * bikes.len() as f64).round() as usize;
            let mut targets: Vec<usize> = order.into_iter().take(n).collect();
            targets.sort_unstable();
            targets.into_iter().map(|i| make(hub, i)).collect()
        }
    })
}

/// Series with each time-of-day mean removed.
fn deseasonalize(x: &[f64], period: usize) -> Vec<f64> {
    let mut mean = vec![0.0; period];
    let mut count = vec![0usize; period];
    for (t, v) in x.iter().enumerate() {
        mean[t % period] += v;
        count[t % period] += 1;
    }
    for (m, c) in mean.iter_mut().zip(&count) {
        *m /= (*c).max(1) as f64;
    }
    x.iter().enumerate().map(|(t, v)| v - mean[t % period]).collect()
}

/// Correlation of `target(t)` with `source(t - lag)`.
pub fn lagged_correlation(source: &[f64], target: &[f64], lag: usize) -> f64 {
    if lag >= source.len() {
        return 0.0;
    }
    crate::graph::pearson(&source[..source.len() - lag], &target[lag..])
}

/// Builds per-mode tensors and registries. Deterministic in the seed.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_steps = cfg.n_steps();
    let per_day = (86_400 / cfg.interval_secs) as usize;
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");

    let mut registries = ModeMap::new();
    let mut base = ModeMap::new();
    for mode in Mode::ALL {
        let n = cfg.n_nodes(mode);
        if n == 0 {
            continue;
        }
        let nodes = layout(cfg, mode, n, &mut rng)
            .into_iter()
            .enumerate()
            .map(|(i, (x, y))| {
                let (lat, lon) = to_latlon(cfg, x, y);
                NodeInfo::point(format!("{}{i:03}", &mode.name()[..1]), format!("{mode} {i}"), lat, lon)
            })
            .collect();
        registries.insert(mode, NodeRegistry::new(mode, nodes)?);

        let profile = default_profile(mode);
        let mut t = DemandTensor::zeros(mode, n, n_steps, cfg.interval_secs, cfg.t0);
        for i in 0..n {
            let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
            for s in 0..n_steps {
                let tod = t.time_of_day(s);
                let seg = (tod * 6) / per_day;
                for (c, prof) in profile.iter().enumerate() {
                    let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    t.set(i, s, c, (prof[seg] * scale + eps).max(0.0));
                }
            }
        }
        base.insert(mode, t);
    }

    let mut couplings = cfg.couplings.clone();
    couplings.extend(planted(cfg, &registries)?);

    let mut tensors = base.clone();
    let bike = tensors.get_mut(Mode::Bike).expect("bike generated");
    for c in &couplings {
        let src = base.expect(c.source_mode);
        for s in c.lag..n_steps {
            for ch in 0..CHANNELS {
                bike.add(c.target, s, ch, c.gain * src.get(c.source, s - c.lag, ch));
            }
        }
    }

    let mut weak = Vec::new();
    for c in &couplings {
        let src = deseasonalize(&base.expect(c.source_mode).total_series(c.source), per_day);
        let dst = deseasonalize(&tensors.expect(Mode::Bike).total_series(c.target), per_day);
        let at = |lag| lagged_correlation(&src, &dst, lag);
        let planted = at(c.lag);
        if (1..=4).filter(|&l| l != c.lag).any(|l| at(l) >= planted) {
            log::warn!(
                "coupling {}:{} -> bike:{} lag {} is not the strongest lagged correlation",
                c.source_mode,
                c.source,
                c.target,
                c.lag
            );
            weak.push(*c);
        }
    }

    Ok(SynthOutput {
        data: DemandData { tensors, registries },
        couplings,
        weak_couplings: weak,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub source_mode: Mode,
    pub source_index: usize,
    pub source_id: String,
    pub target_index: usize,
    pub target_id: String,
    pub lag: usize,
    pub gain: f64,
}

impl SynthOutput {
    pub fn ground_truth(&self) -> Vec<GroundTruthEntry> {
        self.couplings
            .iter()
            .map(|c| GroundTruthEntry {
                source_mode: c.source_mode,
                source_index: c.source,
                source_id: self.data.registries.expect(c.source_mode).node(c.source).id.clone(),
                target_index: c.target,
                target_id: self.data.registries.expect(Mode::Bike).node(c.target).id.clone(),
                lag: c.lag,
                gain: c.gain,
            })
            .collect()
    }

    /// Data files plus `couplings.json`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = self.data.save(dir)?;
        let p = dir.join("couplings.json");
        fs::write(&p, serde_json::to_string_pretty(&self.ground_truth())?).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(written)
    }
}
