use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mode::Mode;

pub const INFLOW: usize = 0;
pub const OUTFLOW: usize = 1;
pub const CHANNELS: usize = 2;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Study period `[start, end)` cut into fixed bins; all times are Unix
/// seconds (UTC).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyWindow {
    pub start: i64,
    pub end: i64,
    pub interval_secs: i64,
}

impl StudyWindow {
    pub fn new(start: i64, end: i64, interval_secs: i64) -> Result<Self> {
        let w = Self {
            start,
            end,
            interval_secs,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval_secs <= 0 || SECONDS_PER_DAY % self.interval_secs != 0 {
            return Err(Error::Config(format!(
                "interval of {}s does not divide 24h evenly",
                self.interval_secs
            )));
        }
        if self.end <= self.start || (self.end - self.start) % self.interval_secs != 0 {
            return Err(Error::Config(format!(
                "study window [{}, {}) is not a whole number of {}s bins",
                self.start, self.end, self.interval_secs
            )));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        ((self.end - self.start) / self.interval_secs) as usize
    }

    pub fn contains(&self, t: i64) -> bool {
        t >= self.start && t < self.end
    }

    /// Bin containing `t`, if inside the window.
    pub fn bin_of(&self, t: i64) -> Option<usize> {
        self.contains(t)
            .then(|| ((t - self.start) / self.interval_secs) as usize)
    }
}

/// Inflow/outflow counts of one mode, laid out `(node, step, channel)`
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandTensor {
    pub mode: Mode,
    pub n_nodes: usize,
    pub n_steps: usize,
    pub interval_secs: i64,
    /// Start of the first bin (Unix seconds).
    pub t0: i64,
    pub values: Vec<f64>,
}

impl DemandTensor {
    pub fn zeros(mode: Mode, n_nodes: usize, n_steps: usize, interval_secs: i64, t0: i64) -> Self {
        Self {
            mode,
            n_nodes,
            n_steps,
            interval_secs,
            t0,
            values: vec![0.0; n_nodes * n_steps * CHANNELS],
        }
    }

    pub fn for_window(mode: Mode, n_nodes: usize, window: &StudyWindow) -> Self {
        Self::zeros(mode, n_nodes, window.n_steps(), window.interval_secs, window.start)
    }

    pub fn from_values(
        mode: Mode,
        n_nodes: usize,
        n_steps: usize,
        interval_secs: i64,
        t0: i64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != n_nodes * n_steps * CHANNELS {
            return Err(Error::Malformed(format!(
                "{mode} tensor expects {} values, got {}",
                n_nodes * n_steps * CHANNELS,
                values.len()
            )));
        }
        Ok(Self {
            mode,
            n_nodes,
            n_steps,
            interval_secs,
            t0,
            values,
        })
    }

    #[inline]
    pub fn offset(&self, node: usize, step: usize, channel: usize) -> usize {
        (node * self.n_steps + step) * CHANNELS + channel
    }

    #[inline]
    pub fn get(&self, node: usize, step: usize, channel: usize) -> f64 {
        self.values[self.offset(node, step, channel)]
    }

    #[inline]
    pub fn add(&mut self, node: usize, step: usize, channel: usize, v: f64) {
        let o = self.offset(node, step, channel);
        self.values[o] += v;
    }

    #[inline]
    pub fn set(&mut self, node: usize, step: usize, channel: usize, v: f64) {
        let o = self.offset(node, step, channel);
        self.values[o] = v;
    }

    pub fn series(&self, node: usize, channel: usize) -> Vec<f64> {
        (0..self.n_steps).map(|t| self.get(node, t, channel)).collect()
    }

    /// Inflow + outflow per step.
    pub fn total_series(&self, node: usize) -> Vec<f64> {
        (0..self.n_steps)
            .map(|t| self.get(node, t, INFLOW) + self.get(node, t, OUTFLOW))
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn bins_per_day(&self) -> usize {
        (SECONDS_PER_DAY / self.interval_secs) as usize
    }

    /// Index of the daily bin (0 = the bin starting at midnight UTC) for a step.
    pub fn time_of_day(&self, step: usize) -> usize {
        let t = self.t0 + step as i64 * self.interval_secs;
        (t.rem_euclid(SECONDS_PER_DAY) / self.interval_secs) as usize
    }

    /// Rows for the nodes in `keep`, in that order.
    pub fn select_nodes(&self, keep: &[usize]) -> Self {
        let row = self.n_steps * CHANNELS;
        let mut values = Vec::with_capacity(keep.len() * row);
        for &i in keep {
            values.extend_from_slice(&self.values[i * row..(i + 1) * row]);
        }
        Self {
            values,
            n_nodes: keep.len(),
            ..self.clone()
        }
    }

    pub fn same_time_axis(&self, other: &DemandTensor) -> bool {
        self.n_steps == other.n_steps && self.interval_secs == other.interval_secs && self.t0 == other.t0
    }
}
