use serde::{Deserialize, Serialize};

use super::tensor::{DemandTensor, CHANNELS};
use crate::error::{Error, Result};
use crate::mode::Mode;

/// Per-channel min/max of one mode over the training bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mode: Mode,
    pub min: [f64; CHANNELS],
    pub max: [f64; CHANNELS],
}

impl NormStats {
    pub fn range(&self, channel: usize) -> f64 {
        self.max[channel] - self.min[channel]
    }

    pub fn normalize_value(&self, v: f64, channel: usize) -> f64 {
        let r = self.range(channel);
        if r > 0.0 {
            (v - self.min[channel]) / r
        } else {
            0.0
        }
    }

    pub fn denormalize_value(&self, v: f64, channel: usize) -> f64 {
        v * self.range(channel) + self.min[channel]
    }
}

/// Number of leading bins covered by a split fraction.
pub fn fraction_steps(n_steps: usize, fraction: f64) -> usize {
    // tolerate representation error such as 0.6 * 100 = 59.999...
    ((fraction * n_steps as f64) + 1e-9).floor() as usize
}

/// Stats over the first `train_steps` bins.
pub fn fit_stats(tensor: &DemandTensor, train_steps: usize) -> Result<NormStats> {
    if train_steps == 0 || train_steps > tensor.n_steps {
        return Err(Error::Config(format!(
            "{} normalization needs 1..={} training bins, got {train_steps}",
            tensor.mode, tensor.n_steps
        )));
    }
    let mut min = [f64::INFINITY; CHANNELS];
    let mut max = [f64::NEG_INFINITY; CHANNELS];
    for i in 0..tensor.n_nodes {
        for t in 0..train_steps {
            for c in 0..CHANNELS {
                let v = tensor.get(i, t, c);
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
    }
    Ok(NormStats {
        mode: tensor.mode,
        min,
        max,
    })
}

/// Applies `stats` to every bin. Values outside the training range map
/// outside [0, 1] and are kept.
pub fn normalize_with(tensor: &DemandTensor, stats: &NormStats) -> Result<DemandTensor> {
    check_mode(tensor.mode, stats)?;
    let mut out = tensor.clone();
    for (k, v) in out.values.iter_mut().enumerate() {
        *v = stats.normalize_value(*v, k % CHANNELS);
    }
    Ok(out)
}

/// Min-max normalization with stats from the first
/// `⌊train_fraction · T_total⌋` bins.
pub fn fit_normalize(tensor: &DemandTensor, train_fraction: f64) -> Result<(DemandTensor, NormStats)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} not in (0, 1]")));
    }
    let stats = fit_stats(tensor, fraction_steps(tensor.n_steps, train_fraction))?;
    Ok((normalize_with(tensor, &stats)?, stats))
}

/// Inverse of the normalization for channel-last values
/// (`..., channel`).
pub fn denormalize(values: &[f64], stats: &NormStats) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .map(|(k, &v)| stats.denormalize_value(v, k % CHANNELS))
        .collect()
}

pub fn denormalize_tensor(tensor: &DemandTensor, stats: &NormStats) -> Result<DemandTensor> {
    check_mode(tensor.mode, stats)?;
    Ok(DemandTensor {
        values: denormalize(&tensor.values, stats),
        ..tensor.clone()
    })
}

fn check_mode(mode: Mode, stats: &NormStats) -> Result<()> {
    if mode != stats.mode {
        return Err(Error::Config(format!("{} stats applied to {mode} data", stats.mode)));
    }
    Ok(())
}
