use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mode::Mode;

/// How the prediction head summarizes the final feature sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    #[default]
    Last,
    Mean,
}

/// Which TCN output of a block feeds the discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorSource {
    #[default]
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// History steps per sample.
    pub history: usize,
    pub num_blocks: usize,
    pub tcn_kernel: usize,
    pub channels: usize,
    pub disc_hidden: Vec<usize>,
    pub eps_aux: f64,
    pub eps_adv: f64,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
    pub modes: Vec<Mode>,
    /// Include the inter-modal difference convolutions.
    pub use_diff_gcn: bool,
    pub readout: Readout,
    pub disc_source: DiscriminatorSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            history: 6,
            num_blocks: 2,
            tcn_kernel: 2,
            channels: 32,
            disc_hidden: vec![64, 32],
            eps_aux: 0.2,
            eps_adv: 5.0,
            dropout: 0.3,
            learning_rate: 0.002,
            batch_size: 32,
            epochs: 500,
            weight_decay: 1e-5,
            patience: 20,
            seed: 42,
            modes: Mode::ALL.to_vec(),
            use_diff_gcn: true,
            readout: Readout::Last,
            disc_source: DiscriminatorSource::First,
        }
    }
}

impl TrainConfig {
    /// Sorted, deduplicated modes.
    pub fn modes(&self) -> Vec<Mode> {
        let mut m = self.modes.clone();
        m.sort();
        m.dedup();
        m
    }

    pub fn aux_modes(&self) -> Vec<Mode> {
        self.modes().into_iter().filter(|m| m.is_auxiliary()).collect()
    }

    /// The discriminator only exists when there is more than one mode.
    pub fn has_discriminator(&self) -> bool {
        self.modes().len() >= 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !self.modes.contains(&Mode::Bike) {
            return fail("modes must include bike".into());
        }
        if !(self.eps_aux >= 0.0 && self.eps_adv >= 0.0) || !self.eps_aux.is_finite() || !self.eps_adv.is_finite() {
            return fail(format!("eps_aux ({}) and eps_adv ({}) must be finite and >= 0", self.eps_aux, self.eps_adv));
        }
        if self.history == 0 || self.num_blocks == 0 || self.tcn_kernel == 0 || self.channels == 0 {
            return fail("history, num_blocks, tcn_kernel and channels must be positive".into());
        }
        if self.disc_hidden.contains(&0) {
            return fail("discriminator hidden sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.batch_size == 0 {
            return fail("learning_rate and batch_size must be positive, weight_decay >= 0".into());
        }
        Ok(())
    }
}
