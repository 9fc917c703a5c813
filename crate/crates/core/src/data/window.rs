use std::fmt;
use std::sync::Arc;

use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use super::normalize::fraction_steps;
use super::tensor::{DemandTensor, CHANNELS};
use crate::error::{Error, Result};
use crate::mode::{Mode, ModeMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Chronological split fractions; they must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must be in [0,1] and sum to 1")));
        }
        if self.train <= 0.0 {
            return Err(Error::Config("train fraction must be positive".into()));
        }
        Ok(())
    }

    /// Half-open step ranges `[start, end)` of the three splits.
    pub fn bounds(&self, n_steps: usize) -> [(Split, usize, usize); 3] {
        let a = fraction_steps(n_steps, self.train);
        let b = if self.test == 0.0 {
            n_steps
        } else {
            fraction_steps(n_steps, self.train + self.val).max(a)
        };
        [(Split::Train, 0, a), (Split::Val, a, b), (Split::Test, b, n_steps)]
    }
}

/// Samples of one split. A sample is identified by its last input step
/// `t`: inputs cover steps `t+1-T ..= t` and the target is step `t+1`, all
/// inside the split.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub split: Split,
    pub history: usize,
    pub series: Arc<ModeMap<DemandTensor>>,
    pub steps: Vec<usize>,
}

/// Inputs shaped `(B, N, T, 2)` and targets `(B, N, 2)` per mode.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: ModeMap<Tensor>,
    pub targets: ModeMap<Tensor>,
    pub steps: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn modes(&self) -> Vec<Mode> {
        self.series.modes()
    }

    pub fn target_step(&self, sample: usize) -> usize {
        self.steps[sample] + 1
    }

    /// Batch of the given sample indices (into `steps`).
    pub fn batch(&self, samples: &[usize]) -> Batch {
        let steps: Vec<usize> = samples.iter().map(|&s| self.steps[s]).collect();
        let inputs = self.series.map(|_, t| self.gather(t, &steps, true));
        let targets = self.series.map(|_, t| self.gather(t, &steps, false));
        Batch {
            inputs,
            targets,
            steps,
        }
    }

    pub fn all(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    fn gather(&self, tensor: &DemandTensor, steps: &[usize], history: bool) -> Tensor {
        let n = tensor.n_nodes;
        let k = if history { self.history } else { 1 };
        let mut data = Vec::with_capacity(steps.len() * n * k * CHANNELS);
        for &t in steps {
            let first = if history { t + 1 - self.history } else { t + 1 };
            for i in 0..n {
                let o = tensor.offset(i, first, 0);
                data.extend_from_slice(&tensor.values[o..o + k * CHANNELS]);
            }
        }
        let shape: Vec<usize> = if history {
            vec![steps.len(), n, k, CHANNELS]
        } else {
            vec![steps.len(), n, CHANNELS]
        };
        Tensor::from_vec(&shape, data).expect("gathered length matches shape")
    }
}

/// Splits the common time axis chronologically and enumerates every
/// sample whose history and target lie inside one split.
pub fn window_split(
    tensors: ModeMap<DemandTensor>,
    history: usize,
    fractions: SplitFractions,
) -> Result<[WindowedDataset; 3]> {
    fractions.validate()?;
    if history == 0 {
        return Err(Error::Config("history length must be >= 1".into()));
    }
    let bike = tensors
        .get(Mode::Bike)
        .ok_or_else(|| Error::Config("bike demand is required".into()))?;
    for (m, t) in tensors.iter() {
        if !t.same_time_axis(bike) {
            return Err(Error::Config(format!("{m} time axis differs from bike")));
        }
    }
    let n_steps = bike.n_steps;
    if n_steps <= history + 1 {
        return Err(Error::Config(format!(
            "{n_steps} steps cannot hold a history of {history} plus a target"
        )));
    }
    let fracs = [fractions.train, fractions.val, fractions.test];
    let series = Arc::new(tensors);
    let bounds = fractions.bounds(n_steps);
    let mut out = Vec::with_capacity(3);
    for ((split, start, end), frac) in bounds.into_iter().zip(fracs) {
        if frac > 0.0 && end - start < history + 1 {
            return Err(Error::Config(format!(
                "{split} split has {} steps, needs at least {}",
                end - start,
                history + 1
            )));
        }
        let steps = if end - start > history {
            (start + history - 1..end - 1).collect()
        } else {
            Vec::new()
        };
        out.push(WindowedDataset {
            split,
            history,
            series: Arc::clone(&series),
            steps,
        });
    }
    Ok(out.try_into().expect("three splits"))
}
