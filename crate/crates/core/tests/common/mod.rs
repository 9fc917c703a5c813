#![allow(dead_code)]

use mmdemand::data::SplitFractions;
use mmdemand::graph::{relation_keys, AdjKind, AdjacencyMatrix, GraphConfig, MultiRelationalGraph, Relation};
use mmdemand::model::TrainConfig;
use mmdemand::synth::{generate, Planted, SynthConfig, SynthOutput};
use mmdemand::trainer::{prepare, Prepared};
use mmdemand::Mode;

/// Planted-coupling scenario: every bike station copies its nearest
/// subway station one step later, with gain twice the noise level.
pub fn scenario(planted: Planted, seed: u64) -> SynthOutput {
    generate(&SynthConfig {
        planted,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Small, fast training configuration for synthetic runs.
pub fn small_config(modes: &[Mode]) -> TrainConfig {
    TrainConfig {
        channels: 16,
        disc_hidden: vec![32, 16],
        epochs: 60,
        patience: 8,
        modes: modes.to_vec(),
        ..TrainConfig::default()
    }
}

pub fn prepared(s: &SynthOutput, cfg: &TrainConfig) -> Prepared {
    prepare(&s.data, cfg, &GraphConfig::default(), SplitFractions::default()).unwrap()
}

/// Four bike, three subway and two ride-hail nodes; enough days for
/// every split to hold windows.
pub fn tiny_scenario(seed: u64) -> SynthOutput {
    generate(&SynthConfig {
        n_bike: 4,
        n_subway: 3,
        n_ridehail: 2,
        days: 20,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Graph with the given node counts whose every relation is filled by
/// `fill(rows, cols, kind, i, j)`.
pub fn hand_graph(
    counts: &[(Mode, usize)],
    fill: impl Fn(Mode, Mode, AdjKind, usize, usize) -> f64,
) -> MultiRelationalGraph {
    let modes: Vec<Mode> = counts.iter().map(|c| c.0).collect();
    let n = |m: Mode| counts.iter().find(|c| c.0 == m).unwrap().1;
    let relations = relation_keys(&modes)
        .into_iter()
        .map(|key| {
            let mut a = AdjacencyMatrix::zeros(key.rows, key.cols, key.kind, n(key.rows), n(key.cols));
            for i in 0..a.n_rows {
                for j in 0..a.n_cols {
                    a.set(i, j, fill(key.rows, key.cols, key.kind, i, j));
                }
            }
            Relation::new(a)
        })
        .collect();
    MultiRelationalGraph::from_relations(&modes, relations).unwrap()
}

/// Deterministic pseudo-random values in `[lo, hi)`.
pub fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
