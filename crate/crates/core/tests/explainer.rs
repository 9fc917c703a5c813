mod common;

use common::{prepared, small_config, tiny_scenario};
use mmdemand::explainer::{
    explain_station, explain_station_windows, explain_targets, explanation_objective, ExplainerMasks, ExplainerSettings,
    MaskOptimizer,
};
use mmdemand::graph::MultiRelationalGraph;
use mmdemand::model::{Model, TrainConfig};
use mmdemand::trainer::{train, Prepared};
use mmdemand::{Mode, ModeMap};
use diffcore::Tensor;

fn fixture() -> (Prepared, Model, mmdemand::synth::SynthOutput) {
    let s = tiny_scenario(31);
    let cfg = TrainConfig {
        channels: 4,
        disc_hidden: vec![4],
        epochs: 5,
        ..small_config(&Mode::ALL)
    };
    let p = prepared(&s, &cfg);
    let model = train(&p, &cfg).unwrap().model;
    (p, model, s)
}

fn sample(p: &Prepared) -> ModeMap<Tensor> {
    p.test.batch(&[0]).inputs
}

fn masks_of(g: &MultiRelationalGraph, target: usize, value: f64) -> ExplainerMasks {
    ExplainerMasks {
        target,
        masks: g.modes().iter().map(|&m| (m, vec![value; g.n_nodes(m).unwrap()])).collect(),
        trace: vec![],
    }
}

#[test]
fn open_masks_reproduce_the_prediction() {
    let (p, model, _) = fixture();
    let d = explanation_objective(&model, &p.graph, &sample(&p), &masks_of(&p.graph, 1, 50.0), 0.0).unwrap();
    assert!(d < 1e-5, "distance {d}");
    let closed = explanation_objective(&model, &p.graph, &sample(&p), &masks_of(&p.graph, 1, -50.0), 0.0).unwrap();
    assert!(closed > d);
}

#[test]
fn zero_steps_return_the_initialization() {
    let (p, model, _) = fixture();
    let settings = ExplainerSettings {
        steps: 0,
        init_std: 0.0,
        ..ExplainerSettings::default()
    };
    let m = explain_station(&model, &p.graph, &sample(&p), 2, &settings).unwrap();
    assert!(m.trace.is_empty());
    assert!(m.masks.iter().all(|(_, v)| v.iter().all(|&x| x == 0.0)));
    assert!(explain_station(&model, &p.graph, &sample(&p), 4, &settings).is_err());
}

#[test]
fn sparsity_penalty_lowers_mean_weight() {
    let (p, model, _) = fixture();
    let run = |beta: f64| {
        let settings = ExplainerSettings {
            steps: 150,
            lr: 0.05,
            beta,
            ..ExplainerSettings::default()
        };
        explain_station(&model, &p.graph, &sample(&p), 0, &settings).unwrap().mean_weight()
    };
    assert!(run(1.0) < run(0.0));
}

#[test]
fn small_step_descent_is_mostly_monotone() {
    let (p, model, _) = fixture();
    let settings = ExplainerSettings {
        steps: 100,
        lr: 0.01,
        beta: 0.05,
        optimizer: MaskOptimizer::Sgd,
        ..ExplainerSettings::default()
    };
    let m = explain_station(&model, &p.graph, &sample(&p), 3, &settings).unwrap();
    let down = m.trace.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down as f64 >= 0.95 * (m.trace.len() - 1) as f64, "{down} of {}", m.trace.len() - 1);
}

#[test]
fn explaining_leaves_parameters_alone() {
    let (p, model, _) = fixture();
    let before = model.store.clone();
    let settings = ExplainerSettings {
        steps: 20,
        ..ExplainerSettings::default()
    };
    explain_station(&model, &p.graph, &sample(&p), 0, &settings).unwrap();
    assert!(model.store.same_values(&before));
    assert!(model.store.iter().all(|(_, p)| p.trainable));
}

#[test]
fn parallel_targets_match_sequential_runs() {
    let (p, model, s) = fixture();
    let settings = ExplainerSettings {
        steps: 15,
        windows: 2,
        ..ExplainerSettings::default()
    };
    let targets = [0, 1, 2, 3];
    let global = explain_targets(&model, &p.graph, &p.test, &s.data.registries, &settings, &targets).unwrap();
    for (&t, e) in targets.iter().zip(&global.explanations) {
        let one = explain_station_windows(&model, &p.graph, &p.test, t, &settings).unwrap();
        assert_eq!(&one, e);
    }
    assert_eq!(global.table.n_targets, 4);
    let bike_rows = global.table.mode_rows(Mode::Bike).count();
    assert_eq!(bike_rows, 4);
}

#[test]
fn lagged_copy_source_ranks_first() {
    use mmdemand::graph::AdjKind;
    use mmdemand::synth::{generate, Planted, SynthConfig};
    let s = generate(&SynthConfig {
        n_bike: 6,
        n_subway: 4,
        n_ridehail: 2,
        days: 30,
        seed: 41,
        planted: Planted::Nearest,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        channels: 16,
        disc_hidden: vec![8],
        dropout: 0.0,
        eps_adv: 0.05,
        epochs: 200,
        patience: 30,
        ..small_config(&Mode::ALL)
    };
    let p = prepared(&s, &cfg);
    let model = train(&p, &cfg).unwrap().model;
    // the copy the graph sees best: a source with almost no geographic weight
    // on its target is only reachable through the near-uniform pattern rows
    let geo = &p.graph.relation(Mode::Bike, Mode::Subway, AdjKind::Geo).unwrap().raw;
    let c = s
        .couplings
        .iter()
        .filter(|c| c.source_mode == Mode::Subway)
        .max_by(|a, b| geo.get(a.target, a.source).total_cmp(&geo.get(b.target, b.source)))
        .unwrap();
    let n = p.test.len();
    let mut first = 0;
    for k in 0..20u64 {
        let settings = ExplainerSettings {
            seed: k,
            ..ExplainerSettings::default()
        };
        let window = p.test.batch(&[(k as usize * n) / 20]).inputs;
        let m = explain_station(&model, &p.graph, &window, c.target, &settings).unwrap();
        let mask = m.mask(Mode::Subway).unwrap();
        first += usize::from(mask.iter().all(|&v| v <= mask[c.source]));
    }
    assert!(first >= 18, "source ranked first in {first}/20");
}
