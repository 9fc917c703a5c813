mod common;

use common::{prepared, small_config, tiny_scenario};
use mmdemand::data::denormalize;
use mmdemand::model::{Model, TrainConfig};
use mmdemand::trainer::{evaluate, metrics, run_experiment, train};
use mmdemand::Mode;

fn quick(modes: &[Mode], epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        channels: 4,
        disc_hidden: vec![4],
        epochs,
        patience,
        ..small_config(modes)
    }
}

#[test]
fn patience_counts_non_improving_epochs() {
    let s = tiny_scenario(21);
    for patience in [0, 2] {
        let cfg = quick(&[Mode::Bike], 40, patience);
        let p = prepared(&s, &cfg);
        let h = train(&p, &cfg).unwrap().history;
        let ran = h.epochs.len();
        assert!(ran <= cfg.epochs);
        if ran < cfg.epochs {
            assert_eq!(ran, h.best_epoch + patience + 2, "patience {patience}");
        }
        let best = h.epochs.iter().map(|e| e.val_rmse).fold(f64::INFINITY, f64::min);
        assert_eq!(best, h.best_val_rmse);
    }
}

#[test]
fn same_seed_trains_identically() {
    let s = tiny_scenario(22);
    let cfg = quick(&Mode::ALL, 4, 10);
    let p = prepared(&s, &cfg);
    let a = train(&p, &cfg).unwrap();
    let b = train(&p, &cfg).unwrap();
    assert!(a.model.store.same_values(&b.model.store));
    assert_eq!(a.history.without_timing(), b.history.without_timing());
    let other = train(&p, &TrainConfig { seed: 43, ..cfg }).unwrap();
    assert!(!a.model.store.same_values(&other.model.store));
}

#[test]
fn best_checkpoint_is_restored() {
    let s = tiny_scenario(23);
    let cfg = quick(&[Mode::Bike], 12, 20);
    let p = prepared(&s, &cfg);
    let res = train(&p, &cfg).unwrap();
    let val = evaluate(&res.model, &p.graph, &p.val, p.bike_stats()).unwrap();
    assert!((val.rmse - res.history.best_val_rmse).abs() < 1e-12);
}

#[test]
fn evaluation_pools_denormalized_counts() {
    let s = tiny_scenario(24);
    let cfg = quick(&[Mode::Bike, Mode::Subway], 2, 5);
    let p = prepared(&s, &cfg);
    let model = Model::new(cfg).unwrap();
    let report = evaluate(&model, &p.graph, &p.test, p.bike_stats()).unwrap();
    // oracle: one batch of every test window, mapped back to counts
    let all = p.test.all();
    let preds = model.predict_tensors(&p.graph, &all.inputs).unwrap();
    let pr = denormalize(preds.expect(Mode::Bike).data(), p.bike_stats());
    let tg = denormalize(all.targets.expect(Mode::Bike).data(), p.bike_stats());
    let n = pr.len() as f64;
    let rmse = (pr.iter().zip(&tg).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
    let mae = pr.iter().zip(&tg).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    assert!((report.rmse - rmse).abs() < 1e-9 && (report.mae - mae).abs() < 1e-9);
    assert_eq!(report.n, pr.len());
    assert_eq!(report.per_station.len(), 4);
    assert_eq!(report.per_time_of_day.len(), 6);
    assert_eq!(report.per_station.iter().map(|c| c.n).sum::<usize>(), report.n);
    let (r, m, _) = metrics(&pr, &tg);
    assert!((r - rmse).abs() < 1e-12 && (m - mae).abs() < 1e-12);
}

#[test]
fn replicate_counts_and_seeds() {
    let s = tiny_scenario(25);
    let cfg = quick(&[Mode::Bike], 2, 5);
    let p = prepared(&s, &cfg);
    let one = run_experiment(&p, &cfg, 1).unwrap();
    assert_eq!(one.rmse.std, 0.0);
    assert_eq!(one.label, "bike");
    let two = run_experiment(&p, &cfg, 2).unwrap();
    assert_eq!(two.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![cfg.seed, cfg.seed + 1]);
    assert_eq!(two.runs[0], one.runs[0]);
    let mean = (two.runs[0].rmse + two.runs[1].rmse) / 2.0;
    assert!((two.rmse.mean - mean).abs() < 1e-12);
    assert!(run_experiment(&p, &cfg, 0).is_err());
}
