mod common;

use common::tiny_scenario;
use mmdemand::data::{LatLon, INFLOW, OUTFLOW};
use mmdemand::graph::{build_multigraph, AdjKind, GraphConfig, MultiRelationalGraph};
use mmdemand::Mode;

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn oracle_metres(a: LatLon, b: LatLon) -> f64 {
    // spherical law of cosines, fine at these distances in f64
    let r = 6_371_008.8;
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * (b.lon - a.lon).to_radians().cos();
    r * c.clamp(-1.0, 1.0).acos()
}

fn graph_of(s: &mmdemand::synth::SynthOutput, train_steps: usize, cfg: &GraphConfig) -> MultiRelationalGraph {
    build_multigraph(&s.data, train_steps, cfg).unwrap()
}

#[test]
fn pattern_rows_match_brute_force_top_k() {
    let s = tiny_scenario(11);
    let cfg = GraphConfig {
        k: 2,
        ..GraphConfig::default()
    };
    let train_steps = 60;
    let g = graph_of(&s, train_steps, &cfg);
    let series = |m: Mode, i: usize| -> Vec<f64> {
        let t = s.data.tensors.expect(m);
        (0..train_steps).map(|k| t.get(i, k, INFLOW) + t.get(i, k, OUTFLOW)).collect()
    };
    for rel in g.relations().iter().filter(|r| r.raw.kind == AdjKind::Pattern) {
        let (rm, cm) = (rel.raw.rows, rel.raw.cols);
        for i in 0..rel.raw.n_rows {
            let mut scores: Vec<(usize, f64)> = (0..rel.raw.n_cols)
                .filter(|&j| !(rm == cm && i == j))
                .map(|j| (j, oracle_pearson(&series(rm, i), &series(cm, j))))
                .filter(|&(_, v)| v > 0.0)
                .collect();
            scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut want = vec![0.0; rel.raw.n_cols];
            for &(j, v) in scores.iter().take(cfg.k) {
                want[j] = v;
            }
            if rm == cm {
                want[i] = 1.0;
            }
            for (j, (&got, &w)) in rel.raw.row(i).iter().zip(&want).enumerate() {
                assert!((got - w).abs() < 1e-12, "{rm}->{cm} ({i},{j}): {got} vs {w}");
            }
        }
    }
}

#[test]
fn geographic_weights_match_kernel() {
    let s = tiny_scenario(12);
    let cfg = GraphConfig::default();
    let g = graph_of(&s, 60, &cfg);
    for rel in g.relations().iter().filter(|r| r.raw.kind == AdjKind::Geo) {
        let rows = s.data.registries.expect(rel.raw.rows).centroids().unwrap();
        let cols = s.data.registries.expect(rel.raw.cols).centroids().unwrap();
        for (i, &p) in rows.iter().enumerate() {
            for (j, &q) in cols.iter().enumerate() {
                let d = oracle_metres(p, q);
                let want = if rel.raw.rows == rel.raw.cols && i == j {
                    1.0
                } else if d <= cfg.d_max_m {
                    (-(d / cfg.sigma_m).powi(2)).exp()
                } else {
                    0.0
                };
                assert!((rel.raw.get(i, j) - want).abs() < 1e-6, "{} ({i},{j})", rel.key());
            }
        }
        if rel.raw.rows == rel.raw.cols {
            for i in 0..rel.raw.n_rows {
                for j in 0..rel.raw.n_cols {
                    assert_eq!(rel.raw.get(i, j), rel.raw.get(j, i));
                }
            }
        }
    }
}

#[test]
fn normalized_rows_are_stochastic_or_empty() {
    let s = tiny_scenario(13);
    let g = graph_of(&s, 60, &GraphConfig::default());
    assert_eq!(g.len(), 10);
    for rel in g.relations() {
        let t = &rel.normalized;
        for row in t.data().chunks(t.shape()[1]) {
            assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().sum();
            assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-12, "{}: row sum {sum}", rel.key());
        }
    }
}

#[test]
fn later_bins_never_reach_the_graph() {
    let s = tiny_scenario(14);
    let train_steps = 70;
    let before = graph_of(&s, train_steps, &GraphConfig::default()).manifest();
    let mut moved = s.clone();
    for m in Mode::ALL {
        let t = moved.data.tensors.get_mut(m).unwrap();
        for i in 0..t.n_nodes {
            for k in train_steps..t.n_steps {
                t.set(i, k, INFLOW, (i * 31 + k * 7) as f64 % 13.0);
            }
        }
    }
    let after = graph_of(&moved, train_steps, &GraphConfig::default()).manifest();
    assert_eq!(before.combined_sha256, after.combined_sha256);
}

#[test]
fn saved_graph_loads_identically() {
    let s = tiny_scenario(15);
    let g = graph_of(&s, 60, &GraphConfig::default());
    let dir = tempfile::tempdir().unwrap();
    g.save(dir.path()).unwrap();
    let back = MultiRelationalGraph::load(dir.path()).unwrap();
    assert_eq!(g.manifest(), back.manifest());
    for (a, b) in g.relations().iter().zip(back.relations()) {
        assert_eq!(a.raw, b.raw);
    }
    back.check_against(&s.data).unwrap();
}
