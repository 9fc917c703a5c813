mod common;

use common::{hand_graph, prepared, small_config, tiny_scenario, uniform};
use diffcore::{ParamStore, Tape, Tensor, Var};
use mmdemand::graph::{AdjKind, MultiRelationalGraph, Relation};
use mmdemand::model::{
    adversarial_loss, discriminate, gated_tcn, inter_difference_conv, inter_similarity_conv, intra_conv, total_loss,
    ForwardOptions, Model, TrainConfig,
};
use mmdemand::{Mode, ModeMap};

fn store_with(params: &[(&str, &[usize], Vec<f64>)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, shape, data) in params {
        s.add(*name, Tensor::from_vec(shape, data.clone()).unwrap()).unwrap();
    }
    s
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
    }
}

fn tcn_store(feat_w: Vec<f64>, feat_b: Vec<f64>, gate_w: Vec<f64>, gate_b: Vec<f64>, ks: usize, cin: usize, cout: usize) -> ParamStore {
    store_with(&[
        ("t.feat.w", &[ks, cin, cout], feat_w),
        ("t.feat.b", &[cout], feat_b),
        ("t.gate.w", &[ks, cin, cout], gate_w),
        ("t.gate.b", &[cout], gate_b),
    ])
}

fn linear_branch(store: &ParamStore, x: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.param(store, store.id("t.feat.w").unwrap());
    let b = tape.param(store, store.id("t.feat.b").unwrap());
    let y = tape.causal_conv1d(xv, w).unwrap();
    let y = tape.add(y, b).unwrap();
    tape.value(y).data().to_vec()
}

fn run_tcn(store: &ParamStore, x: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = gated_tcn(&mut tape, store, "t", xv).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn closed_gate_halves_the_linear_branch() {
    let (ks, cin, cout) = (2, 2, 3);
    let store = tcn_store(
        uniform(ks * cin * cout, -1.0, 1.0, 1),
        uniform(cout, -1.0, 1.0, 2),
        vec![0.0; ks * cin * cout],
        vec![0.0; cout],
        ks,
        cin,
        cout,
    );
    let x = Tensor::from_vec(&[1, 2, 4, cin], uniform(16, -2.0, 2.0, 3)).unwrap();
    let half: Vec<f64> = linear_branch(&store, &x).iter().map(|v| 0.5 * v).collect();
    close(&run_tcn(&store, &x), &half, 1e-15);
}

#[test]
fn saturated_gate_passes_the_linear_branch() {
    let (ks, cin, cout) = (2, 2, 3);
    let store = tcn_store(
        uniform(ks * cin * cout, -1.0, 1.0, 4),
        uniform(cout, -1.0, 1.0, 5),
        vec![0.0; ks * cin * cout],
        vec![50.0; cout],
        ks,
        cin,
        cout,
    );
    let x = Tensor::from_vec(&[2, 1, 5, cin], uniform(20, -2.0, 2.0, 6)).unwrap();
    close(&run_tcn(&store, &x), &linear_branch(&store, &x), 1e-12);
}

#[test]
fn kernel_two_convolution_by_hand() {
    // tap 0 sees the previous step, tap 1 the current one
    let store = tcn_store(vec![0.5, 2.0], vec![0.1], vec![0.0, 0.0], vec![50.0], 2, 1, 1);
    let x = Tensor::from_vec(&[1, 1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    close(&run_tcn(&store, &x), &[2.1, 4.6, 7.1], 1e-12);
}

fn disc_store(d: usize, hidden: usize, m: usize, zero: bool, seed: u64) -> ParamStore {
    let v = |n: usize, s: u64| if zero { vec![0.0; n] } else { uniform(n, -1.0, 1.0, s) };
    store_with(&[
        ("d.w1", &[d, hidden], v(d * hidden, seed)),
        ("d.b1", &[hidden], v(hidden, seed + 1)),
        ("d.w2", &[hidden, m], v(hidden * m, seed + 2)),
        ("d.b2", &[m], v(m, seed + 3)),
    ])
}

fn run_disc(store: &ParamStore, feats: Tensor) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(feats);
    let p = discriminate(&mut tape, store, "d", 2, x, 0.0).unwrap();
    tape.value(p).clone()
}

#[test]
fn zero_discriminator_is_uniform() {
    let store = disc_store(6, 4, 3, true, 0);
    let p = run_disc(&store, Tensor::from_vec(&[2, 5, 6], uniform(60, -3.0, 3.0, 9)).unwrap());
    assert_eq!(p.shape(), &[2, 5, 3]);
    assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn discriminator_rows_are_distributions() {
    for (m, seed) in [(3, 10), (2, 20)] {
        let store = disc_store(6, 4, m, false, seed);
        let p = run_disc(&store, Tensor::from_vec(&[3, 4, 6], uniform(72, -3.0, 3.0, seed + 7)).unwrap());
        assert_eq!(p.shape(), &[3, 4, m]);
        for row in p.data().chunks(m) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }
}

fn adv(probs: Vec<f64>, labels: Vec<f64>, shape: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_vec(shape, probs).unwrap());
    let l = tape.constant(Tensor::from_vec(shape, labels).unwrap());
    let loss = adversarial_loss(&mut tape, p, l).unwrap();
    tape.value(loss).item().unwrap()
}

fn one_hot(classes: &[usize], m: usize) -> Vec<f64> {
    classes
        .iter()
        .flat_map(|&c| (0..m).map(move |j| if j == c { 1.0 } else { 0.0 }))
        .collect()
}

#[test]
fn adversarial_loss_fixtures() {
    let labels = one_hot(&[0, 1, 2, 2], 3);
    let uniform_loss = adv(vec![1.0 / 3.0; 12], labels.clone(), &[1, 4, 3]);
    assert!((uniform_loss - 3f64.ln()).abs() < 1e-12);
    assert!(adv(labels.clone(), labels, &[1, 4, 3]).abs() < 1e-12);

    // six nodes, random distributions against an independent oracle
    let classes = [0, 2, 1, 1, 0, 2];
    let raw = uniform(18, 0.1, 1.0, 33);
    let probs: Vec<f64> = raw
        .chunks(3)
        .flat_map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(move |v| v / s)
        })
        .collect();
    let oracle = -classes
        .iter()
        .enumerate()
        .map(|(i, &c)| probs[i * 3 + c].ln())
        .sum::<f64>()
        / 6.0;
    assert!((adv(probs, one_hot(&classes, 3), &[2, 3, 3]) - oracle).abs() < 1e-12);
}

/// Dense per-step reference for one relational term:
/// `ReLU(Σ_j a[i][j] x[b, j, k, :] W + l)`.
fn gcn_oracle(a: &[Vec<f64>], x: &[f64], dims: (usize, usize, usize, usize), w: &[f64], l: &[f64]) -> Vec<f64> {
    let (b, n_cols, k, c) = dims;
    let n_rows = a.len();
    let mut out = vec![0.0; b * n_rows * k * c];
    for bi in 0..b {
        for i in 0..n_rows {
            for t in 0..k {
                let mut mixed = vec![0.0; c];
                for j in 0..n_cols {
                    for ch in 0..c {
                        mixed[ch] += a[i][j] * x[((bi * n_cols + j) * k + t) * c + ch];
                    }
                }
                for o in 0..c {
                    let mut s = l[o];
                    for ch in 0..c {
                        s += mixed[ch] * w[ch * c + o];
                    }
                    out[((bi * n_rows + i) * k + t) * c + o] = s.max(0.0);
                }
            }
        }
    }
    out
}

fn dense(g: &MultiRelationalGraph, rows: Mode, cols: Mode, kind: AdjKind) -> Vec<Vec<f64>> {
    let t = g.normalized(rows, cols, kind);
    t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn gcn_store(prefix: &str, c: usize, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, kind) in ["geo", "pattern"].iter().enumerate() {
        let sd = seed + 10 * i as u64;
        s.add(format!("{prefix}.{kind}.w"), Tensor::from_vec(&[c, c], uniform(c * c, -1.0, 1.0, sd)).unwrap())
            .unwrap();
        s.add(format!("{prefix}.{kind}.l"), Tensor::from_vec(&[c], uniform(c, -0.3, 0.3, sd + 1)).unwrap())
            .unwrap();
    }
    s
}

fn values(store: &ParamStore, name: &str) -> Vec<f64> {
    store.value(store.id(name).unwrap()).data().to_vec()
}

fn set(store: &mut ParamStore, name: &str, data: Vec<f64>) {
    let id = store.id(name).unwrap();
    let shape = store.value(id).shape().to_vec();
    store.set_value(id, Tensor::from_vec(&shape, data).unwrap()).unwrap();
}

fn identity_store(prefix: &str, c: usize) -> ParamStore {
    let mut s = gcn_store(prefix, c, 0);
    for kind in ["geo", "pattern"] {
        set(&mut s, &format!("{prefix}.{kind}.w"), (0..c * c).map(|i| if i % (c + 1) == 0 { 1.0 } else { 0.0 }).collect());
        set(&mut s, &format!("{prefix}.{kind}.l"), vec![0.0; c]);
    }
    s
}

fn run_intra(store: &ParamStore, g: &MultiRelationalGraph, x: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let h = tape.constant(x.clone());
    let y = intra_conv(&mut tape, store, "g", h, g, Mode::Bike).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn intra_conv_identity_graph_and_weights() {
    let g = hand_graph(&[(Mode::Bike, 3)], |_, _, _, i, j| if i == j { 1.0 } else { 0.0 });
    let x = Tensor::from_vec(&[1, 3, 2, 2], uniform(12, 0.0, 1.0, 40)).unwrap();
    let want: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    close(&run_intra(&identity_store("g", 2), &g, &x), &want, 1e-15);
}

#[test]
fn intra_conv_averages_two_linked_nodes() {
    let g = hand_graph(&[(Mode::Bike, 2)], |_, _, kind, _, _| if kind == AdjKind::Geo { 1.0 } else { 0.0 });
    let mut store = identity_store("g", 1);
    set(&mut store, "g.pattern.w", vec![0.0]);
    let x = Tensor::from_vec(&[1, 2, 1, 1], vec![2.0, 4.0]).unwrap();
    close(&run_intra(&store, &g, &x), &[3.0, 3.0], 1e-15);
}

#[test]
fn intra_conv_matches_dense_oracle() {
    let (b, n, k, c) = (2, 5, 3, 3);
    let raw = uniform(2 * n * n, 0.0, 1.0, 50);
    let g = hand_graph(&[(Mode::Bike, n)], |_, _, kind, i, j| {
        let v = raw[(kind as usize) * n * n + i * n + j];
        if v < 0.3 && i != j {
            0.0
        } else {
            v
        }
    });
    let store = gcn_store("g", c, 51);
    let x = Tensor::from_vec(&[b, n, k, c], uniform(b * n * k * c, -1.0, 1.0, 52)).unwrap();
    let mut want = vec![0.0; b * n * k * c];
    for kind in AdjKind::ALL {
        let part = gcn_oracle(
            &dense(&g, Mode::Bike, Mode::Bike, kind),
            x.data(),
            (b, n, k, c),
            &values(&store, &format!("g.{kind}.w")),
            &values(&store, &format!("g.{kind}.l")),
        );
        want.iter_mut().zip(part).for_each(|(w, p)| *w += p);
    }
    close(&run_intra(&store, &g, &x), &want, 1e-12);
}

/// Three bike nodes and two subway nodes; bike row 2 links to no subway
/// node, the bike graph is the identity.
fn cross_graph() -> MultiRelationalGraph {
    let raw = uniform(12, 0.1, 1.0, 60);
    hand_graph(&[(Mode::Bike, 3), (Mode::Subway, 2)], move |r, c, kind, i, j| match (r, c) {
        (Mode::Bike, Mode::Bike) => (i == j) as u8 as f64,
        (Mode::Bike, Mode::Subway) if i == 2 => 0.0,
        _ => raw[(kind as usize) * 6 + i * 2 + j],
    })
}

fn run_sim(store: &ParamStore, g: &MultiRelationalGraph, h_aux: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let h = tape.constant(h_aux.clone());
    let y = inter_similarity_conv(&mut tape, store, "s", h, g, Mode::Subway).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn similarity_conv_selects_linked_node() {
    let g = hand_graph(&[(Mode::Bike, 2), (Mode::Subway, 2)], |r, c, kind, i, j| match (r, c, kind) {
        (Mode::Bike, Mode::Subway, AdjKind::Geo) => (j == 1 - i) as u8 as f64,
        (Mode::Bike, Mode::Subway, AdjKind::Pattern) => 0.0,
        _ => (i == j) as u8 as f64,
    });
    let x = Tensor::from_vec(&[1, 2, 1, 1], vec![3.0, 5.0]).unwrap();
    close(&run_sim(&identity_store("s", 1), &g, &x), &[5.0, 3.0], 1e-15);
}

#[test]
fn similarity_conv_matches_dense_oracle() {
    let g = cross_graph();
    let (b, k, c) = (2, 2, 2);
    let store = gcn_store("s", c, 61);
    let x = Tensor::from_vec(&[b, 2, k, c], uniform(b * 2 * k * c, -1.0, 1.0, 62)).unwrap();
    let got = run_sim(&store, &g, &x);
    let mut want = vec![0.0; b * 3 * k * c];
    let mut isolated = vec![0.0; c];
    for kind in AdjKind::ALL {
        let a = matmul(&dense(&g, Mode::Bike, Mode::Bike, kind), &dense(&g, Mode::Bike, Mode::Subway, kind));
        let l = values(&store, &format!("s.{kind}.l"));
        let part = gcn_oracle(&a, x.data(), (b, 2, k, c), &values(&store, &format!("s.{kind}.w")), &l);
        want.iter_mut().zip(part).for_each(|(w, p)| *w += p);
        isolated.iter_mut().zip(&l).for_each(|(s, v)| *s += v.max(0.0));
    }
    close(&got, &want, 1e-12);
    // a bike node without auxiliary neighbours only sees the bias
    for bi in 0..b {
        for t in 0..k {
            let at = ((bi * 3 + 2) * k + t) * c;
            close(&got[at..at + c], &isolated, 1e-15);
        }
    }
}

fn run_diff(store: &ParamStore, g: &MultiRelationalGraph, h_aux: &Tensor, h_bike: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(h_aux.clone());
    let b = tape.constant(h_bike.clone());
    let y = inter_difference_conv(&mut tape, store, "d", a, b, g, Mode::Subway).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn difference_conv_zero_gap_and_symmetry() {
    let g = cross_graph();
    let (b, k, c) = (1, 2, 2);
    let store = gcn_store("d", c, 70);
    let h_aux = Tensor::from_vec(&[b, 2, k, c], uniform(b * 2 * k * c, -1.0, 1.0, 71)).unwrap();

    // bike features equal to what they gather: only the bias survives
    let mut tape = Tape::new();
    let ha = tape.constant(h_aux.clone());
    let gathered = tape.propagate(g.normalized(Mode::Bike, Mode::Subway, AdjKind::Geo), ha).unwrap();
    let gathered = tape.value(gathered).clone();
    let g_geo_only = {
        let rel = |r: Mode, c: Mode, kind: AdjKind| g.relation(r, c, kind).unwrap().raw.clone();
        let mut pat = rel(Mode::Bike, Mode::Subway, AdjKind::Geo);
        pat.kind = AdjKind::Pattern;
        MultiRelationalGraph::from_relations(
            &[Mode::Bike, Mode::Subway],
            vec![
                Relation::new(rel(Mode::Bike, Mode::Bike, AdjKind::Geo)),
                Relation::new(rel(Mode::Bike, Mode::Bike, AdjKind::Pattern)),
                Relation::new(rel(Mode::Subway, Mode::Subway, AdjKind::Geo)),
                Relation::new(rel(Mode::Subway, Mode::Subway, AdjKind::Pattern)),
                Relation::new(rel(Mode::Bike, Mode::Subway, AdjKind::Geo)),
                Relation::new(pat),
            ],
        )
        .unwrap()
    };
    let bias: Vec<f64> = (0..c)
        .map(|o| values(&store, "d.geo.l")[o].max(0.0) + values(&store, "d.pattern.l")[o].max(0.0))
        .collect();
    let got = run_diff(&store, &g_geo_only, &h_aux, &gathered);
    for row in got.chunks(c) {
        close(row, &bias, 1e-15);
    }

    // |a − b| is unchanged when both sides flip sign
    let h_bike = Tensor::from_vec(&[b, 3, k, c], uniform(b * 3 * k * c, -1.0, 1.0, 72)).unwrap();
    let neg = |t: &Tensor| t.map(|v| -v);
    close(&run_diff(&store, &g, &h_aux, &h_bike), &run_diff(&store, &g, &neg(&h_aux), &neg(&h_bike)), 1e-15);
}

#[test]
fn difference_conv_matches_dense_oracle() {
    let g = cross_graph();
    let (b, k, c) = (2, 3, 2);
    let store = gcn_store("d", c, 80);
    let h_aux = Tensor::from_vec(&[b, 2, k, c], uniform(b * 2 * k * c, -1.0, 1.0, 81)).unwrap();
    let h_bike = Tensor::from_vec(&[b, 3, k, c], uniform(b * 3 * k * c, -1.0, 1.0, 82)).unwrap();
    let mut want = vec![0.0; b * 3 * k * c];
    for kind in AdjKind::ALL {
        let cross = dense(&g, Mode::Bike, Mode::Subway, kind);
        let mut gap = vec![0.0; b * 3 * k * c];
        for bi in 0..b {
            for i in 0..3 {
                for t in 0..k {
                    for ch in 0..c {
                        let gathered: f64 = (0..2).map(|j| cross[i][j] * h_aux.data()[((bi * 2 + j) * k + t) * c + ch]).sum();
                        let at = ((bi * 3 + i) * k + t) * c + ch;
                        gap[at] = (gathered - h_bike.data()[at]).abs();
                    }
                }
            }
        }
        let part = gcn_oracle(
            &dense(&g, Mode::Bike, Mode::Bike, kind),
            &gap,
            (b, 3, k, c),
            &values(&store, &format!("d.{kind}.w")),
            &values(&store, &format!("d.{kind}.l")),
        );
        want.iter_mut().zip(part).for_each(|(w, p)| *w += p);
    }
    close(&run_diff(&store, &g, &h_aux, &h_bike), &want, 1e-12);
}

fn tiny_config(modes: &[Mode]) -> TrainConfig {
    TrainConfig {
        channels: 4,
        disc_hidden: vec![5],
        dropout: 0.0,
        ..small_config(modes)
    }
}

fn bike_preds(model: &Model, graph: &MultiRelationalGraph, inputs: &ModeMap<Tensor>) -> Tensor {
    model.predict_tensors(graph, inputs).unwrap().expect(Mode::Bike).clone()
}

#[test]
fn zeroed_inter_modal_weights_reduce_to_single_mode() {
    let s = tiny_scenario(3);
    let full_cfg = tiny_config(&Mode::ALL);
    let bike_cfg = tiny_config(&[Mode::Bike]);
    let (pf, pb) = (prepared(&s, &full_cfg), prepared(&s, &bike_cfg));
    let mut full = Model::new(full_cfg).unwrap();
    let bike = Model::new(bike_cfg).unwrap();
    let names: Vec<String> = full
        .store
        .iter()
        .map(|(_, p)| p.name.clone())
        .filter(|n| n.contains(".sim.") || n.contains(".diff."))
        .collect();
    assert!(!names.is_empty());
    for n in &names {
        let len = values(&full.store, n).len();
        set(&mut full.store, n, vec![0.0; len]);
    }
    let batch = pf.test.batch(&[0, 1, 2]);
    let only_bike = pb.test.batch(&[0, 1, 2]).inputs;
    assert_eq!(bike_preds(&full, &pf.graph, &batch.inputs), bike_preds(&bike, &pb.graph, &only_bike));
}

#[test]
fn shapes_and_zero_head() {
    let s = tiny_scenario(4);
    let cfg = tiny_config(&Mode::ALL);
    let p = prepared(&s, &cfg);
    let mut model = Model::new(cfg).unwrap();
    let batch = p.train.batch(&[0, 1, 2]);
    let mut tape = Tape::new();
    let inputs = batch.inputs.map(|_, t| tape.constant(t.clone()));
    let out = model.forward(&mut tape, &p.graph, &inputs, &ForwardOptions::default()).unwrap();
    for (m, v) in out.preds.iter() {
        assert_eq!(tape.shape(*v), &[3, p.graph.n_nodes(m).unwrap(), 2]);
    }
    assert_eq!(out.disc_probs.len(), model.config.num_blocks);
    for v in &out.disc_probs {
        assert_eq!(tape.shape(*v), &[3, 4 + 3 + 2, 3]);
    }
    for m in Mode::ALL {
        for part in ["w", "b"] {
            let name = format!("{m}.head.{part}");
            let len = values(&model.store, &name).len();
            set(&mut model.store, &name, vec![0.0; len]);
        }
    }
    let preds = model.predict_tensors(&p.graph, &batch.inputs).unwrap();
    assert!(preds.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
}

/// Gradients of the adversarial loss with respect to every parameter.
fn adversarial_grads(model: &Model, graph: &MultiRelationalGraph, inputs: &ModeMap<Tensor>, grl: bool) -> Vec<(String, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = inputs.map(|_, t| tape.constant(t.clone()));
    let opts = ForwardOptions {
        grl,
        discriminator: Some(true),
    };
    let out = model.forward(&mut tape, graph, &vars, &opts).unwrap();
    tape.backward(out.adv.unwrap()).unwrap();
    tape.param_grads()
        .into_iter()
        .map(|(id, g)| (model.store.get(id).name.clone(), g.data().to_vec()))
        .collect()
}

#[test]
fn reversal_flips_encoder_gradients_only() {
    let s = tiny_scenario(5);
    let cfg = tiny_config(&[Mode::Bike, Mode::Subway]);
    let p = prepared(&s, &cfg);
    let model = Model::new(cfg).unwrap();
    let inputs = p.train.batch(&[0, 1]).inputs;
    let on = adversarial_grads(&model, &p.graph, &inputs, true);
    let off = adversarial_grads(&model, &p.graph, &inputs, false);
    assert_eq!(on.len(), off.len());
    let mut encoder = 0;
    for ((name, a), (name2, b)) in on.iter().zip(&off) {
        assert_eq!(name, name2);
        if name.starts_with("disc.") {
            assert_eq!(a, b, "{name}");
        } else if b.iter().any(|v| *v != 0.0) {
            encoder += 1;
            let neg: Vec<f64> = b.iter().map(|v| -v).collect();
            close(a, &neg, 1e-12);
        }
    }
    assert!(encoder > 0);
}

fn permute_graph(g: &MultiRelationalGraph, perm: &[usize]) -> MultiRelationalGraph {
    // new bike index i holds old node perm[i]
    let relations = g
        .relations()
        .iter()
        .map(|r| {
            let mut a = r.raw.clone();
            for i in 0..a.n_rows {
                for j in 0..a.n_cols {
                    let oi = if r.raw.rows == Mode::Bike { perm[i] } else { i };
                    let oj = if r.raw.cols == Mode::Bike { perm[j] } else { j };
                    a.set(i, j, r.raw.get(oi, oj));
                }
            }
            Relation::new(a)
        })
        .collect();
    MultiRelationalGraph::from_relations(g.modes(), relations).unwrap()
}

fn permute_nodes(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let (b, n) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut out = Vec::with_capacity(t.len());
    for bi in 0..b {
        for &o in perm {
            let at = (bi * n + o) * inner;
            out.extend_from_slice(&t.data()[at..at + inner]);
        }
    }
    Tensor::from_vec(shape, out).unwrap()
}

#[test]
fn bike_node_permutation_commutes() {
    let s = tiny_scenario(6);
    let cfg = tiny_config(&Mode::ALL);
    let p = prepared(&s, &cfg);
    let model = Model::new(cfg).unwrap();
    let perm = [2, 0, 3, 1];
    let inputs = p.test.batch(&[0, 1]).inputs;
    let mut permuted = inputs.clone();
    permuted.insert(Mode::Bike, permute_nodes(inputs.expect(Mode::Bike), &perm));
    let base = bike_preds(&model, &p.graph, &inputs);
    let moved = bike_preds(&model, &permute_graph(&p.graph, &perm), &permuted);
    close(moved.data(), permute_nodes(&base, &perm).data(), 1e-10);
}

fn scalar_var(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
    tape.constant(Tensor::from_vec(shape, data).unwrap())
}

#[test]
fn total_loss_hand_fixture() {
    let mut tape = Tape::new();
    let mut preds = ModeMap::new();
    let mut targets = ModeMap::new();
    preds.insert(Mode::Bike, scalar_var(&mut tape, &[1, 1, 2], vec![1.0, 2.0]));
    targets.insert(Mode::Bike, scalar_var(&mut tape, &[1, 1, 2], vec![0.0, 0.0]));
    preds.insert(Mode::Subway, scalar_var(&mut tape, &[1, 1, 2], vec![1.0, 1.0]));
    targets.insert(Mode::Subway, scalar_var(&mut tape, &[1, 1, 2], vec![0.0, 0.0]));
    preds.insert(Mode::Ridehail, scalar_var(&mut tape, &[1, 1, 2], vec![0.0, 3.0]));
    targets.insert(Mode::Ridehail, scalar_var(&mut tape, &[1, 1, 2], vec![0.0, 1.0]));
    let adv = scalar_var(&mut tape, &[], vec![0.5]);
    let l = total_loss(&mut tape, &preds, &targets, Some(adv), 0.2, 5.0).unwrap().values(&tape);
    // pre 2.5, aux 1 + 2, total 2.5 + 0.6 + 2.5
    assert!((l.pre - 2.5).abs() < 1e-12);
    assert!((l.aux - 3.0).abs() < 1e-12);
    assert!((l.total - 5.6).abs() < 1e-12);

    let zero = total_loss(&mut tape, &preds, &targets, Some(adv), 0.0, 0.0).unwrap();
    assert_eq!(zero.total, zero.pre);
}
