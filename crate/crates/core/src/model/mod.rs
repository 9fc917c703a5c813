//! The forecasting network: per-mode gated TCNs with a mode discriminator
//! behind gradient reversal, multi-relational graph convolutions,
//! stacked ST-blocks, per-mode prediction heads and the composite loss.

mod checkpoint;
mod config;
pub mod layers;

use diffcore::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{arch_path, ArchDescriptor, Checkpoint};
pub use config::{DiscriminatorSource, Readout, TrainConfig};
pub use layers::{
    adversarial_loss, discriminate, gated_tcn, inter_difference_conv, inter_similarity_conv, intra_conv,
};

use crate::data::CHANNELS;
use crate::error::{Error, Result};
use crate::graph::{AdjKind, MultiRelationalGraph};
use crate::mode::{Mode, ModeMap};

/// Strength of the gradient reversal; adversarial weighting lives in
/// `eps_adv`.
pub const GRL_LAMBDA: f64 = 1.0;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn spec(name: String, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name, shape, init }
}

fn dense(out: &mut Vec<ParamSpec>, prefix: &str, w: &str, b: &str, d_in: usize, d_out: usize) {
    out.push(spec(
        format!("{prefix}.{w}"),
        vec![d_in, d_out],
        Init::Glorot {
            fan_in: d_in,
            fan_out: d_out,
        },
    ));
    out.push(spec(format!("{prefix}.{b}"), vec![d_out], Init::Zeros));
}

fn tcn_specs(out: &mut Vec<ParamSpec>, prefix: &str, ks: usize, cin: usize, cout: usize) {
    for branch in ["feat", "gate"] {
        out.push(spec(
            format!("{prefix}.{branch}.w"),
            vec![ks, cin, cout],
            Init::Glorot {
                fan_in: ks * cin,
                fan_out: ks * cout,
            },
        ));
        out.push(spec(format!("{prefix}.{branch}.b"), vec![cout], Init::Zeros));
    }
}

/// Every parameter of a configuration, in registration order.
pub fn param_specs(config: &TrainConfig) -> Vec<ParamSpec> {
    let modes = config.modes();
    let c = config.channels;
    let mut out = Vec::new();
    for k in 0..config.num_blocks {
        let cin = if k == 0 { CHANNELS } else { c };
        for &m in &modes {
            let p = format!("{m}.b{k}");
            tcn_specs(&mut out, &format!("{p}.tcn1"), config.tcn_kernel, cin, c);
            for kind in AdjKind::ALL {
                dense(&mut out, &format!("{p}.intra.{kind}"), "w", "l", c, c);
            }
            if m == Mode::Bike {
                for aux in config.aux_modes() {
                    for kind in AdjKind::ALL {
                        dense(&mut out, &format!("{p}.sim.{aux}.{kind}"), "w", "l", c, c);
                        if config.use_diff_gcn {
                            dense(&mut out, &format!("{p}.diff.{aux}.{kind}"), "w", "l", c, c);
                        }
                    }
                }
            }
            tcn_specs(&mut out, &format!("{p}.tcn2"), config.tcn_kernel, c, c);
            out.push(spec(format!("{p}.ln.gamma"), vec![c], Init::Ones));
            out.push(spec(format!("{p}.ln.beta"), vec![c], Init::Zeros));
        }
        if config.has_discriminator() {
            let mut dims = vec![config.history * c];
            dims.extend(&config.disc_hidden);
            dims.push(modes.len());
            for (l, win) in dims.windows(2).enumerate() {
                dense(&mut out, &format!("disc.b{k}"), &format!("w{}", l + 1), &format!("b{}", l + 1), win[0], win[1]);
            }
        }
    }
    for &m in &modes {
        dense(&mut out, &format!("{m}.head"), "w", "b", c, CHANNELS);
    }
    out
}

/// Glorot-uniform weights, zero biases, unit layer-norm gains. Each
/// parameter draws from its own stream seeded by `seed` and its name, so
/// shared parameters agree across mode subsets.
pub fn init_params(config: &TrainConfig) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for s in param_specs(config) {
        let n: usize = s.shape.iter().product();
        let data = match s.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Glorot { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a(s.name.as_bytes()));
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
        };
        store.add(s.name, Tensor::from_vec(&s.shape, data)?)?;
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    /// Replace the gradient reversal by identity (for sign tests).
    pub grl: bool,
    /// Force the discriminator on or off; by default it runs when there are
    /// at least two modes and `eps_adv > 0`.
    pub discriminator: Option<bool>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            grl: true,
            discriminator: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(B, N_m, 2)` per mode, normalized units.
    pub preds: ModeMap<Var>,
    /// Block-averaged adversarial loss, when the discriminator ran.
    pub adv: Option<Var>,
    /// Per-block discriminator probabilities `(B, ΣN, M)`.
    pub disc_probs: Vec<Var>,
    /// Final block state per mode, `(B, N_m, K, c)`.
    pub state: ModeMap<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub pre: Var,
    pub aux: Option<Var>,
    pub adv: Option<Var>,
    pub total: Var,
}

/// Scalar loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBundle {
    pub pre: f64,
    pub aux: f64,
    pub adv: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBundle {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).data()[0]);
        LossBundle {
            pre: v(Some(self.pre)),
            aux: v(self.aux),
            adv: v(self.adv),
            total: v(Some(self.total)),
        }
    }
}

/// `L_total = L_pre + ε_aux·L_aux + ε_adv·L_adv`. Terms whose weight is
/// zero are left out, so `L_total` is then the very same node as `L_pre`.
pub fn total_loss(
    tape: &mut Tape,
    preds: &ModeMap<Var>,
    targets: &ModeMap<Var>,
    adv: Option<Var>,
    eps_aux: f64,
    eps_adv: f64,
) -> Result<LossVars> {
    let pre = tape.mse(*preds.expect(Mode::Bike), *targets.expect(Mode::Bike))?;
    let mut aux = None;
    for (m, p) in preds.iter().filter(|(m, _)| m.is_auxiliary()) {
        let t = *targets
            .get(m)
            .ok_or_else(|| Error::Config(format!("missing {m} targets")))?;
        let l = tape.mse(*p, t)?;
        aux = Some(match aux {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    let mut total = pre;
    if let (Some(a), true) = (aux, eps_aux != 0.0) {
        let s = tape.scale(a, eps_aux);
        total = tape.add(total, s)?;
    }
    if let (Some(a), true) = (adv, eps_adv != 0.0) {
        let s = tape.scale(a, eps_adv);
        total = tape.add(total, s)?;
    }
    Ok(LossVars { pre, aux, adv, total })
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let store = init_params(&config)?;
        Ok(Self { config, store })
    }

    pub fn with_params(config: TrainConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut fresh = init_params(&config)?;
        fresh.load_values_from(&store)?;
        for (id, p) in store.iter() {
            fresh.get_mut(id).trainable = p.trainable;
        }
        Ok(Self { config, store: fresh })
    }

    pub fn modes(&self) -> Vec<Mode> {
        self.config.modes()
    }

    /// Copy whose parameters are constants on a tape.
    pub fn frozen(&self) -> Self {
        let mut m = self.clone();
        m.store.iter_mut().for_each(|p| p.trainable = false);
        m
    }

    fn check_graph(&self, graph: &MultiRelationalGraph) -> Result<()> {
        if graph.modes() != self.modes().as_slice() {
            return Err(Error::Config(format!(
                "graph modes {:?} do not match model modes {:?}",
                graph.modes(),
                self.modes()
            )));
        }
        Ok(())
    }

    fn discriminator_on(&self, opts: &ForwardOptions) -> bool {
        self.config.has_discriminator() && opts.discriminator.unwrap_or(self.config.eps_adv > 0.0)
    }

    /// One ST-block. Returns the new state and, when the discriminator
    /// runs, its probabilities and loss.
    pub fn st_block(
        &self,
        tape: &mut Tape,
        graph: &MultiRelationalGraph,
        block: usize,
        state: &ModeMap<Var>,
        opts: &ForwardOptions,
    ) -> Result<(ModeMap<Var>, Option<(Var, Var)>)> {
        let cfg = &self.config;
        let store = &self.store;
        let modes = self.modes();
        let mut h1 = ModeMap::new();
        for &m in &modes {
            let p = format!("{m}.b{block}.tcn1");
            let h = gated_tcn(tape, store, &p, *state.expect(m))?;
            h1.insert(m, tape.dropout(h, cfg.dropout, &p)?);
        }

        let mut mr = ModeMap::new();
        for &m in &modes {
            let p = format!("{m}.b{block}");
            let mut z = intra_conv(tape, store, &format!("{p}.intra"), *h1.expect(m), graph, m)?;
            if m == Mode::Bike {
                for aux in cfg.aux_modes() {
                    let s = inter_similarity_conv(tape, store, &format!("{p}.sim.{aux}"), *h1.expect(aux), graph, aux)?;
                    z = tape.add(z, s)?;
                    if cfg.use_diff_gcn {
                        let d = inter_difference_conv(
                            tape,
                            store,
                            &format!("{p}.diff.{aux}"),
                            *h1.expect(aux),
                            *h1.expect(Mode::Bike),
                            graph,
                            aux,
                        )?;
                        z = tape.add(z, d)?;
                    }
                }
            }
            mr.insert(m, z);
        }

        let mut h2 = ModeMap::new();
        let mut out = ModeMap::new();
        for &m in &modes {
            let p = format!("{m}.b{block}");
            let res = tape.add(*h1.expect(m), *mr.expect(m))?;
            let h = gated_tcn(tape, store, &format!("{p}.tcn2"), res)?;
            let h = tape.dropout(h, cfg.dropout, &format!("{p}.tcn2"))?;
            h2.insert(m, h);
            out.insert(m, layers::layer_norm_affine(tape, store, &format!("{p}.ln"), h)?);
        }

        let disc = if self.discriminator_on(opts) {
            let src = match cfg.disc_source {
                DiscriminatorSource::First => &h1,
                DiscriminatorSource::Second => &h2,
            };
            let mut feats = Vec::with_capacity(modes.len());
            let mut labels = Vec::new();
            let batch = tape.shape(*src.expect(Mode::Bike))[0];
            for (mi, &m) in modes.iter().enumerate() {
                let v = *src.expect(m);
                let n = tape.shape(v)[1];
                feats.push(tape.flatten_from(v, 2)?);
                for _ in 0..n {
                    labels.extend((0..modes.len()).map(|j| if j == mi { 1.0 } else { 0.0 }));
                }
            }
            let x = tape.concat(&feats, 1)?;
            let x = if opts.grl { tape.gradient_reversal(x, GRL_LAMBDA)? } else { x };
            let layers = cfg.disc_hidden.len() + 1;
            let probs = discriminate(tape, store, &format!("disc.b{block}"), layers, x, cfg.dropout)?;
            let total_nodes = labels.len() / modes.len();
            let one_node: Vec<f64> = labels;
            let mut lab = Vec::with_capacity(batch * one_node.len());
            for _ in 0..batch {
                lab.extend_from_slice(&one_node);
            }
            let labels = tape.constant(Tensor::from_vec(&[batch, total_nodes, modes.len()], lab)?);
            let loss = adversarial_loss(tape, probs, labels)?;
            Some((probs, loss))
        } else {
            None
        };
        Ok((out, disc))
    }

    /// Last-step (or mean) readout through a per-mode affine head.
    pub fn predict(&self, tape: &mut Tape, state: &ModeMap<Var>) -> Result<ModeMap<Var>> {
        let mut preds = ModeMap::new();
        for (m, &h) in state.iter() {
            let r = match self.config.readout {
                Readout::Last => {
                    let k = tape.shape(h)[2];
                    tape.select(h, 2, k - 1)?
                }
                Readout::Mean => tape.mean_axis(h, 2)?,
            };
            let w = layers::bind(tape, &self.store, &format!("{m}.head.w"))?;
            let b = layers::bind(tape, &self.store, &format!("{m}.head.b"))?;
            let y = tape.matmul(r, w)?;
            preds.insert(m, tape.add(y, b)?);
        }
        Ok(preds)
    }

    /// Inputs are `(B, N_m, K, 2)` per included mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        graph: &MultiRelationalGraph,
        inputs: &ModeMap<Var>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        self.check_graph(graph)?;
        for m in self.modes() {
            let shape = inputs
                .get(m)
                .map(|v| tape.shape(*v).to_vec())
                .ok_or_else(|| Error::Config(format!("missing {m} input")))?;
            let want_n = graph.n_nodes(m).expect("graph holds every model mode");
            if shape.len() != 4 || shape[1] != want_n || shape[2] != self.config.history || shape[3] != CHANNELS {
                return Err(Error::Config(format!(
                    "{m} input has shape {shape:?}, expected (B, {want_n}, {}, {CHANNELS})",
                    self.config.history
                )));
            }
        }
        let mut state = inputs.clone();
        let mut disc_probs = Vec::new();
        let mut adv_terms = Vec::new();
        for k in 0..self.config.num_blocks {
            let (next, disc) = self.st_block(tape, graph, k, &state, opts)?;
            state = next;
            if let Some((p, l)) = disc {
                disc_probs.push(p);
                adv_terms.push(l);
            }
        }
        let adv = if adv_terms.is_empty() {
            None
        } else {
            let mut acc = adv_terms[0];
            for &t in &adv_terms[1..] {
                acc = tape.add(acc, t)?;
            }
            Some(tape.scale(acc, 1.0 / adv_terms.len() as f64))
        };
        let preds = self.predict(tape, &state)?;
        Ok(ForwardOutput {
            preds,
            adv,
            disc_probs,
            state,
        })
    }

    pub fn loss(&self, tape: &mut Tape, out: &ForwardOutput, targets: &ModeMap<Var>) -> Result<LossVars> {
        total_loss(tape, &out.preds, targets, out.adv, self.config.eps_aux, self.config.eps_adv)
    }

    /// Evaluation-mode predictions `(B, N_m, 2)` for raw input tensors.
    pub fn predict_tensors(&self, graph: &MultiRelationalGraph, inputs: &ModeMap<Tensor>) -> Result<ModeMap<Tensor>> {
        let mut tape = Tape::new();
        let vars = inputs.map(|_, t| tape.constant(t.clone()));
        let opts = ForwardOptions {
            discriminator: Some(false),
            ..Default::default()
        };
        let out = self.forward(&mut tape, graph, &vars, &opts)?;
        Ok(out.preds.map(|_, v| tape.value(*v).clone()))
    }
}
