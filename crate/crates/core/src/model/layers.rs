//! Building blocks of the network. Every function records onto a tape and
//! reads its weights from a parameter store by name prefix.

use diffcore::{DiffError, ParamStore, Tape, Var};

use crate::graph::{AdjKind, MultiRelationalGraph};
use crate::mode::Mode;

pub type LayerResult<T> = std::result::Result<T, DiffError>;

/// Probability floor inside the cross-entropy logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn bind(tape: &mut Tape, store: &ParamStore, name: &str) -> LayerResult<Var> {
    let id = store
        .id(name)
        .ok_or_else(|| DiffError::Contract(format!("unknown parameter {name}")))?;
    Ok(tape.param(store, id))
}

fn affine_conv(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> LayerResult<Var> {
    let w = bind(tape, store, &format!("{prefix}.w"))?;
    let b = bind(tape, store, &format!("{prefix}.b"))?;
    let y = tape.causal_conv1d(x, w)?;
    tape.add(y, b)
}

/// `(W₁⋆x + b₁) ⊙ σ(W₂⋆x + b₂)` over `(B, N, K, c_in)` inputs.
pub fn gated_tcn(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> LayerResult<Var> {
    let feat = affine_conv(tape, store, &format!("{prefix}.feat"), x)?;
    let gate = affine_conv(tape, store, &format!("{prefix}.gate"), x)?;
    let gate = tape.sigmoid(gate);
    tape.mul(feat, gate)
}

/// Feed-forward ReLU layers then a softmax over modes. `feats` is
/// `(..., d)`; `layers` counts the affine maps (`w1..wL`).
pub fn discriminate(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    layers: usize,
    feats: Var,
    dropout: f64,
) -> LayerResult<Var> {
    let mut h = feats;
    for l in 1..=layers {
        let w = bind(tape, store, &format!("{prefix}.w{l}"))?;
        let b = bind(tape, store, &format!("{prefix}.b{l}"))?;
        h = tape.matmul(h, w)?;
        h = tape.add(h, b)?;
        if l < layers {
            h = tape.relu(h);
            h = tape.dropout(h, dropout, &format!("{prefix}.h{l}"))?;
        }
    }
    tape.softmax(h)
}

/// Mean cross-entropy between probability rows and one-hot labels of the
/// same shape `(..., M)`.
pub fn adversarial_loss(tape: &mut Tape, probs: Var, labels: Var) -> LayerResult<Var> {
    let shape = tape.shape(probs).to_vec();
    let rows: usize = shape[..shape.len().saturating_sub(1)].iter().product();
    let lp = tape.log(probs, LOG_FLOOR);
    let picked = tape.mul(lp, labels)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / rows.max(1) as f64))
}

fn gcn_out(tape: &mut Tape, store: &ParamStore, prefix: &str, mixed: Var) -> LayerResult<Var> {
    let w = bind(tape, store, &format!("{prefix}.w"))?;
    let l = bind(tape, store, &format!("{prefix}.l"))?;
    let y = tape.matmul(mixed, w)?;
    let y = tape.add(y, l)?;
    Ok(tape.relu(y))
}

fn sum_vars(tape: &mut Tape, parts: Vec<Var>) -> LayerResult<Var> {
    let mut it = parts.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| DiffError::Contract("nothing to sum".into()))?;
    for v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// `Σ_kind ReLU(Ã_m H W + l)` applied at every time step of
/// `h: (B, N_m, K, c)`.
pub fn intra_conv(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    h: Var,
    graph: &MultiRelationalGraph,
    mode: Mode,
) -> LayerResult<Var> {
    let mut parts = Vec::with_capacity(2);
    for kind in AdjKind::ALL {
        let mixed = tape.propagate(graph.normalized(mode, mode, kind), h)?;
        parts.push(gcn_out(tape, store, &format!("{prefix}.{kind}"), mixed)?);
    }
    sum_vars(tape, parts)
}

/// `Σ_kind ReLU(Ã_b (Ã_{b,aux} H_aux) W + l)`, yielding bike-node features.
pub fn inter_similarity_conv(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    h_aux: Var,
    graph: &MultiRelationalGraph,
    aux: Mode,
) -> LayerResult<Var> {
    let mut parts = Vec::with_capacity(2);
    for kind in AdjKind::ALL {
        let gathered = tape.propagate(graph.normalized(Mode::Bike, aux, kind), h_aux)?;
        let mixed = tape.propagate(graph.normalized(Mode::Bike, Mode::Bike, kind), gathered)?;
        parts.push(gcn_out(tape, store, &format!("{prefix}.{kind}"), mixed)?);
    }
    sum_vars(tape, parts)
}

/// `Σ_kind ReLU(Ã_b |Ã_{b,aux} H_aux − H_b| W + l)`.
pub fn inter_difference_conv(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    h_aux: Var,
    h_bike: Var,
    graph: &MultiRelationalGraph,
    aux: Mode,
) -> LayerResult<Var> {
    let mut parts = Vec::with_capacity(2);
    for kind in AdjKind::ALL {
        let gathered = tape.propagate(graph.normalized(Mode::Bike, aux, kind), h_aux)?;
        let gap = tape.sub(gathered, h_bike)?;
        let gap = tape.abs(gap);
        let mixed = tape.propagate(graph.normalized(Mode::Bike, Mode::Bike, kind), gap)?;
        parts.push(gcn_out(tape, store, &format!("{prefix}.{kind}"), mixed)?);
    }
    sum_vars(tape, parts)
}

/// Layer normalization over channels with learned gain and shift.
pub fn layer_norm_affine(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> LayerResult<Var> {
    let g = bind(tape, store, &format!("{prefix}.gamma"))?;
    let b = bind(tape, store, &format!("{prefix}.beta"))?;
    let y = tape.layer_norm(x, 1e-5)?;
    let y = tape.mul(y, g)?;
    tape.add(y, b)
}
