use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DiffError, Result};
use crate::param::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step, in `(0, 1e-2]`.
    pub eps: f64,
    /// Check at most this many coordinates per parameter (all when `None`).
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval_scalar<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    tape.value(root)
        .item()
        .ok_or_else(|| DiffError::Contract(format!("non-scalar root {:?}", tape.shape(root))))
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(θ+ε) − f(θ−ε)) / 2ε` for every trainable
/// parameter of `store`. `f` must be deterministic; it is evaluated on
/// evaluation-mode tapes so dropout is inactive.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(opts.eps > 0.0 && opts.eps <= 1e-2) {
        return Err(DiffError::InvalidArgument {
            op: "grad_check",
            msg: format!("eps {} not in (0, 1e-2]", opts.eps),
        });
    }
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    if tape.value(root).len() != 1 {
        return Err(DiffError::Contract(format!(
            "grad_check needs a scalar root, got shape {:?}",
            tape.shape(root)
        )));
    }
    tape.backward(root)?;
    let analytic: Vec<_> = store
        .ids()
        .map(|id| {
            tape.param_grads()
                .into_iter()
                .find(|(pid, _)| *pid == id)
                .map(|(_, g)| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; store.get(id).value.len()])
        })
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).value.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.get(id).value.data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + opts.eps;
            let fp = eval_scalar(store, &mut f)?;
            store.get_mut(id).value.data_mut()[c] = orig - opts.eps;
            let fm = eval_scalar(store, &mut f)?;
            store.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[id.index()][c];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = err;
                report.worst_param = Some(store.get(id).name.clone());
                report.worst_index = c;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn squared_norm_gradient() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, w);
        let sq = tape.mul(v, v).unwrap();
        let f = tape.sum(sq);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[2.0, 4.0]);

        let report = grad_check(
            &mut store,
            |tape, store| {
                let v = tape.param(store, w);
                let sq = tape.mul(v, v)?;
                Ok(tape.sum(sq))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.coords_checked, 2);
    }

    #[test]
    fn non_scalar_root_is_a_contract_error() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[3])).unwrap();
        let err = grad_check(
            &mut store,
            |t, s| Ok(t.param(s, w)),
            &GradCheckOptions::default(),
        );
        assert!(matches!(err, Err(DiffError::Contract(_))));
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[1])).unwrap();
        let opts = GradCheckOptions {
            eps: 0.1,
            ..Default::default()
        };
        let f = |t: &mut Tape, s: &ParamStore| {
            let v = t.param(s, w);
            Ok(t.sum(v))
        };
        assert!(grad_check(&mut store, f, &opts).is_err());
    }

    #[test]
    fn relative_error_floors_denominator() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
