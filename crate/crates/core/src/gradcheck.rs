//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used for the numeric side, so the check is
//! independent of the backward rules it validates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1, |numeric|)` over all entries.
    pub max_rel_err: Real,
    pub entries: usize,
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences with the given `step`.
pub fn check<F>(inputs: &[Tensor], step: Real, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<Real> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut max_rel_err: Real = 0.0;
    let mut entries = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .raw(*var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
            max_rel_err = max_rel_err.max(err);
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err,
        entries,
    })
}

/// Reduces `out` to a scalar via a fixed pseudo-random projection so that
/// a gradient check exercises the whole Jacobian, not just its column sums.
pub fn project<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(&out.shape(), -1.0, 1.0, &mut rng);
    let w = out.tape().constant(w);
    Ok(out.mul(w)?.sum())
}

/// Random tensor helper for checks.
pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Finite-difference check over every trainable entry of `store` (and the
/// extra `inputs`), for a scalar built by `f`. `f` must be deterministic for
/// fixed parameters, so callers run layers in eval mode or without buffer
/// updates.
pub fn check_params<F>(
    store: &mut crate::nn::ParamStore,
    inputs: &[Tensor],
    step: Real,
    mut f: F,
) -> Result<GradCheck>
where
    F: for<'t> FnMut(&'t Tape, &mut crate::nn::ParamStore, &[Var<'t>]) -> Result<Var<'t>>,
{
    store.zero_grad();
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&tape, store, &vars)?;
    let grads = tape.backward(loss)?;
    store.accumulate(&grads);
    let input_grads: Vec<Vec<Real>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.raw(*v).map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut eval = |store: &mut crate::nn::ParamStore, inputs: &[Tensor]| -> Result<Real> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, store, &vars)?.value().item())
    };

    let mut max_rel_err: Real = 0.0;
    let mut entries = 0;
    let mut record = |analytic: Real, numeric: Real| {
        max_rel_err = max_rel_err.max((analytic - numeric).abs() / numeric.abs().max(1.0));
        entries += 1;
    };

    let ids: Vec<_> = store
        .iter()
        .enumerate()
        .filter(|(_, (_, t))| t.requires_grad())
        .map(|(i, _)| i)
        .collect();
    for i in ids {
        let id = crate::nn::ParamId::from_index(i);
        let analytic = store
            .get(id)
            .grad()
            .map(<[Real]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for (j, a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + step;
            let plus = eval(store, inputs)?;
            store.get_mut(id).data_mut()[j] = orig - step;
            let minus = eval(store, inputs)?;
            store.get_mut(id).data_mut()[j] = orig;
            record(*a, (plus - minus) / (2.0 * step));
        }
    }
    let mut work = inputs.to_vec();
    for (i, analytic) in input_grads.iter().enumerate() {
        for (j, a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(store, &work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(store, &work)?;
            work[i].data_mut()[j] = orig;
            record(*a, (plus - minus) / (2.0 * step));
        }
    }
    store.zero_grad();
    Ok(GradCheck {
        max_rel_err,
        entries,
    })
}
