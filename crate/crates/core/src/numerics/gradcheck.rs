//! Central finite-difference checks of tape gradients.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

fn scalar_out(tape: &Tape, out: Var) -> Result<f64> {
    let t = tape.value(out);
    if t.numel() != 1 {
        return Err(Error::usage(format!(
            "gradient check needs a scalar output, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Max over components of `|analytic − numeric| / max(1, |numeric|)` for the
/// gradient of `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point.clone().with_requires_grad(true));
        let out = f(&mut tape, v)?;
        scalar_out(&tape, out)
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, v)?;
    scalar_out(&tape, out)?;
    tape.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = tape.grad(v).unwrap_or(&zeros).to_vec();

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Same check with respect to stored parameters. `stride` thins the probed
/// entries of large tensors (1 = every entry).
pub fn grad_check_params<F>(store: &ParamStore, ids: &[ParamId], stride: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let stride = stride.max(1);
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let out = f(&mut tape, &work)?;
    scalar_out(&tape, out)?;
    tape.backward(out)?;
    tape.write_param_grads(&mut work)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            work.get(id)
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; work.get(id).numel()])
        })
        .collect();
    work.zero_grads();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference();
        let out = f(&mut tape, s)?;
        scalar_out(&tape, out)
    };
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        for i in (0..work.get(id).numel()).step_by(stride) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    Ok(worst)
}
