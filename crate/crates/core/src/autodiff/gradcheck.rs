use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 0.1) {
        return Err(Error::Parameter(format!("grad_check eps must be in (0, 0.1], got {eps}")));
    }
    Ok(())
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_scalar<F>(f: &F, tape: &mut Tape<f64>, x: Var) -> Result<Var>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let y = f(tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(y)
        )));
    }
    Ok(y)
}

/// Largest relative discrepancy between the tape gradient of `f` at `x` and
/// central finite differences, `|a - n| / max(1, |n|)`.
///
/// Runs on a double-precision tape.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let shape = x.shape().to_vec();

    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(shape.clone(), base.clone(), true)?;
    let y = eval_scalar(&f, &mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; base.len()]);

    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let probe = |delta: f64| -> Result<f64> {
            let mut vals = base.clone();
            vals[i] += delta;
            let mut t = Tape::<f64>::inference();
            let xv = t.leaf(shape.clone(), vals, false)?;
            let y = eval_scalar(&f, &mut t, xv)?;
            t.scalar(y)
        };
        let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Outcome of a finite-difference check over stored parameters.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub max_error: f64,
    pub worst: Option<(String, usize)>,
    pub scalars_checked: usize,
}

/// Finite-difference check of `loss` with respect to every scalar of the
/// given parameters. `loss` must bind parameters through [`Tape::param`] so
/// the perturbed values are picked up.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    loss: F,
    eps: f64,
) -> Result<ParamCheck>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    check_eps(eps)?;
    let scalar = |tape: &mut Tape<f64>| -> Result<f64> {
        let y = loss(tape)?;
        tape.scalar(y)
    };

    let mut tape = Tape::<f64>::new();
    let y = loss(&mut tape)?;
    tape.scalar(y)?;
    tape.backward(y)?;
    let bound: std::collections::HashMap<ParamId, Var> = tape.bound_params().collect();

    let mut report = ParamCheck {
        max_error: 0.0,
        worst: None,
        scalars_checked: 0,
    };
    for &id in ids {
        let tensor = store.get(id);
        let base: Vec<f64> = tensor.data().iter().map(|&v| v as f64).collect();
        let analytic = bound
            .get(&id)
            .and_then(|&v| tape.grad(v))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; base.len()]);
        for i in 0..base.len() {
            let probe = |delta: f64| -> Result<f64> {
                let mut vals = base.clone();
                vals[i] += delta;
                let mut t = Tape::<f64>::inference();
                t.set_override(id, vals);
                scalar(&mut t)
            };
            let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric);
            if err > report.max_error || report.worst.is_none() {
                report.max_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
            report.scalars_checked += 1;
        }
    }
    Ok(report)
}
