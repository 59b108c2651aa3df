//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of scalar `f` at `x` and a
/// central difference with the given `step`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let errs = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)?;
    Ok(errs[0])
}

/// Like [`grad_check`] for functions of several tensors; returns the max
/// relative error for each input separately.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("grad_check step must be > 0, got {}", step)));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(strip(x))).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(strip(x))).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let mut work: Vec<Tensor> = inputs.iter().map(strip).collect();
    let mut errors = Vec::with_capacity(inputs.len());
    for (which, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..grad.len() {
            let orig = work[which].values()[j];
            work[which].values_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[which].values_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[which].values_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad[j], numeric));
        }
        errors.push(worst);
    }
    Ok(errors)
}

fn strip(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.values().to_vec())
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!("grad_check needs a scalar function, got shape {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Agreement between analytic and finite-difference gradients for one
/// parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradError {
    pub name: String,
    /// `|a - n|_2 / max(|a|_2, |n|_2, 1e-8)` over the whole tensor.
    pub relative: f64,
    /// Largest elementwise `|a - n|`.
    pub max_abs: f64,
}

/// Compares the model's analytic loss gradient with central differences,
/// parameter by parameter in canonical order.
pub fn model_grad_check(
    model: &crate::encoder::IfaModel,
    batch: &[crate::encoder::ModelInput],
    labels: &[usize],
    step: f64,
) -> Result<Vec<ParamGradError>> {
    if step <= 0.0 {
        return Err(Error::Contract(format!("grad_check step must be > 0, got {}", step)));
    }
    let (_, analytic) = model.loss_and_grads(batch, labels, None)?;
    let mut work = model.clone();
    let mut out = Vec::with_capacity(analytic.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..grad.len() {
            let orig = work.params()[i].tensor.values()[j];
            work.params_mut()[i].tensor.values_mut()[j] = orig + step;
            let plus = work.loss(batch, labels)?;
            work.params_mut()[i].tensor.values_mut()[j] = orig - step;
            let minus = work.loss(batch, labels)?;
            work.params_mut()[i].tensor.values_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = grad.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        out.push(ParamGradError {
            name: model.params()[i].name.clone(),
            relative: norm(&diff) / norm(grad).max(norm(&numeric)).max(1e-8),
            max_abs: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        });
    }
    Ok(out)
}
