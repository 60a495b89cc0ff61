//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so that coordinates whose true
/// gradient is (numerically) zero are judged on absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Coordinates whose step had to be shrunk past the first.
    pub refined: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn scalar_of(t: &Tensor) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar-valued function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Checks the gradient of `f` with respect to every coordinate of every input.
///
/// `f` is called once with trainable copies of `inputs` (for the analytic
/// gradient) and then twice per coordinate with perturbed constants.
pub fn grad_check_many<F>(mut f: F, inputs: &[Tensor], step: f64) -> Result<GradReport>
where
    F: FnMut(&[Tensor]) -> Result<Tensor>,
{
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.data().to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    let out = f(&params)?;
    scalar_of(&out)?;
    out.backward()?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        refined: 0,
    };
    let mut consts: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    for (k, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let base = inputs[k].data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let mut shifted = base.clone();
            shifted[i] = base[i] + step;
            consts[k] = Tensor::new(shifted.clone(), p.shape())?;
            let plus = scalar_of(&f(&consts)?)?;
            shifted[i] = base[i] - step;
            consts[k] = Tensor::new(shifted, p.shape())?;
            let minus = scalar_of(&f(&consts)?)?;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((k, i));
                report.analytic = a;
                report.numeric = numeric;
            }
            report.coordinates += 1;
        }
        consts[k] = inputs[k].detach();
    }
    Ok(report)
}

/// Like [`grad_check_many`], but robust to kinks (ReLU-like activations) that
/// fall inside the difference stencil.
///
/// For each coordinate the central difference is taken at `steps[0]`,
/// `steps[1]`, ... until two consecutive estimates `a`, `b` agree:
/// `|a − b| ≤ agree_rel · max(|a|, |b|) + noise / h`, where `noise` is the
/// roundoff level of `f` itself and `h` the finer of the two steps. The
/// estimate at the larger step is used. A stencil
/// straddling a kink gives estimates that move with the step, so it is
/// refined away. If no pair agrees the smallest step is used.
pub fn grad_check_kink_aware<F>(
    mut f: F,
    inputs: &[Tensor],
    steps: &[f64],
    agree_rel: f64,
    noise: f64,
) -> Result<GradReport>
where
    F: FnMut(&[Tensor]) -> Result<Tensor>,
{
    if steps.is_empty() || steps.iter().any(|h| !h.is_finite() || *h <= 0.0) {
        return Err(Error::config("gradient check needs positive steps"));
    }
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.data().to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    let out = f(&params)?;
    scalar_of(&out)?;
    out.backward()?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        refined: 0,
    };
    let mut consts: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    for (k, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let base = inputs[k].data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let mut central = |h: f64| -> Result<f64> {
                let mut shifted = base.clone();
                shifted[i] = base[i] + h;
                consts[k] = Tensor::new(shifted.clone(), p.shape())?;
                let plus = scalar_of(&f(&consts)?)?;
                shifted[i] = base[i] - h;
                consts[k] = Tensor::new(shifted, p.shape())?;
                let minus = scalar_of(&f(&consts)?)?;
                Ok((plus - minus) / (2.0 * h))
            };
            let mut numeric = central(steps[0])?;
            for (j, &h) in steps.iter().enumerate().skip(1) {
                let finer = central(h)?;
                if (numeric - finer).abs() <= agree_rel * numeric.abs().max(finer.abs()) + noise / h {
                    break;
                }
                numeric = finer;
                if j == 1 {
                    report.refined += 1;
                }
            }
            let err = relative_error(a, numeric);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((k, i));
                report.analytic = a;
                report.numeric = numeric;
            }
            report.coordinates += 1;
        }
        consts[k] = inputs[k].detach();
    }
    Ok(report)
}

/// Worst relative error between the reverse-mode gradient of `f` at `x` and
/// central finite differences with the given step.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), step).map(|r| r.max_rel_error)
}
