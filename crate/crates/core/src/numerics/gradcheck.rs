use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_value(y: &Tensor<f64>) -> Result<f64> {
    if y.numel() != 1 {
        return Err(Error::Dimension { op: "grad_check", lhs: y.shape().to_vec(), rhs: vec![1] });
    }
    let v = y.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("grad_check: function value {v} is not finite")));
    }
    Ok(v)
}

/// Central difference of `f` along coordinate `coord` of input `which`.
pub fn central_difference<F>(f: &F, inputs: &[Tensor<f64>], which: usize, coord: usize, eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let eval = |delta: f64| -> Result<f64> {
        let mut moved: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
        let mut data = inputs[which].to_vec();
        data[coord] += delta;
        moved[which] = Tensor::new(data, inputs[which].shape())?;
        no_grad(|| f(&moved)).and_then(|y| scalar_value(&y))
    };
    Ok((eval(eps)? - eval(-eps)?) / (2.0 * eps))
}

/// Max relative error between the analytic gradient of scalar `f` at `x` and
/// its central-difference estimate, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let g = |xs: &[Tensor<f64>]| f(&xs[0]);
    Ok(grad_check_many(g, std::slice::from_ref(x), eps, None)?.max_rel_error)
}

/// Multi-input variant. `stride` checks every `stride`-th coordinate of each
/// input (all coordinates when `None`).
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64, stride: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(Tensor::to_param).collect();
    let y = f(&leaves)?;
    scalar_value(&y)?;
    y.backward()?;
    let step = stride.unwrap_or(1).max(1);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for coord in (0..leaf.numel()).step_by(step) {
            let numeric = central_difference(&f, &leaves, which, coord, eps)?;
            if !analytic[coord].is_finite() {
                return Err(Error::Numeric(format!("grad_check: analytic gradient {} is not finite", analytic[coord])));
            }
            let err = rel_error(analytic[coord], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (which, coord);
            }
        }
    }
    Ok(report)
}
