//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

pub const DEFAULT_FLOOR: f64 = 1e-8;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares autodiff gradients of a scalar-valued graph with central
/// differences for every element of every input.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_strided(inputs, eps, 1, DEFAULT_FLOOR, f)
}

/// Like [`grad_check`] but probes every `stride`-th element of each input.
/// `floor` bounds the error denominator; raise it for large graphs where
/// central differences carry round-off well above 1e-8.
pub fn grad_check_strided<F>(inputs: &[Tensor<f64>], eps: f64, stride: usize, floor: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(TensorError::Usage(format!("grad_check eps {eps} outside [1e-6, 1e-2]")));
    }
    let stride = stride.max(1);
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in (0..t.numel()).step_by(stride) {
            let orig = t.data()[ei];
            probe[ti].data_mut()[ei] = orig + eps;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - eps;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].data()[ei];
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((ti, ei, a, numeric));
            }
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(TensorError::Usage(format!(
            "grad_check needs a scalar output, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
