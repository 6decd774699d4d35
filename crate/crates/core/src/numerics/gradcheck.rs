use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Central-difference check of the tape gradient of a scalar function.
///
/// `f` builds the function on a fresh graph from the parameter leaf it is
/// given and returns the scalar output. Returns the largest elementwise
/// `|tape - numeric| / max(|tape|, |numeric|, RELATIVE_FLOOR)`.
pub fn grad_check<F>(f: F, theta: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::arg(format!("finite-difference step {eps} outside [1e-6, 1e-2]")));
    }
    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.constant(point.clone());
        let out = f(&mut g, p)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let p = g.param(theta.clone());
    let out = f(&mut g, p)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic = g
        .grad(p)
        .unwrap_or_else(|| Tensor::zeros(theta.shape()));

    let mut worst = 0.0f64;
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = theta.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let value = g.value(v);
    if value.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}
