use super::{GradError, Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`
    pub max_rel_err: f64,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Checks the gradient of the scalar built by `build` with respect to its
/// input, evaluated at `point`.
///
/// `build` receives a fresh graph and the input variable and must return a
/// scalar node; it is re-run for every perturbed coordinate, so it must be
/// deterministic. Perturbed passes replay the base pass's [`Decisions`]
/// (masks, code indices, stop-gradient values), so the differences measure
/// the surrogate that straight-through gradients differentiate.
pub fn gradient_check<F>(build: F, point: &Tensor, eps: f64) -> Result<GradCheck, GradError>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    if !(eps > 0.0) {
        return Err(GradError::BadStep(eps));
    }
    let mut g = Graph::new();
    g.record_decisions();
    let x = g.variable(point.clone());
    let y = build(&mut g, x);
    let decisions = g.take_decisions();
    let grads = g.backward(y)?;
    let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |data: Vec<f64>| -> Result<f64, GradError> {
        let mut g = Graph::new();
        g.replay_decisions(decisions.clone());
        let x = g.variable(Tensor::from_parts(point.shape().to_vec(), data));
        let y = build(&mut g, x);
        g.check_finite()?;
        if g.value(y).len() != 1 {
            return Err(GradError::NonScalarSeed {
                shape: g.shape(y).to_vec(),
            });
        }
        Ok(g.value(y).item())
    };

    let mut numeric = vec![0.0; point.len()];
    let mut max_rel_err: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        plus[i] += eps;
        let mut minus = point.data().to_vec();
        minus[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        numeric[i] = fd;
        let a = analytic.data()[i];
        max_rel_err = max_rel_err.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(GradCheck {
        max_rel_err,
        analytic,
        numeric: Tensor::from_parts(point.shape().to_vec(), numeric),
    })
}
