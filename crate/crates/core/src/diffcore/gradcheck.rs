use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients to central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// (input index, element index) where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Checks the gradient of a scalar-valued graph fragment.
///
/// `build` receives fresh trainable leaves for `inputs` and must return a
/// single-element output. Every scalar of every input is perturbed by `±eps`.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = vals
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).expect("leaf gradient");
        for e in 0..inputs[ii].numel() {
            let orig = inputs[ii].data()[e];
            probe[ii].data_mut()[e] = orig + eps;
            let plus = eval(&probe)?;
            probe[ii].data_mut()[e] = orig - eps;
            let minus = eval(&probe)?;
            probe[ii].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[e];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at input {ii} element {e}"
                )));
            }
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ii, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
