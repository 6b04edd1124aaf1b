//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst `|a - n| / max(1, |a|, |n|)` over every coordinate.
    pub max_rel_error: f64,
    /// (input index, flat coordinate) where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

fn eval_scalar<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::invalid(format!("grad_check needs a scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares the reverse-mode gradient of `f` at `points` against central
/// differences with step `eps` on every coordinate of every input.
pub fn grad_check<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_scaled(f, points, eps, 1.0)
}

/// Like [`grad_check`], but compares `scale ×` the analytic gradient with the
/// numeric one (e.g. 2 for symmetric stop-gradient losses, whose tape sees
/// only half of the dependence).
pub fn grad_check_scaled<F>(f: F, points: &[Tensor], eps: f64, scale: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if points.iter().any(|p| !p.all_finite()) {
        return Err(Error::NonFinite("grad_check point".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::invalid(format!("grad_check needs a scalar, got {:?}", g.shape(out))));
    }
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite("grad_check output".into()));
    }
    let grads = g.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Tensor> = points.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let analytic = grads.tensor(&g, *var);
        for k in 0..points[input].len() {
            let x0 = points[input].data()[k];
            probe[input].data_mut()[k] = x0 + eps;
            let fp = eval_scalar(&f, &probe)?;
            probe[input].data_mut()[k] = x0 - eps;
            let fm = eval_scalar(&f, &probe)?;
            probe[input].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = scale * analytic.data()[k];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient of input {input} at {k}")));
            }
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error {
                report = GradCheck {
                    max_rel_error: rel,
                    worst: (input, k),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(|g, x| Ok(g.square(x[0])), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // stop_gradient hides the dependence, so the analytic gradient is 0
        // while the numeric one is 2x.
        let r = grad_check(
            |g, x| {
                let s = g.stop_gradient(x[0]);
                let p = g.mul(s, s)?;
                Ok(g.sum(p))
            },
            &[Tensor::scalar(3.0)],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.5);
    }

    #[test]
    fn non_finite_point_is_rejected() {
        let r = grad_check(|g, x| Ok(g.sum(x[0])), &[Tensor::vector(&[f64::NAN])], 1e-6);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
