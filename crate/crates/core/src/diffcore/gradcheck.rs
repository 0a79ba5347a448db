use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x + eps) - f(x - eps)) / 2 eps`, one coordinate at a time.
///
/// `f` receives a fresh graph and one leaf per entry of `params`. Returns
/// the largest `|g_ad - g_fd| / max(1, |g_fd|)` over all coordinates.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric { op: "grad_check" });
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            probe[pi].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            if !fd.is_finite() {
                return Err(Error::Numeric { op: "grad_check" });
            }
            let err = (analytic.data()[j] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
