use super::model::Networks;
use super::params::{Bound, Group};
use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ParamGradReport {
    /// Largest `|g_ad - g_fd| / max(1, |g_fd|)` over every checked coordinate.
    pub max_rel_err: f64,
    /// Reverse-mode gradient norm for each checked group.
    pub grad_norms: Vec<(Group, f64)>,
    pub coordinates: usize,
}

/// Central-difference check of a scalar network loss against reverse mode,
/// over every coordinate of the listed parameter groups.
///
/// `loss` must be deterministic: it is evaluated twice per coordinate on
/// perturbed copies of `nets` whose parameters are bound as constants.
pub fn param_grad_check<F>(
    nets: &Networks,
    groups: &[Group],
    eps: f64,
    loss: F,
) -> Result<ParamGradReport>
where
    F: Fn(&mut Graph, &Networks, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = nets.params.bind(&mut g, |grp| groups.contains(&grp));
    let out = loss(&mut g, nets, &bound)?;
    let grads = g.backward(out)?;

    let eval = |probe: &Networks| -> Result<f64> {
        let mut g = Graph::new();
        let b = probe.params.bind_constant(&mut g);
        let out = loss(&mut g, probe, &b)?;
        g.value(out).item()
    };

    let mut probe = nets.clone();
    let mut report = ParamGradReport {
        max_rel_err: 0.0,
        grad_norms: Vec::new(),
        coordinates: 0,
    };
    for &grp in groups {
        let mut sq = 0.0;
        for (i, &var) in bound.group_vars(grp).iter().enumerate() {
            let analytic = grads.wrt(var);
            sq += analytic.sq_norm();
            for j in 0..analytic.numel() {
                let orig = nets.params.group(grp).tensors()[i].data()[j];
                probe.params.group_mut(grp).tensors_mut()[i].data_mut()[j] = orig + eps;
                let up = eval(&probe)?;
                probe.params.group_mut(grp).tensors_mut()[i].data_mut()[j] = orig - eps;
                let down = eval(&probe)?;
                probe.params.group_mut(grp).tensors_mut()[i].data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * eps);
                if !fd.is_finite() {
                    return Err(Error::Numeric {
                        op: "param_grad_check",
                    });
                }
                let err = (analytic.data()[j] - fd).abs() / fd.abs().max(1.0);
                report.max_rel_err = report.max_rel_err.max(err);
                report.coordinates += 1;
            }
        }
        report.grad_norms.push((grp, sq.sqrt()));
    }
    Ok(report)
}
