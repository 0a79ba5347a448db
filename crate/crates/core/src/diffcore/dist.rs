use std::f64::consts::PI;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Diagonal Gaussian whose mean and standard deviation live on a graph.
///
/// Both fields share a shape; batched distributions are `[B, D]`.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mean: Var,
    pub std: Var,
}

impl DiagGaussian {
    pub fn new(g: &Graph, mean: Var, std: Var) -> Result<Self> {
        if g.shape(mean) != g.shape(std) {
            return Err(Error::dim(
                "diag_gaussian",
                format!("mean {:?} vs std {:?}", g.shape(mean), g.shape(std)),
            ));
        }
        Ok(Self { mean, std })
    }

    /// Reparameterized draw `mean + std * eps`.
    pub fn sample(&self, g: &mut Graph, eps: Var) -> Result<Var> {
        let scaled = g.mul(self.std, eps)?;
        g.add(self.mean, scaled)
    }

    pub fn detach(&self, g: &mut Graph) -> Self {
        Self {
            mean: g.stop_gradient(self.mean),
            std: g.stop_gradient(self.std),
        }
    }
}

fn check_std(g: &Graph, op: &'static str, std: Var) -> Result<()> {
    match g.value(std).data().iter().find(|&&s| s <= 0.0) {
        Some(s) => Err(Error::Domain {
            op,
            detail: format!("standard deviation {s} is not positive"),
        }),
        None => Ok(()),
    }
}

/// Negative log density of `x`, summed over the last axis:
/// `sum_i ln s_i + ln(2 pi)/2 + (x_i - m_i)^2 / (2 s_i^2)`.
pub fn gaussian_nll(g: &mut Graph, x: Var, dist: &DiagGaussian) -> Result<Var> {
    check_std(g, "gaussian_nll", dist.std)?;
    let diff = g.sub(x, dist.mean)?;
    let sq = g.square(diff)?;
    let var = g.square(dist.std)?;
    let var2 = g.scale(var, 2.0)?;
    let quad = g.div(sq, var2)?;
    let log_std = g.log(dist.std)?;
    let per = g.add(log_std, quad)?;
    let per = g.offset(per, 0.5 * (2.0 * PI).ln())?;
    g.sum_last(per)
}

/// `KL(q || p)` between diagonal Gaussians, summed over the last axis.
pub fn kl_diag_gaussian(g: &mut Graph, q: &DiagGaussian, p: &DiagGaussian) -> Result<Var> {
    check_std(g, "kl_diag_gaussian", q.std)?;
    check_std(g, "kl_diag_gaussian", p.std)?;
    let log_ratio = {
        let lp = g.log(p.std)?;
        let lq = g.log(q.std)?;
        g.sub(lp, lq)?
    };
    let num = {
        let vq = g.square(q.std)?;
        let d = g.sub(q.mean, p.mean)?;
        let d2 = g.square(d)?;
        g.add(vq, d2)?
    };
    let den = {
        let vp = g.square(p.std)?;
        g.scale(vp, 2.0)?
    };
    let frac = g.div(num, den)?;
    let per = g.add(log_ratio, frac)?;
    let per = g.offset(per, -0.5)?;
    g.sum_last(per)
}
