use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::ParamGroup;

/// Euclidean norm over every entry of `grads`.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint norm is at most `ceiling`. Returns the
/// norm before rescaling and the factor applied.
pub fn clip_grad_norm(grads: &mut [Tensor], ceiling: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm <= ceiling {
        return (norm, 1.0);
    }
    let scale = ceiling / norm;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    (norm, scale)
}

/// Adaptive-moment optimizer over one parameter group.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(group: &ParamGroup, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = group
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, group: &mut ParamGroup, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != group.len() {
            return Err(Error::dim(
                "adam",
                "gradient count does not match the group",
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in group.tensors_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "adam",
                    format!("{:?} vs {:?}", p.shape(), g.shape()),
                ));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
