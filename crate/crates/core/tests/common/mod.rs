//! Independent plain-f64 oracles shared by the integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;

use fenet::diffcore::Tensor;
use fenet::nets::{Group, NetConfig, Networks};

pub fn normal_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    -std.ln() - 0.5 * (2.0 * PI).ln() - (x - mean).powi(2) / (2.0 * std * std)
}

pub fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    normal_log_pdf(x, mean, std).exp()
}

/// Composite Simpson rule over `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n % 2 == 0);
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// `KL(N(mq, sq) || N(mp, sp))` by integrating `q ln(q / p)`.
pub fn kl_by_quadrature(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    simpson(
        |u| normal_pdf(u, mq, sq) * (normal_log_pdf(u, mq, sq) - normal_log_pdf(u, mp, sp)),
        mq - 14.0 * sq,
        mq + 14.0 * sq,
        20_000,
    )
}

/// Row-major `[B, n] x [n, m] + b` on plain vectors.
pub fn affine(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), rows * n);
    let mut out = vec![0.0; rows * m];
    for r in 0..rows {
        for j in 0..m {
            let mut s = b.data()[j];
            for k in 0..n {
                s += x[r * n + k] * w.data()[k * m + j];
            }
            out[r * m + j] = s;
        }
    }
    out
}

/// Forward pass of the ReLU perceptron stored under `prefix` in `group`.
pub fn mlp(nets: &Networks, group: Group, prefix: &str, x: &[f64], rows: usize) -> Vec<f64> {
    let grp = nets.params.group(group);
    let get = |name: String| grp.get(&name).unwrap_or_else(|| panic!("missing {name}"));
    let mut h = x.to_vec();
    let mut i = 0;
    while let Some(w) = grp.get(&format!("{prefix}.l{i}.w")) {
        h = affine(&h, rows, w, get(format!("{prefix}.l{i}.b")));
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        i += 1;
    }
    affine(&h, rows, get(format!("{prefix}.out.w")), get(format!("{prefix}.out.b")))
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Concatenates two row-major batches along the feature axis.
pub fn hcat(a: &[f64], da: usize, b: &[f64], db: usize, rows: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * (da + db));
    for r in 0..rows {
        out.extend_from_slice(&a[r * da..(r + 1) * da]);
        out.extend_from_slice(&b[r * db..(r + 1) * db]);
    }
    out
}

/// Gaussian head output `[mean | raw]` split into mean and floored std.
pub fn gaussian_head(out: &[f64], u_dim: usize, rows: usize, min_std: f64) -> (Vec<f64>, Vec<f64>) {
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for r in 0..rows {
        let row = &out[r * 2 * u_dim..(r + 1) * 2 * u_dim];
        mean.extend_from_slice(&row[..u_dim]);
        std.extend(row[u_dim..].iter().map(|&v| softplus(v) + min_std));
    }
    (mean, std)
}

/// Small networks for oracle checks.
pub fn small_config(obs_dim: usize, u_dim: usize, h_dim: usize) -> NetConfig {
    NetConfig {
        obs_dim,
        action_dim: 1,
        u_dim,
        h_dim,
        hidden_width: 8,
        hidden_depth: 1,
        min_std: 0.1,
        value_on_uh: false,
        policy_std: 1.0,
    }
}

/// Scalar linear-Gaussian system
/// `u_t = a u_{t-1} + b a_{t-1} + N(0, q)`, `o_t = c u_t + N(0, r)`.
#[derive(Clone, Copy, Debug)]
pub struct LinearGaussian {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub q: f64,
    pub r: f64,
}

impl LinearGaussian {
    /// Fixed point of the predicted-variance recursion.
    pub fn stationary_prior_var(&self) -> f64 {
        let mut p = self.q;
        for _ in 0..10_000 {
            let k = p * self.c / (self.c * self.c * p + self.r);
            let post = (1.0 - k * self.c) * p;
            p = self.a * self.a * post + self.q;
        }
        p
    }

    /// Kalman filter means for observations `obs` after actions `actions`
    /// (`actions[t]` precedes `obs[t]`), starting from mean 0 with the
    /// stationary predicted variance.
    pub fn filter_means(&self, obs: &[f64], actions: &[f64]) -> Vec<f64> {
        let mut m = 0.0;
        let mut p_pred = self.stationary_prior_var();
        let mut out = Vec::with_capacity(obs.len());
        for (t, (&o, &act)) in obs.iter().zip(actions).enumerate() {
            let m_pred = self.a * m + self.b * act;
            if t > 0 {
                p_pred = self.a * self.a * p_pred + self.q;
            }
            let k = p_pred * self.c / (self.c * self.c * p_pred + self.r);
            m = m_pred + k * (o - self.c * m_pred);
            p_pred *= 1.0 - k * self.c;
            out.push(m);
        }
        out
    }

    pub fn stationary_gain(&self) -> f64 {
        let p = self.stationary_prior_var();
        p * self.c / (self.c * self.c * p + self.r)
    }
}
