use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Dense, Gru, Mlp};
use super::params::{hard_copy, Bound, Group, ParamSet};
use crate::diffcore::{DiagGaussian, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Stochastic latent size.
    pub u_dim: usize,
    /// Deterministic recurrent state size.
    pub h_dim: usize,
    pub hidden_width: usize,
    pub hidden_depth: usize,
    /// Floor added to every learned standard deviation.
    pub min_std: f64,
    /// Feed `h` to the value networks alongside `u`.
    pub value_on_uh: bool,
    /// Fixed standard deviation of the policy prior and posterior.
    pub policy_std: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            obs_dim: 16,
            action_dim: 1,
            u_dim: 30,
            h_dim: 200,
            hidden_width: 200,
            hidden_depth: 3,
            min_std: 0.1,
            value_on_uh: false,
            policy_std: 1.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("obs_dim", self.obs_dim),
            ("action_dim", self.action_dim),
            ("u_dim", self.u_dim),
            ("h_dim", self.h_dim),
            ("hidden_width", self.hidden_width),
            ("hidden_depth", self.hidden_depth),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("net.{name} must be at least 1")));
            }
        }
        if !(self.min_std > 0.0) {
            return Err(Error::Config("net.min_std must be positive".into()));
        }
        if !(self.policy_std > 0.0) {
            return Err(Error::Config("net.policy_std must be positive".into()));
        }
        Ok(())
    }

    fn value_input(&self) -> usize {
        if self.value_on_uh {
            self.u_dim + self.h_dim
        } else {
            self.u_dim
        }
    }
}

/// Every network of the agent plus its parameters.
#[derive(Clone, Debug)]
pub struct Networks {
    pub config: NetConfig,
    pub params: ParamSet,
    embed: Dense,
    gru: Gru,
    state_prior: Mlp,
    obs: Mlp,
    reward: Mlp,
    policy_prior: Mlp,
    state_posterior: Mlp,
    policy_posterior: Mlp,
    value: Mlp,
    value_targ: Mlp,
}

impl Networks {
    /// Random initialization; the target value network starts as an exact
    /// copy of the value network.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let (w, d) = (c.hidden_width, c.hidden_depth);
        let uh = c.u_dim + c.h_dim;

        let theta = params.group_mut(Group::Theta);
        let embed = Dense::new(theta, "embed", c.u_dim + c.action_dim, w, &mut rng);
        let gru = Gru::new(theta, "gru", w, c.h_dim, &mut rng);
        let state_prior = Mlp::new(theta, "state_prior", c.h_dim, w, d, 2 * c.u_dim, &mut rng);
        let obs = Mlp::new(theta, "obs", uh, w, d, c.obs_dim, &mut rng);
        let reward = Mlp::new(theta, "reward", uh, w, d, 1, &mut rng);
        let policy_prior = Mlp::new(theta, "policy_prior", uh, w, d, c.action_dim, &mut rng);

        let phi = params.group_mut(Group::Phi);
        let state_posterior = Mlp::new(
            phi,
            "state_posterior",
            c.h_dim + c.obs_dim,
            w,
            d,
            2 * c.u_dim,
            &mut rng,
        );

        let psi = params.group_mut(Group::Psi);
        let policy_posterior = Mlp::new(psi, "policy_posterior", uh, w, d, c.action_dim, &mut rng);

        let vin = c.value_input();
        let value = Mlp::new(
            params.group_mut(Group::Omega),
            "value",
            vin,
            w,
            d,
            1,
            &mut rng,
        );
        let value_targ = Mlp::new(
            params.group_mut(Group::OmegaTarg),
            "value",
            vin,
            w,
            d,
            1,
            &mut rng,
        );
        let (targ, src) = params.pair_mut(Group::OmegaTarg, Group::Omega);
        hard_copy(targ, src)?;

        Ok(Self {
            config,
            params,
            embed,
            gru,
            state_prior,
            obs,
            reward,
            policy_prior,
            state_posterior,
            policy_posterior,
            value,
            value_targ,
        })
    }

    pub fn hidden_depth(&self) -> usize {
        self.obs.depth()
    }

    fn check_dim(g: &Graph, what: &'static str, v: Var, dim: usize) -> Result<()> {
        let s = g.shape(v);
        if s.len() != 2 || s[1] != dim {
            return Err(Error::dim(what, format!("got {s:?}, expected [B, {dim}]")));
        }
        Ok(())
    }

    fn gaussian(&self, g: &mut Graph, out: Var) -> Result<DiagGaussian> {
        let u = self.config.u_dim;
        let mean = g.slice(out, 0, u)?;
        let raw = g.slice(out, u, u)?;
        let sp = g.softplus(raw)?;
        let std = g.offset(sp, self.config.min_std)?;
        DiagGaussian::new(g, mean, std)
    }

    fn fixed_std(g: &mut Graph, mean: Var, std: f64) -> Result<DiagGaussian> {
        let s = g.constant(Tensor::full(g.shape(mean), std));
        DiagGaussian::new(g, mean, s)
    }

    fn uh(&self, g: &mut Graph, u: Var, h: Var) -> Result<Var> {
        Self::check_dim(g, "latent u", u, self.config.u_dim)?;
        Self::check_dim(g, "latent h", h, self.config.h_dim)?;
        g.concat(&[u, h])
    }

    /// `h_t = f(h_{t-1}, u_{t-1}, a_{t-1})`: dense ReLU embedding of
    /// `[u, a]` feeding a GRU cell.
    pub fn transition(
        &self,
        g: &mut Graph,
        p: &Bound,
        h_prev: Var,
        u_prev: Var,
        a_prev: Var,
    ) -> Result<Var> {
        Self::check_dim(g, "transition action", a_prev, self.config.action_dim)?;
        Self::check_dim(g, "transition u", u_prev, self.config.u_dim)?;
        let x = g.concat(&[u_prev, a_prev])?;
        let e = self.embed.forward(g, p, x)?;
        let e = g.relu(e)?;
        self.gru.step(g, p, h_prev, e)
    }

    /// `p(u_t | h_t)`.
    pub fn state_prior(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<DiagGaussian> {
        let out = self.state_prior.forward(g, p, h)?;
        self.gaussian(g, out)
    }

    /// `q(u_t | h_t, o_t)`.
    pub fn state_posterior(
        &self,
        g: &mut Graph,
        p: &Bound,
        h: Var,
        o: Var,
    ) -> Result<DiagGaussian> {
        Self::check_dim(g, "observation", o, self.config.obs_dim)?;
        let x = g.concat(&[h, o])?;
        let out = self.state_posterior.forward(g, p, x)?;
        self.gaussian(g, out)
    }

    /// `p(o_t | u_t, h_t)` with unit standard deviation.
    pub fn observation(&self, g: &mut Graph, p: &Bound, u: Var, h: Var) -> Result<DiagGaussian> {
        let x = self.uh(g, u, h)?;
        let mean = self.obs.forward(g, p, x)?;
        Self::fixed_std(g, mean, 1.0)
    }

    /// `p(r_{t-1} | u_t, h_t)` with unit standard deviation; shape `[B, 1]`.
    pub fn reward(&self, g: &mut Graph, p: &Bound, u: Var, h: Var) -> Result<DiagGaussian> {
        let x = self.uh(g, u, h)?;
        let mean = self.reward.forward(g, p, x)?;
        Self::fixed_std(g, mean, 1.0)
    }

    fn policy(&self, g: &mut Graph, p: &Bound, net: &Mlp, u: Var, h: Var) -> Result<DiagGaussian> {
        let x = self.uh(g, u, h)?;
        let raw = net.forward(g, p, x)?;
        let mean = g.tanh(raw)?;
        Self::fixed_std(g, mean, self.config.policy_std)
    }

    /// `p(a_t | u_t, h_t)`, mean squashed into `[-1, 1]`.
    pub fn policy_prior(&self, g: &mut Graph, p: &Bound, u: Var, h: Var) -> Result<DiagGaussian> {
        self.policy(g, p, &self.policy_prior, u, h)
    }

    /// `q(a_t | u_t, h_t)`, mean squashed into `[-1, 1]`.
    pub fn policy_posterior(
        &self,
        g: &mut Graph,
        p: &Bound,
        u: Var,
        h: Var,
    ) -> Result<DiagGaussian> {
        self.policy(g, p, &self.policy_posterior, u, h)
    }

    fn value_with(&self, g: &mut Graph, p: &Bound, net: &Mlp, u: Var, h: Var) -> Result<Var> {
        let x = if self.config.value_on_uh {
            self.uh(g, u, h)?
        } else {
            Self::check_dim(g, "value u", u, self.config.u_dim)?;
            u
        };
        let out = net.forward(g, p, x)?;
        let b = g.shape(out)[0];
        g.reshape(out, &[b])
    }

    /// `V(u_t)`; shape `[B]`. `h` is used only with `value_on_uh`.
    pub fn value(&self, g: &mut Graph, p: &Bound, u: Var, h: Var) -> Result<Var> {
        self.value_with(g, p, &self.value, u, h)
    }

    pub fn value_target(&self, g: &mut Graph, p: &Bound, u: Var, h: Var) -> Result<Var> {
        self.value_with(g, p, &self.value_targ, u, h)
    }
}
