use rand::Rng;

use super::params::{Bound, ParamGroup, ParamId};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Glorot-uniform weight matrix.
fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-lim..lim))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches")
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng>(
        group: &mut ParamGroup,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let w = group.push(format!("{name}.w"), glorot(rng, input, output));
        let b = group.push(format!("{name}.b"), Tensor::zeros(&[output]));
        Self {
            w,
            b,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        g.add(y, p.var(self.b))
    }
}

/// `depth` ReLU layers of `width` units, then a linear read-out.
#[derive(Clone, Debug)]
pub struct Mlp {
    hidden: Vec<Dense>,
    out: Dense,
}

impl Mlp {
    pub fn new<R: Rng>(
        group: &mut ParamGroup,
        name: &str,
        input: usize,
        width: usize,
        depth: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let mut hidden = Vec::with_capacity(depth);
        let mut fan_in = input;
        for i in 0..depth {
            hidden.push(Dense::new(
                group,
                &format!("{name}.l{i}"),
                fan_in,
                width,
                rng,
            ));
            fan_in = width;
        }
        let out = Dense::new(group, &format!("{name}.out"), fan_in, output, rng);
        Self { hidden, out }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.out).input
    }

    pub fn output_dim(&self) -> usize {
        self.out.output
    }

    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let d = g.shape(x).last().copied().unwrap_or(0);
        if g.shape(x).len() != 2 || d != self.input_dim() {
            return Err(Error::dim(
                "mlp",
                format!("input {:?}, expected [B, {}]", g.shape(x), self.input_dim()),
            ));
        }
        let mut h = x;
        for layer in &self.hidden {
            let z = layer.forward(g, p, h)?;
            h = g.relu(z)?;
        }
        self.out.forward(g, p, h)
    }
}

/// Gated recurrent unit.
///
/// `z = sigmoid(x Wz + h Uz + bz)`, `r = sigmoid(x Wr + h Ur + br)`,
/// `c = tanh(x Wc + (r * h) Uc + bc)`, `h' = (1 - z) * h + z * c`.
#[derive(Clone, Debug)]
pub struct Gru {
    wz: ParamId,
    uz: ParamId,
    bz: ParamId,
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wc: ParamId,
    uc: ParamId,
    bc: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng>(
        group: &mut ParamGroup,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut gate = |gate: &str| {
            let w = group.push(format!("{name}.w{gate}"), glorot(rng, input, hidden));
            let u = group.push(format!("{name}.u{gate}"), glorot(rng, hidden, hidden));
            let b = group.push(format!("{name}.b{gate}"), Tensor::zeros(&[hidden]));
            (w, u, b)
        };
        let (wz, uz, bz) = gate("z");
        let (wr, ur, br) = gate("r");
        let (wc, uc, bc) = gate("c");
        Self {
            wz,
            uz,
            bz,
            wr,
            ur,
            br,
            wc,
            uc,
            bc,
            input,
            hidden,
        }
    }

    fn affine(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        h: Var,
        w: ParamId,
        u: ParamId,
        b: ParamId,
    ) -> Result<Var> {
        let xw = g.matmul(x, p.var(w))?;
        let hu = g.matmul(h, p.var(u))?;
        let s = g.add(xw, hu)?;
        g.add(s, p.var(b))
    }

    pub fn step(&self, g: &mut Graph, p: &Bound, h_prev: Var, x: Var) -> Result<Var> {
        let (hs, xs) = (g.shape(h_prev), g.shape(x));
        if hs.len() != 2
            || xs.len() != 2
            || hs[1] != self.hidden
            || xs[1] != self.input
            || hs[0] != xs[0]
        {
            return Err(Error::dim("gru_step", format!("h {hs:?}, x {xs:?}")));
        }
        let z = self.affine(g, p, x, h_prev, self.wz, self.uz, self.bz)?;
        let z = g.sigmoid(z)?;
        let r = self.affine(g, p, x, h_prev, self.wr, self.ur, self.br)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, h_prev)?;
        let c = self.affine(g, p, x, rh, self.wc, self.uc, self.bc)?;
        let c = g.tanh(c)?;
        // h + z * (c - h)
        let delta = g.sub(c, h_prev)?;
        let step = g.mul(z, delta)?;
        g.add(h_prev, step)
    }
}
