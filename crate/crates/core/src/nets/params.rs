use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Parameter groups, named after the variational roles they play.
///
/// `Theta` holds the generative model (transition, state prior, observation
/// and reward likelihoods, policy prior), `Phi` the state posterior, `Psi`
/// the policy posterior, `Omega` the value network and `OmegaTarg` its
/// slowly tracking copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Theta,
    Phi,
    Psi,
    Omega,
    OmegaTarg,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Theta,
        Group::Phi,
        Group::Psi,
        Group::Omega,
        Group::OmegaTarg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Theta => "theta",
            Group::Phi => "phi",
            Group::Psi => "psi",
            Group::Omega => "omega",
            Group::OmegaTarg => "omega_targ",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId {
    pub group: Group,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: Group,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamGroup {
    pub fn new(name: Group) -> Self {
        Self {
            name,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId {
            group: self.name,
            index: self.tensors.len() - 1,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&self.tensors[i])
    }

    /// Replaces the named tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self.names.iter().position(|n| n == name).ok_or_else(|| {
            Error::Contract(format!("no parameter {name} in {}", self.name.name()))
        })?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::dim(
                "set_param",
                format!(
                    "{name}: {:?} vs {:?}",
                    self.tensors[i].shape(),
                    value.shape()
                ),
            ));
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn same_layout(&self, other: &ParamGroup) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// All trainable state of the agent.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    groups: [ParamGroup; 5],
}

impl Default for ParamSet {
    fn default() -> Self {
        Self {
            groups: Group::ALL.map(ParamGroup::new),
        }
    }
}

impl ParamSet {
    pub fn group(&self, g: Group) -> &ParamGroup {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut ParamGroup {
        &mut self.groups[g.index()]
    }

    /// Mutable access to two distinct groups at once.
    pub fn pair_mut(&mut self, a: Group, b: Group) -> (&mut ParamGroup, &mut ParamGroup) {
        assert_ne!(a, b, "pair_mut needs distinct groups");
        let (ia, ib) = (a.index(), b.index());
        if ia < ib {
            let (lo, hi) = self.groups.split_at_mut(ib);
            (&mut lo[ia], &mut hi[0])
        } else {
            let (lo, hi) = self.groups.split_at_mut(ia);
            (&mut hi[0], &mut lo[ib])
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.groups[id.group.index()].tensors[id.index]
    }

    /// Puts every parameter on `g`. Groups for which `trainable` returns
    /// false become constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(Group) -> bool) -> Bound {
        let vars = Group::ALL.map(|grp| {
            let train = trainable(grp);
            self.group(grp)
                .tensors
                .iter()
                .map(|t| {
                    if train {
                        g.leaf(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect()
        });
        Bound { vars }
    }

    pub fn bind_constant(&self, g: &mut Graph) -> Bound {
        self.bind(g, |_| false)
    }
}

/// Parameters placed on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: [Vec<Var>; 5],
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.group.index()][id.index]
    }

    pub fn group_vars(&self, g: Group) -> &[Var] {
        &self.vars[g.index()]
    }

    /// A view in which the listed groups are cut off from gradient flow.
    pub fn detached(&self, g: &mut Graph, groups: &[Group]) -> Bound {
        let mut out = self.clone();
        for grp in groups {
            for v in &mut out.vars[grp.index()] {
                *v = g.stop_gradient(*v);
            }
        }
        out
    }
}

/// `targ <- rho * targ + (1 - rho) * source`, elementwise.
pub fn polyak_update(targ: &mut ParamGroup, source: &ParamGroup, rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("target rate {rho} outside [0, 1]")));
    }
    if !targ.same_layout(source) {
        return Err(Error::dim(
            "polyak_update",
            "target and source layouts differ",
        ));
    }
    for (t, s) in targ.tensors.iter_mut().zip(&source.tensors) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = rho * *tv + (1.0 - rho) * sv;
        }
    }
    Ok(())
}

/// Overwrites `targ` with `source`.
pub fn hard_copy(targ: &mut ParamGroup, source: &ParamGroup) -> Result<()> {
    if !targ.same_layout(source) {
        return Err(Error::dim("hard_copy", "target and source layouts differ"));
    }
    targ.tensors.clone_from(&source.tensors);
    Ok(())
}
