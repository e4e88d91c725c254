//! Model-agnostic graph rewrites: dropout, weight noise, weight decay.
//!
//! Rewrites are copy-on-write: new nodes are appended from the replaced
//! variables up to the outputs, so the original computation graph keeps
//! evaluating unchanged. Masks and noise are sampled at rewrite time from a
//! per-variable child generator, which makes the rewrite independent of the
//! order the variables are listed in.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::{ComputationGraph, Graph, Node, RoleSet, VarId};

impl<F: Scalar> Graph<F> {
    fn check_members(&self, cg: &ComputationGraph, variables: &[VarId]) -> Result<()> {
        for &v in variables {
            if !cg.contains(v) {
                return Err(Error::InvalidArgument(format!(
                    "variable {:?} is not part of the computation graph",
                    self.name(v)
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds every node downstream of a replaced variable.
    fn rewrite(
        &mut self,
        cg: &ComputationGraph,
        mut remap: HashMap<VarId, VarId>,
    ) -> Result<ComputationGraph> {
        for &v in &cg.topo {
            if remap.contains_key(&v) {
                continue;
            }
            let node = self.node(v);
            if node.inputs.iter().any(|i| remap.contains_key(i)) {
                let rebuilt = Node {
                    op: node.op.clone(),
                    inputs: node
                        .inputs
                        .iter()
                        .map(|i| remap.get(i).copied().unwrap_or(*i))
                        .collect(),
                    shape: node.shape.clone(),
                    name: node.name.clone(),
                    brick_path: node.brick_path.clone(),
                    roles: node.roles,
                    aux_of: node.aux_of,
                };
                self.nodes.push(rebuilt);
                remap.insert(v, VarId(self.nodes.len() - 1));
            }
        }
        let outputs: Vec<VarId> = cg
            .outputs
            .iter()
            .map(|o| remap.get(o).copied().unwrap_or(*o))
            .collect();
        self.cg(&outputs)
    }

    /// Inverted dropout: each selected variable `v` becomes `v ⊙ mask/(1-p)`
    /// with `mask ~ Bernoulli(1-p)` drawn elementwise from a generator
    /// seeded by `(seed, v.id)`. The inference graph needs no rescaling.
    pub fn apply_dropout(
        &mut self,
        cg: &ComputationGraph,
        variables: &[VarId],
        p: f64,
        seed: u64,
    ) -> Result<ComputationGraph> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        self.check_members(cg, variables)?;
        let mut remap = HashMap::new();
        for &v in variables {
            let mut rng = Rng::child(seed, v.0 as u64);
            let keep_scale = 1.0 / (1.0 - p);
            let numel: usize = self.shape(v).iter().product();
            let mask: Vec<F> = (0..numel)
                .map(|_| {
                    if rng.uniform53() >= p {
                        F::from_f64_exact(keep_scale)
                    } else {
                        F::zero()
                    }
                })
                .collect();
            let mask = self.constant(Tensor::new(self.shape(v).to_vec(), mask)?);
            let dropped = self.mul(v, mask)?;
            let label = format!("{}_dropped", self.name(v));
            let path = self.brick_path(v).to_string();
            {
                let node = &mut self.nodes[dropped.0];
                node.name = label;
                node.brick_path = path;
                node.roles |= RoleSet::AUXILIARY;
            }
            remap.insert(v, dropped);
        }
        self.rewrite(cg, remap)
    }

    /// Additive Gaussian weight noise: each selected `v` becomes
    /// `v + sigma·ε` with `ε ~ N(0,1)` from a generator seeded by
    /// `(seed, v.id)`.
    pub fn apply_weight_noise(
        &mut self,
        cg: &ComputationGraph,
        variables: &[VarId],
        sigma: f64,
        seed: u64,
    ) -> Result<ComputationGraph> {
        if sigma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "noise deviation {sigma} is negative"
            )));
        }
        self.check_members(cg, variables)?;
        let mut remap = HashMap::new();
        for &v in variables {
            let mut rng = Rng::child(seed, v.0 as u64);
            let numel: usize = self.shape(v).iter().product();
            let noise: Vec<F> = (0..numel)
                .map(|_| F::from_f64_exact(sigma * rng.normal()))
                .collect();
            let noise = self.constant(Tensor::new(self.shape(v).to_vec(), noise)?);
            let noised = self.add(v, noise)?;
            let label = format!("{}_noised", self.name(v));
            let path = self.brick_path(v).to_string();
            {
                let node = &mut self.nodes[noised.0];
                node.name = label;
                node.brick_path = path;
                node.roles |= RoleSet::AUXILIARY;
            }
            remap.insert(v, noised);
        }
        self.rewrite(cg, remap)
    }

    /// `coefficient · Σ_v sum(square(v))`, carrying the COST role. An empty
    /// variable list produces the constant zero.
    pub fn l2_penalty(&mut self, variables: &[VarId], coefficient: F) -> Result<VarId> {
        if coefficient < F::zero() {
            return Err(Error::InvalidArgument(
                "negative weight-decay coefficient".into(),
            ));
        }
        let mut acc: Option<VarId> = None;
        for &v in variables {
            let sq = self.square(v);
            let s = self.sum(sq);
            acc = Some(match acc {
                None => s,
                Some(prev) => self.add(prev, s)?,
            });
        }
        let penalty = match acc {
            None => self.scalar_constant(F::zero()),
            Some(total) => self.scale(total, coefficient),
        };
        self.add_roles(penalty, RoleSet::COST);
        Ok(penalty)
    }
}
