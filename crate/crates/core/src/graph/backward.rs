//! Reverse-mode differentiation: gradient subgraphs are appended to the
//! same arena, so gradients evaluate in the one forward pass that also
//! evaluates the cost.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{op_name, Graph, Op, RoleSet, VarId};

impl<F: Scalar> Graph<F> {
    /// Gradients of a scalar `cost` with respect to `wrt`. The returned
    /// variables carry the AUXILIARY role and a link to their primal.
    pub fn grad(&mut self, cost: VarId, wrt: &[VarId]) -> Result<Vec<VarId>> {
        if !self.shape(cost).is_empty() {
            return Err(Error::NotScalar(self.shape(cost).to_vec()));
        }

        // reachable-from-cost set; ascending ids are topological
        let mut reachable = vec![false; self.len()];
        let mut stack = vec![cost];
        while let Some(v) = stack.pop() {
            if reachable[v.0] {
                continue;
            }
            reachable[v.0] = true;
            stack.extend_from_slice(&self.node(v).inputs);
        }

        let mut adjoints: HashMap<VarId, VarId> = HashMap::new();
        adjoints.insert(cost, self.constant(Tensor::scalar(F::one())));

        for id in (0..=cost.0).rev() {
            if !reachable[id] {
                continue;
            }
            let v = VarId(id);
            let Some(&grad_out) = adjoints.get(&v) else {
                continue; // no gradient flows into this variable
            };
            for (input, contribution) in self.input_gradients(v, grad_out)? {
                match adjoints.get(&input).copied() {
                    None => {
                        adjoints.insert(input, contribution);
                    }
                    Some(previous) => {
                        let summed = self.add(previous, contribution)?;
                        adjoints.insert(input, summed);
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = adjoints
                .get(&w)
                .copied()
                .ok_or_else(|| Error::Unreachable(self.name(w).to_string()))?;
            let label = format!("grad({})", self.name(w));
            {
                let node = &mut self.nodes[g.0];
                node.roles |= RoleSet::AUXILIARY;
                node.aux_of = Some(w);
                node.name = label;
            }
            out.push(g);
        }
        Ok(out)
    }

    /// Gradient contributions of one node to each of its inputs, given the
    /// adjoint of its output.
    fn input_gradients(&mut self, v: VarId, g: VarId) -> Result<Vec<(VarId, VarId)>> {
        let node = self.node(v);
        let op = node.op.clone();
        let inputs = node.inputs.clone();
        Ok(match op {
            Op::Input | Op::Parameter | Op::Constant(_) => vec![],
            // ones_like depends on its input only for the shape
            Op::OnesLike => vec![],
            Op::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.shape(a) == self.shape(b) {
                    vec![(a, g), (b, g)]
                } else {
                    let gb = self.sum_axis0(g)?;
                    vec![(a, g), (b, gb)]
                }
            }
            Op::Sub => {
                let gb = self.neg(g);
                vec![(inputs[0], g), (inputs[1], gb)]
            }
            Op::Mul => {
                let ga = self.mul(g, inputs[1])?;
                let gb = self.mul(g, inputs[0])?;
                vec![(inputs[0], ga), (inputs[1], gb)]
            }
            Op::MatMul => {
                let bt = self.transpose(inputs[1])?;
                let ga = self.matmul(g, bt)?;
                let at = self.transpose(inputs[0])?;
                let gb = self.matmul(at, g)?;
                vec![(inputs[0], ga), (inputs[1], gb)]
            }
            Op::Tanh => {
                let shape = self.shape(v).to_vec();
                let gx = self.emit_grad_helper(Op::TanhGrad, vec![v, g], shape);
                vec![(inputs[0], gx)]
            }
            Op::Sigmoid => {
                let shape = self.shape(v).to_vec();
                let gx = self.emit_grad_helper(Op::SigmoidGrad, vec![v, g], shape);
                vec![(inputs[0], gx)]
            }
            Op::Relu => {
                let shape = self.shape(v).to_vec();
                let gx = self.emit_grad_helper(Op::ReluGrad, vec![inputs[0], g], shape);
                vec![(inputs[0], gx)]
            }
            Op::Softmax => {
                let shape = self.shape(v).to_vec();
                let gx = self.emit_grad_helper(Op::SoftmaxGrad, vec![v, g], shape);
                vec![(inputs[0], gx)]
            }
            Op::Log => {
                let shape = self.shape(v).to_vec();
                let gx = self.emit_grad_helper(Op::LogGrad, vec![inputs[0], g], shape);
                vec![(inputs[0], gx)]
            }
            Op::Square => {
                let shape = self.shape(inputs[0]).to_vec();
                let gx = self.emit_grad_helper(Op::SquareGrad, vec![inputs[0], g], shape);
                vec![(inputs[0], gx)]
            }
            Op::Sum => {
                let ones = self.ones_like(inputs[0]);
                let gx = self.scale_by_scalar(ones, g)?;
                vec![(inputs[0], gx)]
            }
            Op::Mean => {
                let shape = self.shape(inputs[0]).to_vec();
                let gx = self.emit_grad_helper(Op::MeanGrad, vec![inputs[0], g], shape);
                vec![(inputs[0], gx)]
            }
            Op::CrossEntropy => {
                let (p, t) = (inputs[0], inputs[1]);
                let shape = self.shape(p).to_vec();
                let gp = self.emit_grad_helper(Op::CeGradPred, vec![p, t, g], shape.clone());
                let gt = self.emit_grad_helper(Op::CeGradTarget, vec![p, t, g], shape);
                vec![(p, gp), (t, gt)]
            }
            Op::Mse => {
                let (p, t) = (inputs[0], inputs[1]);
                let shape = self.shape(p).to_vec();
                let gp = self.emit_grad_helper(Op::MseGradPred, vec![p, t, g], shape);
                let gt = self.neg(gp);
                vec![(p, gp), (t, gt)]
            }
            Op::Neg => {
                let gx = self.neg(g);
                vec![(inputs[0], gx)]
            }
            Op::Transpose => {
                let gx = self.transpose(g)?;
                vec![(inputs[0], gx)]
            }
            Op::Scale(c) => {
                let gx = self.scale(g, c);
                vec![(inputs[0], gx)]
            }
            Op::ScaleByScalar => {
                let (x, s) = (inputs[0], inputs[1]);
                let gx = self.scale_by_scalar(g, s)?;
                let prod = self.mul(g, x)?;
                let gs = self.sum(prod);
                vec![(x, gx), (s, gs)]
            }
            Op::SliceAxis1(t) => {
                let extent = self.shape(inputs[0])[1];
                let gx = self.scatter_axis1(g, t, extent)?;
                vec![(inputs[0], gx)]
            }
            Op::StackAxis1 => {
                let mut out = Vec::with_capacity(inputs.len());
                for (j, &part) in inputs.iter().enumerate() {
                    let gx = self.slice_axis1(g, j)?;
                    out.push((part, gx));
                }
                out
            }
            Op::ScatterAxis1 { index, .. } => {
                let gx = self.slice_axis1(g, index)?;
                vec![(inputs[0], gx)]
            }
            Op::ScaleRows => {
                let (x, s) = (inputs[0], inputs[1]);
                let gx = self.scale_rows(g, s)?;
                let gs = self.row_dot(g, x)?;
                vec![(x, gx), (s, gs)]
            }
            Op::RowDot => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = self.scale_rows(b, g)?;
                let gb = self.scale_rows(a, g)?;
                vec![(a, ga), (b, gb)]
            }
            op @ (Op::SumAxis0
            | Op::TanhGrad
            | Op::SigmoidGrad
            | Op::ReluGrad
            | Op::SoftmaxGrad
            | Op::LogGrad
            | Op::SquareGrad
            | Op::MeanGrad
            | Op::CeGradPred
            | Op::CeGradTarget
            | Op::MseGradPred) => return Err(Error::NoGradient(op_name(&op).to_string())),
        })
    }
}
