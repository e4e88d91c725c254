//! Forward evaluation: one deterministic topological pass, each reachable
//! node visited exactly once.
//!
//! Static shapes are checked at build time; at evaluation time the leading
//! (batch) axis of rank ≥ 2 bindings may differ from the declared extent,
//! so short final batches evaluate without rebuilding the graph.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{ComputationGraph, Graph, Op, VarId};

/// Values bound to input and parameter leaves before a forward pass.
#[derive(Default)]
pub struct Bindings<'a, F: Scalar> {
    map: BTreeMap<VarId, Cow<'a, Tensor<F>>>,
}

impl<'a, F: Scalar> Bindings<'a, F> {
    pub fn new() -> Self {
        Bindings {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, v: VarId, value: Tensor<F>) -> &mut Self {
        self.map.insert(v, Cow::Owned(value));
        self
    }

    pub fn insert_ref(&mut self, v: VarId, value: &'a Tensor<F>) -> &mut Self {
        self.map.insert(v, Cow::Borrowed(value));
        self
    }

    fn get(&self, v: VarId) -> Option<&Tensor<F>> {
        self.map.get(&v).map(|c| c.as_ref())
    }
}

/// Computed values of one forward pass, indexed by variable.
pub struct Values<F: Scalar> {
    slots: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Values<F> {
    pub fn get(&self, v: VarId) -> Result<&Tensor<F>> {
        self.slots
            .get(v.0)
            .and_then(|s| s.as_ref())
            .ok_or_else(|| Error::Unbound(format!("variable {} was not evaluated", v.0)))
    }

    /// Scalar convenience accessor.
    pub fn scalar(&self, v: VarId) -> Result<F> {
        let t = self.get(v)?;
        if t.numel() != 1 {
            return Err(Error::NotScalar(t.shape().to_vec()));
        }
        Ok(t.data()[0])
    }
}

fn binding_shape_ok(declared: &[usize], bound: &[usize]) -> bool {
    if declared == bound {
        return true;
    }
    // the leading axis is the batch axis; it may vary at run time
    declared.len() >= 2 && declared.len() == bound.len() && declared[1..] == bound[1..]
}

impl<F: Scalar> Graph<F> {
    /// Evaluates all variables of `cg`. Every INPUT and PARAMETER leaf in
    /// `cg` must be bound.
    pub fn forward(&self, cg: &ComputationGraph, bindings: &Bindings<'_, F>) -> Result<Values<F>> {
        let mut values: Vec<Option<Tensor<F>>> = vec![None; self.len()];
        for &v in &cg.topo {
            let node = self.node(v);
            let result = match &node.op {
                Op::Input | Op::Parameter => {
                    let bound = bindings.get(v).ok_or_else(|| {
                        Error::Unbound(format!("{} {:?}", super::op_name(&node.op), node.name))
                    })?;
                    if !binding_shape_ok(&node.shape, bound.shape()) {
                        return Err(Error::ShapeMismatch(format!(
                            "{:?} declared {:?}, bound {:?}",
                            node.name,
                            node.shape,
                            bound.shape()
                        )));
                    }
                    bound.clone()
                }
                Op::Constant(t) => t.clone(),
                op => {
                    let inputs: Vec<&Tensor<F>> = node
                        .inputs
                        .iter()
                        .map(|i| values[i.0].as_ref().expect("topological order"))
                        .collect();
                    eval_op(op, &inputs)?
                }
            };
            values[v.0] = Some(result);
        }
        Ok(Values { slots: values })
    }
}

fn rows_of(shape: &[usize]) -> usize {
    shape.first().copied().unwrap_or(1)
}

fn eval_op<F: Scalar>(op: &Op<F>, inputs: &[&Tensor<F>]) -> Result<Tensor<F>> {
    match op {
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                a.zip_map(b, |x, y| x + y)
            } else {
                // bias broadcast over rows
                let cols = b.numel();
                if a.rank() != 2 || a.shape()[1] != cols {
                    return Err(Error::ShapeMismatch(format!(
                        "add on {:?} and {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                let mut data = a.data().to_vec();
                for (i, value) in data.iter_mut().enumerate() {
                    *value += b.data()[i % cols];
                }
                Tensor::new(a.shape().to_vec(), data)
            }
        }
        Op::Sub => inputs[0].zip_map(inputs[1], |x, y| x - y),
        Op::Mul => inputs[0].zip_map(inputs[1], |x, y| x * y),
        Op::MatMul => inputs[0].matmul(inputs[1]),
        Op::Tanh => Ok(inputs[0].map(|v| v.tanh())),
        Op::Sigmoid => Ok(inputs[0].map(|v| F::one() / (F::one() + (-v).exp()))),
        Op::Relu => Ok(inputs[0].map(|v| if v > F::zero() { v } else { F::zero() })),
        Op::Softmax => Ok(softmax(inputs[0])),
        Op::Log => Ok(inputs[0].map(|v| v.ln())),
        Op::Square => Ok(inputs[0].map(|v| v * v)),
        Op::Sum => Ok(Tensor::scalar(
            inputs[0].data().iter().fold(F::zero(), |acc, &v| acc + v),
        )),
        Op::Mean => {
            let n = F::from_f64_exact(inputs[0].numel() as f64);
            let total = inputs[0].data().iter().fold(F::zero(), |acc, &v| acc + v);
            Ok(Tensor::scalar(total / n))
        }
        Op::CrossEntropy => {
            let (p, t) = (inputs[0], inputs[1]);
            let batch = F::from_f64_exact(rows_of(p.shape()) as f64);
            let mut total = F::zero();
            for (&pv, &tv) in p.data().iter().zip(t.data()) {
                total += tv * pv.ln();
            }
            Ok(Tensor::scalar(-total / batch))
        }
        Op::Mse => {
            let (p, t) = (inputs[0], inputs[1]);
            let n = F::from_f64_exact(p.numel() as f64);
            let mut total = F::zero();
            for (&pv, &tv) in p.data().iter().zip(t.data()) {
                let d = pv - tv;
                total += d * d;
            }
            Ok(Tensor::scalar(total / n))
        }
        Op::Neg => Ok(inputs[0].map(|v| -v)),
        Op::Transpose => inputs[0].transposed(),
        Op::SumAxis0 => {
            let x = inputs[0];
            let rows = rows_of(x.shape());
            let row = x.row_numel();
            let mut data = vec![F::zero(); row];
            for r in 0..rows {
                let row_slice = &x.data()[r * row..(r + 1) * row];
                for (slot, &v) in data.iter_mut().zip(row_slice) {
                    *slot += v;
                }
            }
            Tensor::new(x.shape()[1..].to_vec(), data)
        }
        Op::OnesLike => Ok(Tensor::filled(inputs[0].shape().to_vec(), F::one())),
        Op::Scale(c) => Ok(inputs[0].map(|v| *c * v)),
        Op::ScaleByScalar => {
            let s = inputs[1].data()[0];
            Ok(inputs[0].map(|v| v * s))
        }
        Op::SliceAxis1(t) => {
            let x = inputs[0];
            let (d0, d1) = (x.shape()[0], x.shape()[1]);
            let rest: usize = x.shape()[2..].iter().product();
            let mut data = Vec::with_capacity(d0 * rest);
            for i in 0..d0 {
                let start = (i * d1 + t) * rest;
                data.extend_from_slice(&x.data()[start..start + rest]);
            }
            let mut shape = x.shape().to_vec();
            shape.remove(1);
            Tensor::new(shape, data)
        }
        Op::StackAxis1 => {
            let d0 = inputs[0].shape()[0];
            let rest: usize = inputs[0].shape()[1..].iter().product();
            let k = inputs.len();
            let mut data = vec![F::zero(); d0 * k * rest];
            for (j, part) in inputs.iter().enumerate() {
                for i in 0..d0 {
                    let src = &part.data()[i * rest..(i + 1) * rest];
                    let dst = (i * k + j) * rest;
                    data[dst..dst + rest].copy_from_slice(src);
                }
            }
            let mut shape = inputs[0].shape().to_vec();
            shape.insert(1, k);
            Tensor::new(shape, data)
        }
        Op::ScatterAxis1 { index, extent } => {
            let x = inputs[0];
            let d0 = x.shape()[0];
            let rest: usize = x.shape()[1..].iter().product();
            let mut data = vec![F::zero(); d0 * extent * rest];
            for i in 0..d0 {
                let src = &x.data()[i * rest..(i + 1) * rest];
                let dst = (i * extent + index) * rest;
                data[dst..dst + rest].copy_from_slice(src);
            }
            let mut shape = x.shape().to_vec();
            shape.insert(1, *extent);
            Tensor::new(shape, data)
        }
        Op::ScaleRows => {
            let (x, s) = (inputs[0], inputs[1]);
            let rows = rows_of(x.shape());
            if s.numel() != rows {
                return Err(Error::ShapeMismatch(format!(
                    "scale_rows on {:?} and {:?}",
                    x.shape(),
                    s.shape()
                )));
            }
            let row = x.row_numel();
            let mut data = x.data().to_vec();
            for r in 0..rows {
                let factor = s.data()[r];
                for value in data.iter_mut().skip(r * row).take(row) {
                    *value *= factor;
                }
            }
            Tensor::new(x.shape().to_vec(), data)
        }
        Op::RowDot => {
            let (a, b) = (inputs[0], inputs[1]);
            let rows = rows_of(a.shape());
            let row = a.row_numel();
            let mut data = vec![F::zero(); rows];
            for (r, slot) in data.iter_mut().enumerate() {
                for c in 0..row {
                    *slot += a.data()[r * row + c] * b.data()[r * row + c];
                }
            }
            Tensor::new(vec![rows], data)
        }
        Op::TanhGrad => inputs[1].zip_map(inputs[0], |g, y| g * (F::one() - y * y)),
        Op::SigmoidGrad => inputs[1].zip_map(inputs[0], |g, y| g * y * (F::one() - y)),
        Op::ReluGrad => inputs[1].zip_map(inputs[0], |g, x| {
            if x > F::zero() {
                g
            } else {
                F::zero()
            }
        }),
        Op::SoftmaxGrad => {
            let (y, g) = (inputs[0], inputs[1]);
            let cols = *y.shape().last().expect("rank >= 1");
            let rows = y.numel() / cols.max(1);
            let mut data = vec![F::zero(); y.numel()];
            for r in 0..rows {
                let base = r * cols;
                let mut dot = F::zero();
                for c in 0..cols {
                    dot += g.data()[base + c] * y.data()[base + c];
                }
                for c in 0..cols {
                    data[base + c] = y.data()[base + c] * (g.data()[base + c] - dot);
                }
            }
            Tensor::new(y.shape().to_vec(), data)
        }
        Op::LogGrad => inputs[1].zip_map(inputs[0], |g, x| g / x),
        Op::SquareGrad => {
            let two = F::from_f64_exact(2.0);
            inputs[1].zip_map(inputs[0], |g, x| two * x * g)
        }
        Op::MeanGrad => {
            let x = inputs[0];
            let g = inputs[1].data()[0];
            let n = F::from_f64_exact(x.numel() as f64);
            Ok(Tensor::filled(x.shape().to_vec(), g / n))
        }
        Op::CeGradPred => {
            let (p, t, g) = (inputs[0], inputs[1], inputs[2].data()[0]);
            let batch = F::from_f64_exact(rows_of(p.shape()) as f64);
            let factor = -g / batch;
            p.zip_map(t, |pv, tv| factor * tv / pv)
        }
        Op::CeGradTarget => {
            let (p, g) = (inputs[0], inputs[2].data()[0]);
            let batch = F::from_f64_exact(rows_of(p.shape()) as f64);
            let factor = -g / batch;
            Ok(p.map(|pv| factor * pv.ln()))
        }
        Op::MseGradPred => {
            let (p, t, g) = (inputs[0], inputs[1], inputs[2].data()[0]);
            let n = F::from_f64_exact(p.numel() as f64);
            let two = F::from_f64_exact(2.0);
            p.zip_map(t, |pv, tv| two * g * (pv - tv) / n)
        }
        Op::Input | Op::Parameter | Op::Constant(_) => unreachable!("leaves handled above"),
    }
}

/// Numerically stabilized softmax over the last axis.
fn softmax<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let cols = *x.shape().last().expect("rank >= 1");
    if cols == 0 {
        return x.clone();
    }
    let rows = x.numel() / cols;
    let mut data = vec![F::zero(); x.numel()];
    for r in 0..rows {
        let base = r * cols;
        let row = &x.data()[base..base + cols];
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut total = F::zero();
        for c in 0..cols {
            let e = (row[c] - max).exp();
            data[base + c] = e;
            total += e;
        }
        for c in 0..cols {
            data[base + c] /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}
