//! Annotated reverse-mode computational graph.
//!
//! Variables live in an append-only arena; a [`ComputationGraph`] is a view
//! derived from a set of output variables. Every variable carries roles and
//! a brick path, which the filter engine queries and the rewrite passes
//! (dropout, weight noise, weight decay) use to transform models without
//! knowing their structure. Arena order is topological by construction.

mod backward;
mod eval;
mod rewrite;

pub use eval::{Bindings, Values};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

bitflags::bitflags! {
    /// Semantic tags a variable can carry. WEIGHT and BIAS imply PARAMETER.
    #[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
    pub struct RoleSet: u8 {
        const INPUT = 1;
        const OUTPUT = 2;
        const PARAMETER = 4;
        const WEIGHT = 8;
        const BIAS = 16;
        const AUXILIARY = 32;
        const COST = 64;
    }
}

/// Handle to a variable in a [`Graph`] arena.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct VarId(pub(crate) usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<F: Scalar> {
    Input,
    Parameter,
    Constant(Tensor<F>),
    Add,
    Sub,
    Mul,
    MatMul,
    Tanh,
    Sigmoid,
    Relu,
    Softmax,
    Log,
    Square,
    Sum,
    Mean,
    CrossEntropy,
    Mse,
    // support ops emitted by autodiff and the recurrent unroll
    Neg,
    Transpose,
    SumAxis0,
    OnesLike,
    Scale(F),
    ScaleByScalar,
    SliceAxis1(usize),
    StackAxis1,
    ScatterAxis1 { index: usize, extent: usize },
    ScaleRows,
    RowDot,
    TanhGrad,
    SigmoidGrad,
    ReluGrad,
    SoftmaxGrad,
    LogGrad,
    SquareGrad,
    MeanGrad,
    CeGradPred,
    CeGradTarget,
    MseGradPred,
}

pub(crate) fn op_name<F: Scalar>(op: &Op<F>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Parameter => "parameter",
        Op::Constant(_) => "constant",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::Mul => "mul",
        Op::MatMul => "matmul",
        Op::Tanh => "tanh",
        Op::Sigmoid => "sigmoid",
        Op::Relu => "relu",
        Op::Softmax => "softmax",
        Op::Log => "log",
        Op::Square => "square",
        Op::Sum => "sum",
        Op::Mean => "mean",
        Op::CrossEntropy => "cross_entropy",
        Op::Mse => "mse",
        Op::Neg => "neg",
        Op::Transpose => "transpose",
        Op::SumAxis0 => "sum_axis0",
        Op::OnesLike => "ones_like",
        Op::Scale(_) => "scale",
        Op::ScaleByScalar => "scale_by_scalar",
        Op::SliceAxis1(_) => "slice_axis1",
        Op::StackAxis1 => "stack_axis1",
        Op::ScatterAxis1 { .. } => "scatter_axis1",
        Op::ScaleRows => "scale_rows",
        Op::RowDot => "row_dot",
        Op::TanhGrad => "tanh_grad",
        Op::SigmoidGrad => "sigmoid_grad",
        Op::ReluGrad => "relu_grad",
        Op::SoftmaxGrad => "softmax_grad",
        Op::LogGrad => "log_grad",
        Op::SquareGrad => "square_grad",
        Op::MeanGrad => "mean_grad",
        Op::CeGradPred => "ce_grad_pred",
        Op::CeGradTarget => "ce_grad_target",
        Op::MseGradPred => "mse_grad_pred",
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node<F: Scalar> {
    pub(crate) op: Op<F>,
    pub(crate) inputs: Vec<VarId>,
    pub(crate) shape: Vec<usize>,
    pub(crate) name: String,
    pub(crate) brick_path: String,
    pub(crate) roles: RoleSet,
    /// For gradient variables, the primal they differentiate.
    pub(crate) aux_of: Option<VarId>,
}

/// Derived view over one set of outputs: reachable variables in topological
/// (= ascending id) order plus the parameter leaves among them.
#[derive(Clone, Debug)]
pub struct ComputationGraph {
    pub outputs: Vec<VarId>,
    pub topo: Vec<VarId>,
    pub parameters: Vec<VarId>,
}

impl ComputationGraph {
    pub fn contains(&self, v: VarId) -> bool {
        self.topo.binary_search(&v).is_ok()
    }
}

/// Query over a computation graph's annotations. All given criteria must
/// hold; empty criteria match everything.
#[derive(Clone, Debug, Default)]
pub struct Filter<'a> {
    /// Match variables whose role set intersects this one (empty = any).
    pub roles: RoleSet,
    /// Last segment of the brick path must equal this name.
    pub brick_name: Option<&'a str>,
    /// Brick path must start with this prefix (whole segments).
    pub ancestor_path: Option<&'a str>,
}

/// Append-only arena of annotated variables.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    parameter_keys: std::collections::HashSet<String>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            parameter_keys: std::collections::HashSet::new(),
        }
    }

    fn push(&mut self, node: Node<F>) -> VarId {
        self.nodes.push(node);
        VarId(self.nodes.len() - 1)
    }

    fn emit(&mut self, op: Op<F>, inputs: Vec<VarId>, shape: Vec<usize>) -> VarId {
        let name = format!("{}_{}", op_name(&op), self.nodes.len());
        self.push(Node {
            op,
            inputs,
            shape,
            name,
            brick_path: String::new(),
            roles: RoleSet::empty(),
            aux_of: None,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn node(&self, v: VarId) -> &Node<F> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn name(&self, v: VarId) -> &str {
        &self.nodes[v.0].name
    }

    pub fn roles(&self, v: VarId) -> RoleSet {
        self.nodes[v.0].roles
    }

    pub fn add_roles(&mut self, v: VarId, roles: RoleSet) {
        self.nodes[v.0].roles |= roles;
    }

    pub fn brick_path(&self, v: VarId) -> &str {
        &self.nodes[v.0].brick_path
    }

    /// Relabels a variable with a brick-owned name and path.
    pub fn rename(&mut self, v: VarId, name: String, brick_path: String) {
        let node = &mut self.nodes[v.0];
        node.name = name;
        node.brick_path = brick_path;
    }

    pub fn aux_of(&self, v: VarId) -> Option<VarId> {
        self.nodes[v.0].aux_of
    }

    /// True for leaves bound to storage (no producer).
    pub fn is_parameter(&self, v: VarId) -> bool {
        matches!(self.nodes[v.0].op, Op::Parameter)
    }

    pub fn is_input(&self, v: VarId) -> bool {
        matches!(self.nodes[v.0].op, Op::Input)
    }

    /// Store key of a parameter variable: `<brick_path>.<name>`.
    pub fn parameter_key(&self, v: VarId) -> String {
        let node = &self.nodes[v.0];
        format!("{}.{}", node.brick_path, node.name)
    }

    // ---- leaf builders ----

    pub fn input(&mut self, name: &str, shape: &[usize]) -> VarId {
        self.push(Node {
            op: Op::Input,
            inputs: vec![],
            shape: shape.to_vec(),
            name: name.to_string(),
            brick_path: String::new(),
            roles: RoleSet::INPUT,
            aux_of: None,
        })
    }

    /// A leaf bound to storage. WEIGHT or BIAS roles imply PARAMETER; the
    /// (brick path, name) pair must be unique in the graph.
    pub fn parameter(
        &mut self,
        name: &str,
        shape: &[usize],
        roles: RoleSet,
        brick_path: &str,
    ) -> Result<VarId> {
        let key = format!("{brick_path}.{name}");
        if !self.parameter_keys.insert(key.clone()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {key:?}"
            )));
        }
        Ok(self.push(Node {
            op: Op::Parameter,
            inputs: vec![],
            shape: shape.to_vec(),
            name: name.to_string(),
            brick_path: brick_path.to_string(),
            roles: roles | RoleSet::PARAMETER,
            aux_of: None,
        }))
    }

    pub fn constant(&mut self, value: Tensor<F>) -> VarId {
        let shape = value.shape().to_vec();
        self.emit(Op::Constant(value), vec![], shape)
    }

    pub fn scalar_constant(&mut self, value: F) -> VarId {
        self.constant(Tensor::scalar(value))
    }

    // ---- elementwise and linear algebra ----

    fn equal_shapes(&self, a: VarId, b: VarId, what: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what} on {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    /// Elementwise addition; the one permitted broadcast is a rank-1 bias
    /// over the rows of a rank-2 left operand.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let broadcast_ok = sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0];
        if sa != sb && !broadcast_ok {
            return Err(Error::ShapeMismatch(format!("add on {sa:?} and {sb:?}")));
        }
        Ok(self.emit(Op::Add, vec![a, b], sa))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let shape = self.equal_shapes(a, b, "sub")?;
        Ok(self.emit(Op::Sub, vec![a, b], shape))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let shape = self.equal_shapes(a, b, "mul")?;
        Ok(self.emit(Op::Mul, vec![a, b], shape))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!(
                "matmul on {sa:?} and {sb:?}"
            )));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.emit(Op::MatMul, vec![a, b], shape))
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let shape = self.shape(x).to_vec();
        self.emit(Op::Tanh, vec![x], shape)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let shape = self.shape(x).to_vec();
        self.emit(Op::Sigmoid, vec![x], shape)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let shape = self.shape(x).to_vec();
        self.emit(Op::Relu, vec![x], shape)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: VarId) -> Result<VarId> {
        if self.shape(x).is_empty() {
            return Err(Error::ShapeMismatch("softmax of a scalar".into()));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.emit(Op::Softmax, vec![x], shape))
    }

    pub fn log(&mut self, x: VarId) -> VarId {
        let shape = self.shape(x).to_vec();
        self.emit(Op::Log, vec![x], shape)
    }

    pub fn square(&mut self, x: VarId) -> VarId {
        let shape = self.shape(x).to_vec();
        self.emit(Op::Square, vec![x], shape)
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        self.emit(Op::Sum, vec![x], vec![])
    }

    pub fn mean(&mut self, x: VarId) -> VarId {
        self.emit(Op::Mean, vec![x], vec![])
    }

    /// `-(1/batch) Σ target ⊙ ln(pred)` over rank-2 operands.
    pub fn cross_entropy(&mut self, pred: VarId, target: VarId) -> Result<VarId> {
        let shape = self.equal_shapes(pred, target, "cross_entropy")?;
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy expects rank-2 operands, got {shape:?}"
            )));
        }
        Ok(self.emit(Op::CrossEntropy, vec![pred, target], vec![]))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: VarId, target: VarId) -> Result<VarId> {
        self.equal_shapes(pred, target, "mse")?;
        Ok(self.emit(Op::Mse, vec![pred, target], vec![]))
    }

    // ---- support ops (used by autodiff and the recurrent unroll) ----

    pub fn neg(&mut self, x: VarId) -> VarId {
        let shape = self.shape(x).to_vec();
        self.emit(Op::Neg, vec![x], shape)
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("transpose of {s:?}")));
        }
        let shape = vec![s[1], s[0]];
        Ok(self.emit(Op::Transpose, vec![x], shape))
    }

    pub fn sum_axis0(&mut self, x: VarId) -> Result<VarId> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::ShapeMismatch("sum_axis0 of a scalar".into()));
        }
        let shape = s[1..].to_vec();
        Ok(self.emit(Op::SumAxis0, vec![x], shape))
    }

    /// Ones with the runtime shape of `x`; no gradient flows through.
    pub fn ones_like(&mut self, x: VarId) -> VarId {
        let shape = self.shape(x).to_vec();
        self.emit(Op::OnesLike, vec![x], shape)
    }

    pub fn scale(&mut self, x: VarId, factor: F) -> VarId {
        let shape = self.shape(x).to_vec();
        self.emit(Op::Scale(factor), vec![x], shape)
    }

    /// Elementwise product with a rank-0 variable.
    pub fn scale_by_scalar(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        if !self.shape(s).is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "scale_by_scalar with non-scalar {:?}",
                self.shape(s)
            )));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.emit(Op::ScaleByScalar, vec![x, s], shape))
    }

    /// Selects index `t` of axis 1.
    pub fn slice_axis1(&mut self, x: VarId, t: usize) -> Result<VarId> {
        let s = self.shape(x);
        if s.len() < 2 || t >= s[1] {
            return Err(Error::ShapeMismatch(format!(
                "slice_axis1 index {t} of {s:?}"
            )));
        }
        let mut shape = s.to_vec();
        shape.remove(1);
        Ok(self.emit(Op::SliceAxis1(t), vec![x], shape))
    }

    /// Stacks equally shaped parts along a new axis 1.
    pub fn stack_axis1(&mut self, parts: &[VarId]) -> Result<VarId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero variables".into()))?;
        for &p in parts {
            self.equal_shapes(first, p, "stack_axis1")?;
        }
        let s = self.shape(first);
        if s.is_empty() {
            return Err(Error::ShapeMismatch("stack_axis1 of scalars".into()));
        }
        let mut shape = s.to_vec();
        shape.insert(1, parts.len());
        Ok(self.emit(Op::StackAxis1, parts.to_vec(), shape))
    }

    /// Inverse of [`Self::slice_axis1`]: embeds `x` as slot `index` of a new
    /// axis 1 of the given extent, zeros elsewhere.
    pub fn scatter_axis1(&mut self, x: VarId, index: usize, extent: usize) -> Result<VarId> {
        let s = self.shape(x);
        if s.is_empty() || index >= extent {
            return Err(Error::ShapeMismatch(format!(
                "scatter_axis1 slot {index} of {extent} over {s:?}"
            )));
        }
        let mut shape = s.to_vec();
        shape.insert(1, extent);
        Ok(self.emit(Op::ScatterAxis1 { index, extent }, vec![x], shape))
    }

    /// Multiplies each leading-index block of `x` by the matching entry of
    /// the rank-1 `s`.
    pub fn scale_rows(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if ss.len() != 1 || sx.is_empty() || sx[0] != ss[0] {
            return Err(Error::ShapeMismatch(format!(
                "scale_rows on {sx:?} and {ss:?}"
            )));
        }
        let shape = sx.to_vec();
        Ok(self.emit(Op::ScaleRows, vec![x, s], shape))
    }

    /// Per leading index, the sum of the elementwise product.
    pub fn row_dot(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let shape = self.equal_shapes(a, b, "row_dot")?;
        if shape.is_empty() {
            return Err(Error::ShapeMismatch("row_dot of scalars".into()));
        }
        Ok(self.emit(Op::RowDot, vec![a, b], vec![shape[0]]))
    }

    pub(crate) fn emit_grad_helper(
        &mut self,
        op: Op<F>,
        inputs: Vec<VarId>,
        shape: Vec<usize>,
    ) -> VarId {
        self.emit(op, inputs, shape)
    }

    // ---- derived views and queries ----

    /// Builds the derived view over a set of outputs.
    pub fn cg(&self, outputs: &[VarId]) -> Result<ComputationGraph> {
        for &v in outputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::InvalidArgument(format!(
                    "output id {} outside the graph",
                    v.0
                )));
            }
        }
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack: Vec<VarId> = outputs.to_vec();
        while let Some(v) = stack.pop() {
            if reachable[v.0] {
                continue;
            }
            reachable[v.0] = true;
            stack.extend_from_slice(&self.nodes[v.0].inputs);
        }
        // ids are assigned in creation order, so ascending id order is a
        // valid topological order
        let topo: Vec<VarId> = (0..self.nodes.len())
            .filter(|&i| reachable[i])
            .map(VarId)
            .collect();
        let parameters: Vec<VarId> = topo
            .iter()
            .copied()
            .filter(|&v| self.is_parameter(v))
            .collect();
        Ok(ComputationGraph {
            outputs: outputs.to_vec(),
            topo,
            parameters,
        })
    }

    /// Variables of `cg` matching all criteria of the filter, in
    /// deterministic id order.
    pub fn variable_filter(&self, cg: &ComputationGraph, filter: &Filter<'_>) -> Vec<VarId> {
        cg.topo
            .iter()
            .copied()
            .filter(|&v| {
                let node = &self.nodes[v.0];
                if !filter.roles.is_empty() && (node.roles & filter.roles).is_empty() {
                    return false;
                }
                if let Some(name) = filter.brick_name {
                    match node.brick_path.rsplit('/').next() {
                        Some(last) if !node.brick_path.is_empty() && last == name => {}
                        _ => return false,
                    }
                }
                if let Some(prefix) = filter.ancestor_path {
                    // prefix matches whole path segments
                    let path = node.brick_path.as_str();
                    let matches = path == prefix
                        || (path.starts_with(prefix)
                            && path.as_bytes().get(prefix.len()) == Some(&b'/'));
                    if !matches {
                        return false;
                    }
                }
                true
            })
            .collect()
    }
}
