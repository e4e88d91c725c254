//! Parametrized operations with hierarchical names ("bricks").
//!
//! A brick wires config at construction, allocates parameter variables and
//! storage separately, and emits annotated graph fragments when applied.
//! Parameter variables carry the owning brick's path, so the hierarchy and
//! the graph annotations can never disagree.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, RoleSet, VarId};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Parameter storage keyed by `<brick_path>.<name>`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F: Scalar> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: String, tensor: Tensor<F>) {
        self.tensors.insert(key, tensor);
    }

    pub fn get(&self, key: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(key)
            .ok_or_else(|| Error::UnknownParameter(key.into()))
    }

    pub fn get_mut(&mut self, key: &str) -> Result<&mut Tensor<F>> {
        self.tensors
            .get_mut(key)
            .ok_or_else(|| Error::UnknownParameter(key.into()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// Initialization schemes. Draw order is fixed: parameters in brick order,
/// elements row-major, so a given seed is bit-reproducible.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    Constant { value: f64 },
    /// U(-width, width) via the 53-bit uniform construction.
    Uniform { width: f64 },
    Gaussian { std: f64 },
    /// Per output column, exactly `k` distinct rows (a Fisher-Yates prefix)
    /// get Gaussian draws; the rest stay zero.
    Sparse { k: usize, std: f64 },
    /// Sign-fixed Householder QR of a Gaussian fill; square matrices only.
    Orthogonal,
}

/// Fills a tensor according to a scheme. Sparse and orthogonal schemes
/// require a rank-2 shape.
pub fn init_tensor<F: Scalar>(shape: &[usize], scheme: InitScheme, rng: &mut Rng) -> Result<Tensor<F>> {
    let numel: usize = shape.iter().product();
    match scheme {
        InitScheme::Constant { value } => {
            Ok(Tensor::filled(shape.to_vec(), F::from_f64_exact(value)))
        }
        InitScheme::Uniform { width } => {
            let data: Vec<F> = (0..numel)
                .map(|_| F::from_f64_exact(width * (2.0 * rng.uniform53() - 1.0)))
                .collect();
            Tensor::new(shape.to_vec(), data)
        }
        InitScheme::Gaussian { std } => {
            let data: Vec<F> = (0..numel)
                .map(|_| F::from_f64_exact(std * rng.normal()))
                .collect();
            Tensor::new(shape.to_vec(), data)
        }
        InitScheme::Sparse { k, std } => {
            if shape.len() != 2 {
                return Err(Error::ShapeMismatch(format!(
                    "sparse init needs a matrix, got {shape:?}"
                )));
            }
            let (rows, cols) = (shape[0], shape[1]);
            if k > rows {
                return Err(Error::InvalidArgument(format!(
                    "sparse init wants {k} nonzeros per column, only {rows} rows"
                )));
            }
            let mut data = vec![F::zero(); numel];
            for col in 0..cols {
                let mut perm: Vec<usize> = (0..rows).collect();
                rng.shuffle(&mut perm);
                for &row in perm.iter().take(k) {
                    data[row * cols + col] = F::from_f64_exact(std * rng.normal());
                }
            }
            Tensor::new(shape.to_vec(), data)
        }
        InitScheme::Orthogonal => {
            if shape.len() != 2 || shape[0] != shape[1] {
                return Err(Error::ShapeMismatch(format!(
                    "orthogonal init needs a square matrix, got {shape:?}"
                )));
            }
            let n = shape[0];
            let data: Vec<F> = (0..n * n)
                .map(|_| F::from_f64_exact(rng.normal()))
                .collect();
            orthogonalize(n, data)
        }
    }
}

/// Householder QR, returning Q with each column multiplied by the sign of
/// the matching R diagonal entry. That sign fix makes the decomposition
/// unique, so the result is deterministic.
fn orthogonalize<F: Scalar>(n: usize, mut r: Vec<F>) -> Result<Tensor<F>> {
    let mut q = vec![F::zero(); n * n];
    for i in 0..n {
        q[i * n + i] = F::one();
    }
    let mut v = vec![F::zero(); n];
    for k in 0..n {
        let mut norm_sq = F::zero();
        for i in k..n {
            let x = r[i * n + k];
            norm_sq += x * x;
        }
        let norm = norm_sq.sqrt();
        if norm == F::zero() {
            continue;
        }
        let alpha = if r[k * n + k] >= F::zero() { -norm } else { norm };
        for i in k..n {
            v[i] = r[i * n + k];
        }
        v[k] -= alpha;
        let mut v_sq = F::zero();
        for &vi in &v[k..n] {
            v_sq += vi * vi;
        }
        if v_sq == F::zero() {
            continue;
        }
        let two = F::from_f64_exact(2.0);
        // R := H R
        for j in k..n {
            let mut dot = F::zero();
            for i in k..n {
                dot += v[i] * r[i * n + j];
            }
            let factor = two * dot / v_sq;
            for i in k..n {
                r[i * n + j] -= factor * v[i];
            }
        }
        // Q := Q H
        for i in 0..n {
            let mut dot = F::zero();
            for j in k..n {
                dot += q[i * n + j] * v[j];
            }
            let factor = two * dot / v_sq;
            for j in k..n {
                q[i * n + j] -= factor * v[j];
            }
        }
    }
    for j in 0..n {
        if r[j * n + j] < F::zero() {
            for i in 0..n {
                q[i * n + j] = -q[i * n + j];
            }
        }
    }
    Tensor::new(vec![n, n], q)
}

/// Affine map `x W + b`.
pub struct Linear<F: Scalar> {
    name: String,
    path: String,
    in_dim: usize,
    out_dim: usize,
    w: Option<VarId>,
    b: Option<VarId>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_path(format!("/{name}"), name, in_dim, out_dim)
    }

    fn with_path(path: String, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.to_string(),
            path,
            in_dim,
            out_dim,
            w: None,
            b: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn allocated(&self) -> bool {
        self.w.is_some()
    }

    /// Creates the parameter variables and zeroed storage. Idempotent.
    pub fn allocate(&mut self, g: &mut Graph<F>, store: &mut ParamStore<F>) -> Result<()> {
        if self.allocated() {
            return Ok(());
        }
        let w = g.parameter("W", &[self.in_dim, self.out_dim], RoleSet::WEIGHT, &self.path)?;
        let b = g.parameter("b", &[self.out_dim], RoleSet::BIAS, &self.path)?;
        store.insert(g.parameter_key(w), Tensor::zeros(vec![self.in_dim, self.out_dim]));
        store.insert(g.parameter_key(b), Tensor::zeros(vec![self.out_dim]));
        self.w = Some(w);
        self.b = Some(b);
        Ok(())
    }

    pub fn weight(&self) -> Result<VarId> {
        self.w.ok_or_else(|| Error::NotAllocated(self.name.clone()))
    }

    pub fn bias(&self) -> Result<VarId> {
        self.b.ok_or_else(|| Error::NotAllocated(self.name.clone()))
    }

    pub fn apply(&self, g: &mut Graph<F>, x: VarId) -> Result<VarId> {
        let w = self.weight()?;
        let b = self.bias()?;
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "linear {:?} expects [batch, {}], got {:?}",
                self.name,
                self.in_dim,
                g.shape(x)
            )));
        }
        g.add_roles(x, RoleSet::INPUT);
        let prod = g.matmul(x, w)?;
        let out = g.add(prod, b)?;
        g.add_roles(out, RoleSet::OUTPUT);
        self.annotate(g, out);
        Ok(out)
    }

    fn annotate(&self, g: &mut Graph<F>, out: VarId) {
        let label = format!("{}_out", self.name);
        let path = self.path.clone();
        g.rename(out, label, path);
    }

    /// Weights per `scheme`, biases CONSTANT(0) unless overridden.
    pub fn initialize(
        &self,
        g: &Graph<F>,
        store: &mut ParamStore<F>,
        scheme: InitScheme,
        bias_scheme: Option<InitScheme>,
        rng: &mut Rng,
    ) -> Result<()> {
        let w = self.weight()?;
        let b = self.bias()?;
        *store.get_mut(&g.parameter_key(w))? =
            init_tensor(&[self.in_dim, self.out_dim], scheme, rng)?;
        let bias_scheme = bias_scheme.unwrap_or(InitScheme::Constant { value: 0.0 });
        *store.get_mut(&g.parameter_key(b))? = init_tensor(&[self.out_dim], bias_scheme, rng)?;
        Ok(())
    }

    pub fn parameters(&self) -> Result<Vec<VarId>> {
        Ok(vec![self.weight()?, self.bias()?])
    }
}

/// Activation applied between the linear layers of an [`Mlp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
    Softmax,
}

impl Activation {
    fn apply<F: Scalar>(self, g: &mut Graph<F>, x: VarId) -> Result<VarId> {
        Ok(match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Relu => g.relu(x),
            Activation::Softmax => g.softmax(x)?,
        })
    }
}

/// Linear layers `linear_0 .. linear_{k-1}` interleaved with activations;
/// child paths are `/<name>/linear_<i>`.
pub struct Mlp<F: Scalar> {
    name: String,
    path: String,
    activations: Vec<Activation>,
    layers: Vec<Linear<F>>,
}

impl<F: Scalar> Mlp<F> {
    pub fn new(name: &str, dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::InvalidArgument(format!(
                "mlp {name:?}: {} dims need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        let path = format!("/{name}");
        let layers = (0..dims.len() - 1)
            .map(|i| {
                Linear::with_path(
                    format!("{path}/linear_{i}"),
                    &format!("linear_{i}"),
                    dims[i],
                    dims[i + 1],
                )
            })
            .collect();
        Ok(Mlp {
            name: name.to_string(),
            path,
            activations: activations.to_vec(),
            layers,
        })
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn layers(&self) -> &[Linear<F>] {
        &self.layers
    }

    pub fn allocate(&mut self, g: &mut Graph<F>, store: &mut ParamStore<F>) -> Result<()> {
        for layer in &mut self.layers {
            layer.allocate(g, store)?;
        }
        Ok(())
    }

    pub fn apply(&self, g: &mut Graph<F>, x: VarId) -> Result<VarId> {
        let mut h = x;
        for (layer, activation) in self.layers.iter().zip(&self.activations) {
            h = layer.apply(g, h)?;
            h = activation.apply(g, h)?;
        }
        Ok(h)
    }

    pub fn initialize(
        &self,
        g: &Graph<F>,
        store: &mut ParamStore<F>,
        scheme: InitScheme,
        bias_scheme: Option<InitScheme>,
        rng: &mut Rng,
    ) -> Result<()> {
        for layer in &self.layers {
            layer.initialize(g, store, scheme, bias_scheme, rng)?;
        }
        Ok(())
    }

    pub fn parameters(&self) -> Result<Vec<VarId>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.parameters()?);
        }
        Ok(out)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Masked vanilla recurrence over `[batch, time, dim]` sequences:
/// `h_t = m_t ⊙ tanh(x_t W_in + h_{t-1} W_rec + b) + (1 - m_t) ⊙ h_{t-1}`.
pub struct SimpleRecurrent<F: Scalar> {
    name: String,
    path: String,
    dim: usize,
    w_in: Option<VarId>,
    w_rec: Option<VarId>,
    b: Option<VarId>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> SimpleRecurrent<F> {
    pub fn new(name: &str, dim: usize) -> Self {
        SimpleRecurrent {
            name: name.to_string(),
            path: format!("/{name}"),
            dim,
            w_in: None,
            w_rec: None,
            b: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn allocate(&mut self, g: &mut Graph<F>, store: &mut ParamStore<F>) -> Result<()> {
        if self.w_in.is_some() {
            return Ok(());
        }
        let d = self.dim;
        let w_in = g.parameter("W_in", &[d, d], RoleSet::WEIGHT, &self.path)?;
        let w_rec = g.parameter("W_rec", &[d, d], RoleSet::WEIGHT, &self.path)?;
        let b = g.parameter("b", &[d], RoleSet::BIAS, &self.path)?;
        store.insert(g.parameter_key(w_in), Tensor::zeros(vec![d, d]));
        store.insert(g.parameter_key(w_rec), Tensor::zeros(vec![d, d]));
        store.insert(g.parameter_key(b), Tensor::zeros(vec![d]));
        self.w_in = Some(w_in);
        self.w_rec = Some(w_rec);
        self.b = Some(b);
        Ok(())
    }

    fn params(&self) -> Result<(VarId, VarId, VarId)> {
        match (self.w_in, self.w_rec, self.b) {
            (Some(w_in), Some(w_rec), Some(b)) => Ok((w_in, w_rec, b)),
            _ => Err(Error::NotAllocated(self.name.clone())),
        }
    }

    /// Unrolls over the (static) time extent of `x` and returns the full
    /// state sequence `[batch, time, dim]`. `h_0 = 0`.
    pub fn apply(&self, g: &mut Graph<F>, x: VarId, mask: VarId) -> Result<VarId> {
        let (w_in, w_rec, b) = self.params()?;
        let xs = g.shape(x).to_vec();
        let ms = g.shape(mask).to_vec();
        if xs.len() != 3 || xs[2] != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "recurrent {:?} expects [batch, time, {}], got {xs:?}",
                self.name, self.dim
            )));
        }
        if ms != vec![xs[0], xs[1]] {
            return Err(Error::ShapeMismatch(format!(
                "mask {ms:?} does not match sequence {xs:?}"
            )));
        }
        let (batch, time) = (xs[0], xs[1]);
        let mut h = g.constant(Tensor::zeros(vec![batch, self.dim]));
        let mut states = Vec::with_capacity(time);
        for step in 0..time {
            let x_t = g.slice_axis1(x, step)?;
            let m_t = g.slice_axis1(mask, step)?;
            let from_input = g.matmul(x_t, w_in)?;
            let from_state = g.matmul(h, w_rec)?;
            let pre = g.add(from_input, from_state)?;
            let pre = g.add(pre, b)?;
            let candidate = g.tanh(pre);
            let kept = g.scale_rows(candidate, m_t)?;
            let ones = g.ones_like(m_t);
            let inv = g.sub(ones, m_t)?;
            let carried = g.scale_rows(h, inv)?;
            h = g.add(kept, carried)?;
            states.push(h);
        }
        let out = g.stack_axis1(&states)?;
        g.add_roles(out, RoleSet::OUTPUT);
        Ok(out)
    }

    pub fn initialize(
        &self,
        g: &Graph<F>,
        store: &mut ParamStore<F>,
        input_scheme: InitScheme,
        recurrent_scheme: InitScheme,
        rng: &mut Rng,
    ) -> Result<()> {
        let (w_in, w_rec, b) = self.params()?;
        let d = self.dim;
        *store.get_mut(&g.parameter_key(w_in))? = init_tensor(&[d, d], input_scheme, rng)?;
        *store.get_mut(&g.parameter_key(w_rec))? = init_tensor(&[d, d], recurrent_scheme, rng)?;
        *store.get_mut(&g.parameter_key(b))? =
            init_tensor(&[d], InitScheme::Constant { value: 0.0 }, rng)?;
        Ok(())
    }

    pub fn parameters(&self) -> Result<Vec<VarId>> {
        let (w_in, w_rec, b) = self.params()?;
        Ok(vec![w_in, w_rec, b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Bindings, Filter};

    type G = Graph<f64>;

    #[test]
    fn linear_identity_forward() {
        let mut g = G::new();
        let mut store = ParamStore::new();
        let mut lin = Linear::<f64>::new("lin", 2, 2);

        // apply before allocation is an error
        let x = g.input("x", &[1, 2]);
        assert!(matches!(lin.apply(&mut g, x), Err(Error::NotAllocated(_))));

        lin.allocate(&mut g, &mut store).unwrap();
        lin.allocate(&mut g, &mut store).unwrap(); // idempotent
        let y = lin.apply(&mut g, x).unwrap();

        // W = identity, b = 0
        *store.get_mut("/lin.W").unwrap() =
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cg = g.cg(&[y]).unwrap();
        let mut b = Bindings::new();
        b.insert(x, Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        b.insert_ref(lin.weight().unwrap(), store.get("/lin.W").unwrap());
        b.insert_ref(lin.bias().unwrap(), store.get("/lin.b").unwrap());
        let out = g.forward(&cg, &b).unwrap();
        assert_eq!(out.get(y).unwrap().data(), &[1.0, 2.0]);

        // the weight is reachable through the filter by brick name
        let found = g.variable_filter(
            &cg,
            &Filter {
                roles: RoleSet::WEIGHT,
                brick_name: Some("lin"),
                ..Filter::default()
            },
        );
        assert_eq!(found, vec![lin.weight().unwrap()]);
    }

    #[test]
    fn mlp_structure_and_parameter_count() {
        let mut g = G::new();
        let mut store = ParamStore::new();
        let mut mlp = Mlp::<f64>::new(
            "mlp",
            &[2, 3, 1],
            &[Activation::Tanh, Activation::Identity],
        )
        .unwrap();
        mlp.allocate(&mut g, &mut store).unwrap();

        assert_eq!(store.len(), 4);
        assert_eq!(store.get("/mlp/linear_0.W").unwrap().shape(), &[2, 3]);
        assert_eq!(store.get("/mlp/linear_1.W").unwrap().shape(), &[3, 1]);
        // parameter count: Σ d_i d_{i+1} + d_{i+1}
        let count: usize = store.iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(count, 2 * 3 + 3 + 3 + 1);

        let x = g.input("x", &[4, 2]);
        let y = mlp.apply(&mut g, x).unwrap();
        let cg = g.cg(&[y]).unwrap();
        let under_root = g.variable_filter(
            &cg,
            &Filter {
                roles: RoleSet::WEIGHT,
                ancestor_path: Some("/mlp"),
                ..Filter::default()
            },
        );
        assert_eq!(under_root.len(), 2);
        let under_child = g.variable_filter(
            &cg,
            &Filter {
                roles: RoleSet::WEIGHT,
                ancestor_path: Some("/mlp/linear_1"),
                ..Filter::default()
            },
        );
        assert_eq!(under_child.len(), 1);

        assert!(Mlp::<f64>::new("m", &[2, 3], &[]).is_err());
    }

    #[test]
    fn identity_mlp_passes_input_through() {
        let mut g = G::new();
        let mut store = ParamStore::new();
        let mut mlp = Mlp::<f64>::new("pass", &[2, 2], &[Activation::Identity]).unwrap();
        mlp.allocate(&mut g, &mut store).unwrap();
        *store.get_mut("/pass/linear_0.W").unwrap() =
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();

        let x = g.input("x", &[3, 2]);
        let y = mlp.apply(&mut g, x).unwrap();
        let cg = g.cg(&[y]).unwrap();
        let input = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 3.5, -0.25, 0.0]).unwrap();
        let mut b = Bindings::new();
        b.insert(x, input.clone());
        for v in mlp.parameters().unwrap() {
            b.insert(v, store.get(&g.parameter_key(v)).unwrap().clone());
        }
        let out = g.forward(&cg, &b).unwrap();
        assert_eq!(out.get(y).unwrap().data(), input.data());
    }

    #[test]
    fn initialization_schemes() {
        let mut rng = Rng::seed(12);
        let constant: Tensor<f64> =
            init_tensor(&[2, 2], InitScheme::Constant { value: 0.5 }, &mut rng).unwrap();
        assert_eq!(constant.data(), &[0.5; 4]);

        let mut rng = Rng::seed(12);
        let uniform: Tensor<f64> =
            init_tensor(&[50, 40], InitScheme::Uniform { width: 0.3 }, &mut rng).unwrap();
        assert!(uniform.data().iter().all(|v| v.abs() < 0.3));

        // sample std of a big gaussian fill is close to the target
        let mut rng = Rng::seed(12);
        let gaussian: Tensor<f64> =
            init_tensor(&[100, 100], InitScheme::Gaussian { std: 0.01 }, &mut rng).unwrap();
        let mean: f64 = gaussian.data().iter().sum::<f64>() / 1e4;
        let std = (gaussian
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / 1e4)
            .sqrt();
        assert!((0.009..=0.011).contains(&std), "std = {std}");

        // bit-reproducible
        let mut rng = Rng::seed(12);
        let again: Tensor<f64> =
            init_tensor(&[100, 100], InitScheme::Gaussian { std: 0.01 }, &mut rng).unwrap();
        assert_eq!(gaussian, again);
    }

    #[test]
    fn sparse_init_column_counts() {
        let mut rng = Rng::seed(3);
        let w: Tensor<f64> =
            init_tensor(&[10, 5], InitScheme::Sparse { k: 3, std: 1.0 }, &mut rng).unwrap();
        for col in 0..5 {
            let nonzeros = (0..10).filter(|row| w.data()[row * 5 + col] != 0.0).count();
            assert_eq!(nonzeros, 3);
        }
        let mut rng = Rng::seed(3);
        assert!(init_tensor::<f64>(&[2, 5], InitScheme::Sparse { k: 3, std: 1.0 }, &mut rng)
            .is_err());
    }

    #[test]
    fn orthogonal_init_is_orthogonal_and_deterministic() {
        let mut rng = Rng::seed(7);
        let q: Tensor<f64> = init_tensor(&[6, 6], InitScheme::Orthogonal, &mut rng).unwrap();
        let qt = q.transposed().unwrap();
        let product = qt.matmul(&q).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (product.data()[i * 6 + j] - expected).abs() < 1e-10,
                    "QtQ[{i},{j}] = {}",
                    product.data()[i * 6 + j]
                );
            }
        }
        let mut rng = Rng::seed(7);
        let again: Tensor<f64> = init_tensor(&[6, 6], InitScheme::Orthogonal, &mut rng).unwrap();
        assert_eq!(q, again);

        let mut rng = Rng::seed(7);
        assert!(init_tensor::<f64>(&[4, 6], InitScheme::Orthogonal, &mut rng).is_err());
    }

    #[test]
    fn recurrent_masking_contract() {
        let mut g = G::new();
        let mut store = ParamStore::new();
        let mut rnn = SimpleRecurrent::<f64>::new("rnn", 2);
        rnn.allocate(&mut g, &mut store).unwrap();
        let mut rng = Rng::seed(5);
        rnn.initialize(
            &g,
            &mut store,
            InitScheme::Gaussian { std: 0.5 },
            InitScheme::Orthogonal,
            &mut rng,
        )
        .unwrap();

        let x = g.input("x", &[1, 3, 2]);
        let mask = g.input("mask", &[1, 3]);
        let states = rnn.apply(&mut g, x, mask).unwrap();
        let cg = g.cg(&[states]).unwrap();

        let bind = |xv: Tensor<f64>, mv: Tensor<f64>| {
            let mut b = Bindings::new();
            b.insert(x, xv);
            b.insert(mask, mv);
            for v in rnn.parameters().unwrap() {
                b.insert(v, store.get(&g.parameter_key(v)).unwrap().clone());
            }
            b
        };

        // zero input, zero bias: all states zero
        let values = g.forward(
            &cg,
            &bind(Tensor::zeros(vec![1, 3, 2]), Tensor::filled(vec![1, 3], 1.0)),
        );
        assert_eq!(values.unwrap().get(states).unwrap().data(), &[0.0; 6]);

        // all-zero mask: states stay at h0
        let values = g.forward(
            &cg,
            &bind(
                Tensor::new(vec![1, 3, 2], vec![1.0, -1.0, 0.5, 0.25, 2.0, -2.0]).unwrap(),
                Tensor::zeros(vec![1, 3]),
            ),
        );
        assert_eq!(values.unwrap().get(states).unwrap().data(), &[0.0; 6]);
    }

    #[test]
    fn recurrent_gradients_match_finite_differences() {
        let mut g = G::new();
        let mut store = ParamStore::new();
        let mut rnn = SimpleRecurrent::<f64>::new("rnn", 2);
        rnn.allocate(&mut g, &mut store).unwrap();
        let mut rng = Rng::seed(9);
        rnn.initialize(
            &g,
            &mut store,
            InitScheme::Gaussian { std: 0.4 },
            InitScheme::Gaussian { std: 0.4 },
            &mut rng,
        )
        .unwrap();

        let x = g.input("x", &[2, 3, 2]);
        let mask = g.input("mask", &[2, 3]);
        let states = rnn.apply(&mut g, x, mask).unwrap();
        let sq = g.square(states);
        let cost = g.mean(sq);
        let wrt: Vec<VarId> = rnn
            .parameters()
            .unwrap()
            .into_iter()
            .chain(std::iter::once(x))
            .collect();
        let grads = g.grad(cost, &wrt).unwrap();
        let mut outputs = vec![cost];
        outputs.extend_from_slice(&grads);
        let cg = g.cg(&outputs).unwrap();
        let cost_cg = g.cg(&[cost]).unwrap();

        let xv = Tensor::new(
            vec![2, 3, 2],
            vec![0.3, -0.8, 0.5, 0.2, -0.4, 0.9, 1.1, -0.2, 0.0, 0.7, -0.6, 0.1],
        )
        .unwrap();
        let mv = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();

        let keys: Vec<String> = wrt.iter().map(|v| g.parameter_key(*v)).collect();
        let bind = |store: &ParamStore<f64>, xv: &Tensor<f64>| {
            let mut b = Bindings::new();
            b.insert(x, xv.clone());
            b.insert(mask, mv.clone());
            for (v, key) in wrt.iter().zip(&keys) {
                if *v != x {
                    b.insert(*v, store.get(key).unwrap().clone());
                }
            }
            b
        };

        let analytic = g.forward(&cg, &bind(&store, &xv)).unwrap();
        let h = 1e-6;
        for (wi, &v) in wrt.iter().enumerate() {
            let grad = analytic.get(grads[wi]).unwrap().clone();
            let base = if v == x {
                xv.clone()
            } else {
                store.get(&keys[wi]).unwrap().clone()
            };
            for j in 0..base.numel() {
                let eval_at = |delta: f64| {
                    let mut perturbed = base.clone();
                    perturbed.data_mut()[j] += delta;
                    let (mut s2, mut x2) = (store.clone(), xv.clone());
                    if v == x {
                        x2 = perturbed;
                    } else {
                        *s2.get_mut(&keys[wi]).unwrap() = perturbed;
                    }
                    g.forward(&cost_cg, &bind(&s2, &x2))
                        .unwrap()
                        .scalar(cost)
                        .unwrap()
                };
                let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
                let a = grad.data()[j];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                assert!(err < 1e-5, "wrt {wi} elem {j}: {a} vs {fd}");
            }
        }
    }
}
