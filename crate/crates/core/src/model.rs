//! Builds the demo models (MLP classifiers/regressors) from a serializable
//! spec: graph, annotated parameters, cost, and named scalar channels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bricks::{Activation, InitScheme, Mlp, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{ComputationGraph, Graph, RoleSet, VarId};
use crate::rng::Rng;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    CrossEntropy,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub weights: InitScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biases: Option<InitScheme>,
    pub seed: u64,
}

/// Serializable model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Declared batch extent; the leading axis stays flexible at run time.
    pub batch_size: usize,
    pub cost: CostKind,
    /// Stream source bound to the network input.
    pub input_source: String,
    /// Stream source bound to the cost target.
    pub target_source: String,
    pub init: InitSpec,
}

/// A built model: graph, parameter storage, and the variables the main
/// loop needs to bind and evaluate.
pub struct Model<F: Scalar> {
    pub graph: Graph<F>,
    pub params: ParamStore<F>,
    /// Stream source name -> input variable.
    pub inputs: BTreeMap<String, VarId>,
    /// Network output (before the cost).
    pub output: VarId,
    pub cost: VarId,
    /// Channel name -> scalar variable (monitoring evaluates these).
    pub channels: BTreeMap<String, VarId>,
    /// Parameter store key -> parameter variable.
    pub param_vars: BTreeMap<String, VarId>,
}

pub fn build_model<F: Scalar>(spec: &ModelSpec) -> Result<Model<F>> {
    if spec.dims.len() < 2 {
        return Err(Error::InvalidArgument(
            "model needs at least input and output dims".into(),
        ));
    }
    if spec.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut graph = Graph::new();
    let mut params = ParamStore::new();
    let mut mlp = Mlp::new(&spec.name, &spec.dims, &spec.activations)?;
    mlp.allocate(&mut graph, &mut params)?;

    let in_dim = spec.dims[0];
    let out_dim = *spec.dims.last().expect("nonempty dims");
    let x = graph.input(&spec.input_source, &[spec.batch_size, in_dim]);
    let target = graph.input(&spec.target_source, &[spec.batch_size, out_dim]);
    let output = mlp.apply(&mut graph, x)?;
    let cost = match spec.cost {
        CostKind::CrossEntropy => graph.cross_entropy(output, target)?,
        CostKind::Mse => graph.mse(output, target)?,
    };
    graph.add_roles(cost, RoleSet::COST);
    graph.rename(cost, "cost".into(), String::new());

    let mut rng = Rng::seed(spec.init.seed);
    mlp.initialize(&graph, &mut params, spec.init.weights, spec.init.biases, &mut rng)?;

    let mut inputs = BTreeMap::new();
    inputs.insert(spec.input_source.clone(), x);
    inputs.insert(spec.target_source.clone(), target);
    let mut channels = BTreeMap::new();
    channels.insert("cost".to_string(), cost);
    let param_vars: BTreeMap<String, VarId> = mlp
        .parameters()?
        .into_iter()
        .map(|v| (graph.parameter_key(v), v))
        .collect();

    Ok(Model {
        graph,
        params,
        inputs,
        output,
        cost,
        channels,
        param_vars,
    })
}

impl<F: Scalar> Model<F> {
    /// View over the cost alone.
    pub fn cost_cg(&self) -> Result<ComputationGraph> {
        self.graph.cg(&[self.cost])
    }
}
