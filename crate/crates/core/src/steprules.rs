//! Composable step rules: each rule maps the incoming proposed step (the
//! raw gradient at the head of the chain) plus its own buffers to an
//! outgoing step. The caller applies `param := param - step`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bricks::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One transformation in a rule chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    /// `s' = lr · s`
    Scale { learning_rate: f64 },
    /// `v := m·v + s; s' = v`
    Momentum { momentum: f64 },
    /// Joint rescale when the global L2 norm of all steps exceeds the
    /// threshold.
    GradientClipping { threshold: f64 },
    /// `a += s²; s' = lr·s/(√a + ε)`
    AdaGrad { learning_rate: f64, epsilon: f64 },
    /// `a := ρa + (1-ρ)s²; s' = lr·s/(√a + ε)`
    RmsProp {
        learning_rate: f64,
        rho: f64,
        epsilon: f64,
    },
    /// `ag := ρ·ag + (1-ρ)s²; d = s·√(ad+ε)/√(ag+ε); ad := ρ·ad + (1-ρ)d²;
    /// s' = d`
    AdaDelta { rho: f64, epsilon: f64 },
    /// `t += 1; m := β1·m + (1-β1)s; v := β2·v + (1-β2)s²;
    /// s' = α·(m/(1-β1ᵗ)) / (√(v/(1-β2ᵗ)) + ε)`
    Adam {
        alpha: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl StepRule {
    /// Standard literature defaults, recorded here rather than implicit.
    pub fn adam_default() -> StepRule {
        StepRule::Adam {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn rmsprop_default(learning_rate: f64) -> StepRule {
        StepRule::RmsProp {
            learning_rate,
            rho: 0.9,
            epsilon: 1e-8,
        }
    }

    pub fn adadelta_default() -> StepRule {
        StepRule::AdaDelta {
            rho: 0.95,
            epsilon: 1e-6,
        }
    }
}

/// Left-to-right composition of step rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleChain {
    pub rules: Vec<StepRule>,
}

impl RuleChain {
    pub fn new(rules: Vec<StepRule>) -> Self {
        RuleChain { rules }
    }
}

type Buffers<F> = BTreeMap<String, Tensor<F>>;

/// Buffers of one rule instance.
#[derive(Clone, Debug, PartialEq)]
pub enum RuleState<F: Scalar> {
    Stateless,
    Momentum { velocity: Buffers<F> },
    AdaGrad { accumulator: Buffers<F> },
    RmsProp { accumulator: Buffers<F> },
    AdaDelta { grad_accumulator: Buffers<F>, delta_accumulator: Buffers<F> },
    Adam { first_moment: Buffers<F>, second_moment: Buffers<F>, timestep: u64 },
}

/// Per-parameter buffers for a whole chain, keyed by parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState<F: Scalar> {
    pub rules: Vec<RuleState<F>>,
    registered: BTreeMap<String, Vec<usize>>,
}

fn zero_buffers<F: Scalar>(params: &BTreeMap<String, Vec<usize>>) -> Buffers<F> {
    params
        .iter()
        .map(|(k, shape)| (k.clone(), Tensor::zeros(shape.clone())))
        .collect()
}

impl<F: Scalar> ChainState<F> {
    /// Zero-initialized buffers for the given parameters.
    pub fn new(chain: &RuleChain, params: &[(String, Vec<usize>)]) -> Self {
        let registered: BTreeMap<String, Vec<usize>> = params.iter().cloned().collect();
        let rules = chain
            .rules
            .iter()
            .map(|rule| match rule {
                StepRule::Scale { .. } | StepRule::GradientClipping { .. } => RuleState::Stateless,
                StepRule::Momentum { .. } => RuleState::Momentum {
                    velocity: zero_buffers(&registered),
                },
                StepRule::AdaGrad { .. } => RuleState::AdaGrad {
                    accumulator: zero_buffers(&registered),
                },
                StepRule::RmsProp { .. } => RuleState::RmsProp {
                    accumulator: zero_buffers(&registered),
                },
                StepRule::AdaDelta { .. } => RuleState::AdaDelta {
                    grad_accumulator: zero_buffers(&registered),
                    delta_accumulator: zero_buffers(&registered),
                },
                StepRule::Adam { .. } => RuleState::Adam {
                    first_moment: zero_buffers(&registered),
                    second_moment: zero_buffers(&registered),
                    timestep: 0,
                },
            })
            .collect();
        ChainState { rules, registered }
    }

    pub fn parameter_names(&self) -> impl Iterator<Item = &String> {
        self.registered.keys()
    }
}

fn check_coverage<F: Scalar>(
    state: &ChainState<F>,
    grads: &BTreeMap<String, Tensor<F>>,
) -> Result<()> {
    for name in grads.keys() {
        if !state.registered.contains_key(name) {
            return Err(Error::UnknownParameter(format!(
                "gradient for unregistered parameter {name:?}"
            )));
        }
    }
    for (name, shape) in &state.registered {
        match grads.get(name) {
            None => {
                return Err(Error::UnknownParameter(format!(
                    "missing gradient for parameter {name:?}"
                )))
            }
            Some(g) if g.shape() != shape.as_slice() => {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for {name:?} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    shape
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Applies the chain left to right; the initial proposed step is the raw
/// gradient. Returns the final steps; the caller subtracts them.
pub fn compute_steps<F: Scalar>(
    chain: &RuleChain,
    state: &mut ChainState<F>,
    grads: &BTreeMap<String, Tensor<F>>,
) -> Result<BTreeMap<String, Tensor<F>>> {
    check_coverage(state, grads)?;
    let mut steps = grads.clone();
    for (rule, rule_state) in chain.rules.iter().zip(state.rules.iter_mut()) {
        steps = apply_rule(rule, rule_state, steps)?;
    }
    Ok(steps)
}

fn apply_rule<F: Scalar>(
    rule: &StepRule,
    state: &mut RuleState<F>,
    steps: BTreeMap<String, Tensor<F>>,
) -> Result<BTreeMap<String, Tensor<F>>> {
    let c = F::from_f64_exact;
    match (rule, state) {
        (StepRule::Scale { learning_rate }, RuleState::Stateless) => {
            let lr = c(*learning_rate);
            Ok(steps
                .into_iter()
                .map(|(name, s)| (name, s.map(|v| lr * v)))
                .collect())
        }
        (StepRule::GradientClipping { threshold }, RuleState::Stateless) => {
            let limit = c(*threshold);
            let mut norm_sq = F::zero();
            for s in steps.values() {
                for &v in s.data() {
                    norm_sq += v * v;
                }
            }
            let norm = norm_sq.sqrt();
            if norm <= limit {
                return Ok(steps);
            }
            let factor = limit / norm;
            Ok(steps
                .into_iter()
                .map(|(name, s)| (name, s.map(|v| v * factor)))
                .collect())
        }
        (StepRule::Momentum { momentum }, RuleState::Momentum { velocity }) => {
            let m = c(*momentum);
            let mut out = BTreeMap::new();
            for (name, s) in steps {
                let v = velocity.get_mut(&name).expect("registered");
                for (slot, &g) in v.data_mut().iter_mut().zip(s.data()) {
                    *slot = m * *slot + g;
                }
                out.insert(name, v.clone());
            }
            Ok(out)
        }
        (StepRule::AdaGrad { learning_rate, epsilon }, RuleState::AdaGrad { accumulator }) => {
            let (lr, eps) = (c(*learning_rate), c(*epsilon));
            let mut out = BTreeMap::new();
            for (name, s) in steps {
                let a = accumulator.get_mut(&name).expect("registered");
                let mut step = s.clone();
                for (slot, (acc, &g)) in step
                    .data_mut()
                    .iter_mut()
                    .zip(a.data_mut().iter_mut().zip(s.data()))
                {
                    *acc += g * g;
                    *slot = lr * g / (acc.sqrt() + eps);
                }
                out.insert(name, step);
            }
            Ok(out)
        }
        (
            StepRule::RmsProp {
                learning_rate,
                rho,
                epsilon,
            },
            RuleState::RmsProp { accumulator },
        ) => {
            let (lr, rho, eps) = (c(*learning_rate), c(*rho), c(*epsilon));
            let one = F::one();
            let mut out = BTreeMap::new();
            for (name, s) in steps {
                let a = accumulator.get_mut(&name).expect("registered");
                let mut step = s.clone();
                for (slot, (acc, &g)) in step
                    .data_mut()
                    .iter_mut()
                    .zip(a.data_mut().iter_mut().zip(s.data()))
                {
                    *acc = rho * *acc + (one - rho) * (g * g);
                    *slot = lr * g / (acc.sqrt() + eps);
                }
                out.insert(name, step);
            }
            Ok(out)
        }
        (
            StepRule::AdaDelta { rho, epsilon },
            RuleState::AdaDelta {
                grad_accumulator,
                delta_accumulator,
            },
        ) => {
            let (rho, eps) = (c(*rho), c(*epsilon));
            let one = F::one();
            let mut out = BTreeMap::new();
            for (name, s) in steps {
                let ag = grad_accumulator.get_mut(&name).expect("registered");
                let ad = delta_accumulator.get_mut(&name).expect("registered");
                let mut step = s.clone();
                for (slot, ((ag, ad), &g)) in step.data_mut().iter_mut().zip(
                    ag.data_mut()
                        .iter_mut()
                        .zip(ad.data_mut().iter_mut())
                        .zip(s.data()),
                ) {
                    *ag = rho * *ag + (one - rho) * (g * g);
                    let d = g * (*ad + eps).sqrt() / (*ag + eps).sqrt();
                    *ad = rho * *ad + (one - rho) * (d * d);
                    *slot = d;
                }
                out.insert(name, step);
            }
            Ok(out)
        }
        (
            StepRule::Adam {
                alpha,
                beta1,
                beta2,
                epsilon,
            },
            RuleState::Adam {
                first_moment,
                second_moment,
                timestep,
            },
        ) => {
            let (alpha, b1, b2, eps) = (c(*alpha), c(*beta1), c(*beta2), c(*epsilon));
            let one = F::one();
            *timestep += 1;
            let t = *timestep as i32;
            let bias1 = one - b1.powi(t);
            let bias2 = one - b2.powi(t);
            let mut out = BTreeMap::new();
            for (name, s) in steps {
                let m = first_moment.get_mut(&name).expect("registered");
                let v = second_moment.get_mut(&name).expect("registered");
                let mut step = s.clone();
                for (slot, ((m, v), &g)) in step.data_mut().iter_mut().zip(
                    m.data_mut()
                        .iter_mut()
                        .zip(v.data_mut().iter_mut())
                        .zip(s.data()),
                ) {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * (g * g);
                    *slot = alpha * (*m / bias1) / ((*v / bias2).sqrt() + eps);
                }
                out.insert(name, step);
            }
            Ok(out)
        }
        _ => Err(Error::StateMismatch(
            "rule state does not match its rule".into(),
        )),
    }
}

/// Post-update hook: any selected parameter whose whole-tensor L2 norm
/// exceeds the limit is rescaled onto the limit sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConstraint {
    pub limit: f64,
    pub parameters: Vec<String>,
}

impl NormConstraint {
    pub fn new(limit: f64, parameters: Vec<String>) -> Result<Self> {
        if limit <= 0.0 {
            return Err(Error::InvalidArgument("norm limit must be positive".into()));
        }
        Ok(NormConstraint { limit, parameters })
    }

    pub fn apply<F: Scalar>(&self, store: &mut ParamStore<F>) -> Result<()> {
        let limit = F::from_f64_exact(self.limit);
        for name in &self.parameters {
            let tensor = store.get_mut(name)?;
            let norm = tensor.l2_norm();
            // zero tensors stay untouched (norm 0 <= limit), so no division
            // by zero is possible here
            if norm > limit {
                let factor = limit / norm;
                for v in tensor.data_mut() {
                    *v *= factor;
                }
            }
        }
        Ok(())
    }
}

/// Serialized [`ChainState`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainStateData {
    pub rules: Vec<RuleStateData>,
    pub registered: BTreeMap<String, Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleStateData {
    Stateless {},
    Momentum { velocity: BTreeMap<String, crate::tensor::TensorData> },
    AdaGrad { accumulator: BTreeMap<String, crate::tensor::TensorData> },
    RmsProp { accumulator: BTreeMap<String, crate::tensor::TensorData> },
    AdaDelta {
        grad_accumulator: BTreeMap<String, crate::tensor::TensorData>,
        delta_accumulator: BTreeMap<String, crate::tensor::TensorData>,
    },
    Adam {
        first_moment: BTreeMap<String, crate::tensor::TensorData>,
        second_moment: BTreeMap<String, crate::tensor::TensorData>,
        timestep: u64,
    },
}

fn buffers_to_data<F: Scalar>(buffers: &Buffers<F>) -> BTreeMap<String, crate::tensor::TensorData> {
    buffers
        .iter()
        .map(|(k, t)| (k.clone(), F::wrap(t.clone())))
        .collect()
}

fn buffers_from_data<F: Scalar>(
    data: &BTreeMap<String, crate::tensor::TensorData>,
) -> Result<Buffers<F>> {
    data.iter()
        .map(|(k, t)| {
            if t.dtype() != F::DTYPE {
                return Err(Error::DTypeMismatch {
                    expected: F::DTYPE.name().into(),
                    actual: t.dtype().name().into(),
                });
            }
            Ok((k.clone(), t.cast_scalar::<F>()))
        })
        .collect()
}

impl<F: Scalar> ChainState<F> {
    pub fn to_data(&self) -> ChainStateData {
        ChainStateData {
            rules: self
                .rules
                .iter()
                .map(|r| match r {
                    RuleState::Stateless => RuleStateData::Stateless {},
                    RuleState::Momentum { velocity } => RuleStateData::Momentum {
                        velocity: buffers_to_data(velocity),
                    },
                    RuleState::AdaGrad { accumulator } => RuleStateData::AdaGrad {
                        accumulator: buffers_to_data(accumulator),
                    },
                    RuleState::RmsProp { accumulator } => RuleStateData::RmsProp {
                        accumulator: buffers_to_data(accumulator),
                    },
                    RuleState::AdaDelta {
                        grad_accumulator,
                        delta_accumulator,
                    } => RuleStateData::AdaDelta {
                        grad_accumulator: buffers_to_data(grad_accumulator),
                        delta_accumulator: buffers_to_data(delta_accumulator),
                    },
                    RuleState::Adam {
                        first_moment,
                        second_moment,
                        timestep,
                    } => RuleStateData::Adam {
                        first_moment: buffers_to_data(first_moment),
                        second_moment: buffers_to_data(second_moment),
                        timestep: *timestep,
                    },
                })
                .collect(),
            registered: self.registered.clone(),
        }
    }

    pub fn from_data(data: &ChainStateData) -> Result<Self> {
        let rules = data
            .rules
            .iter()
            .map(|r| {
                Ok(match r {
                    RuleStateData::Stateless {} => RuleState::Stateless,
                    RuleStateData::Momentum { velocity } => RuleState::Momentum {
                        velocity: buffers_from_data(velocity)?,
                    },
                    RuleStateData::AdaGrad { accumulator } => RuleState::AdaGrad {
                        accumulator: buffers_from_data(accumulator)?,
                    },
                    RuleStateData::RmsProp { accumulator } => RuleState::RmsProp {
                        accumulator: buffers_from_data(accumulator)?,
                    },
                    RuleStateData::AdaDelta {
                        grad_accumulator,
                        delta_accumulator,
                    } => RuleState::AdaDelta {
                        grad_accumulator: buffers_from_data(grad_accumulator)?,
                        delta_accumulator: buffers_from_data(delta_accumulator)?,
                    },
                    RuleStateData::Adam {
                        first_moment,
                        second_moment,
                        timestep,
                    } => RuleState::Adam {
                        first_moment: buffers_from_data(first_moment)?,
                        second_moment: buffers_from_data(second_moment)?,
                        timestep: *timestep,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ChainState {
            rules,
            registered: data.registered.clone(),
        })
    }

    /// The rule-state kinds must match the chain this state will drive.
    pub fn matches(&self, chain: &RuleChain) -> bool {
        self.rules.len() == chain.rules.len()
            && chain.rules.iter().zip(&self.rules).all(|(rule, state)| {
                matches!(
                    (rule, state),
                    (StepRule::Scale { .. }, RuleState::Stateless)
                        | (StepRule::GradientClipping { .. }, RuleState::Stateless)
                        | (StepRule::Momentum { .. }, RuleState::Momentum { .. })
                        | (StepRule::AdaGrad { .. }, RuleState::AdaGrad { .. })
                        | (StepRule::RmsProp { .. }, RuleState::RmsProp { .. })
                        | (StepRule::AdaDelta { .. }, RuleState::AdaDelta { .. })
                        | (StepRule::Adam { .. }, RuleState::Adam { .. })
                )
            })
    }
}
