//! Training orchestration: pulls items from a stream, computes gradients,
//! applies step rules and post-update constraints, fires extensions at
//! defined trigger points, keeps a structured log, and checkpoints the
//! entire state so a resumed run is bit-identical to an uninterrupted one.

pub mod snapshot;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bricks::ParamStore;
use crate::error::{Error, Result};
use crate::graph::{Bindings, ComputationGraph, Filter, Graph, RoleSet, VarId};
use crate::model::{build_model, ModelSpec};
use crate::server::ClientStream;
use crate::spec::PipelineSpec;
use crate::steprules::{compute_steps, ChainState, NormConstraint, RuleChain, StepRule};
use crate::stream::{Stream, StreamItem, StreamState};
use crate::tensor::{Item, Scalar, Value};

/// Loop counters. `iterations_done` increments exactly once per batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingStatus {
    pub iterations_done: u64,
    pub epochs_done: u64,
    pub training_finished: bool,
    pub stop_requested: bool,
}

/// Append-only map iteration -> channel -> scalar.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    rows: BTreeMap<u64, BTreeMap<String, f64>>,
}

impl TrainingLog {
    pub fn record(&mut self, iteration: u64, channel: &str, value: f64) {
        debug_assert!(
            self.rows.keys().next_back().is_none_or(|&k| iteration >= k),
            "iteration keys must be non-decreasing"
        );
        self.rows
            .entry(iteration)
            .or_default()
            .insert(channel.to_string(), value);
    }

    pub fn row(&self, iteration: u64) -> Option<&BTreeMap<String, f64>> {
        self.rows.get(&iteration)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&u64, &BTreeMap<String, f64>)> {
        self.rows.iter()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn channel_names(&self) -> BTreeSet<String> {
        self.rows
            .values()
            .flat_map(|row| row.keys().cloned())
            .collect()
    }

    /// JSON-friendly form; non-finite values become `null`.
    pub fn to_data(&self) -> BTreeMap<u64, BTreeMap<String, Option<f64>>> {
        self.rows
            .iter()
            .map(|(&k, row)| {
                let row = row
                    .iter()
                    .map(|(name, &v)| (name.clone(), v.is_finite().then_some(v)))
                    .collect();
                (k, row)
            })
            .collect()
    }

    pub fn from_data(data: &BTreeMap<u64, BTreeMap<String, Option<f64>>>) -> TrainingLog {
        let rows = data
            .iter()
            .map(|(&k, row)| {
                let row = row
                    .iter()
                    .map(|(name, v)| (name.clone(), v.unwrap_or(f64::NAN)))
                    .collect();
                (k, row)
            })
            .collect();
        TrainingLog { rows }
    }
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    iteration: u64,
    channels: BTreeMap<String, Option<f64>>,
}

/// Parses a JSON-lines log file back into a [`TrainingLog`].
pub fn read_log_file(path: &Path) -> Result<TrainingLog> {
    let text = std::fs::read_to_string(path)?;
    let mut log = TrainingLog::default();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let parsed: LogLine = serde_json::from_str(line)?;
        for (channel, value) in parsed.channels {
            log.record(parsed.iteration, &channel, value.unwrap_or(f64::NAN));
        }
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trigger {
    BeforeTraining,
    BeforeEpoch,
    BeforeBatch,
    AfterBatch,
    AfterEpoch,
    AfterTraining,
    OnInterrupt,
}

/// Post-update parameter constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSpec {
    /// Rescales selected parameters onto the limit sphere after updates.
    WeightNorm {
        limit: f64,
        /// Role names selecting the parameters; defaults to `["weight"]`.
        #[serde(default)]
        roles: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtensionSpec {
    FinishAfter {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        iterations: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epochs: Option<u64>,
    },
    /// Evaluates channels over a validation pipeline at every epoch end as
    /// the example-weighted mean, logged as `valid_<channel>`.
    Monitoring {
        pipeline: PipelineSpec,
        #[serde(default)]
        channels: Vec<String>,
    },
    Checkpoint {
        path: PathBuf,
        every_n_iterations: u64,
        #[serde(default)]
        abort_on_error: bool,
    },
    Printing {
        #[serde(default = "one")]
        every_n: u64,
    },
    LogToFile {
        path: PathBuf,
    },
}

fn one() -> u64 {
    1
}

/// Serializable per-extension state (configs stay in the spec).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtensionState {
    FinishAfter {},
    Monitoring {},
    Checkpoint {},
    Printing {},
    LogToFile { written_through: u64 },
}

enum Extension {
    FinishAfter {
        iterations: Option<u64>,
        epochs: Option<u64>,
    },
    Monitoring {
        pipeline: PipelineSpec,
        channels: Vec<String>,
    },
    Checkpoint {
        path: PathBuf,
        every: u64,
        abort_on_error: bool,
    },
    Printing {
        every: u64,
    },
    LogToFile {
        path: PathBuf,
        /// Last iteration whose line is already on disk.
        written_through: u64,
    },
}

/// Complete training description; pipeline and rule chain also serve as
/// the snapshot integrity reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub model: ModelSpec,
    pub pipeline: PipelineSpec,
    pub rules: Vec<StepRule>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<ConstraintSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extensions: Vec<ExtensionSpec>,
}

/// The data source a main loop trains from. Server-mode sources cannot
/// checkpoint (v1 rule: server mode and mid-epoch checkpointing are
/// mutually exclusive).
#[allow(clippy::large_enum_variant)]
pub enum TrainStream {
    Local(Stream),
    Remote(ClientStream),
}

impl TrainStream {
    fn next(&mut self) -> Result<Option<StreamItem>> {
        match self {
            TrainStream::Local(s) => s.next(),
            TrainStream::Remote(c) => c.next(),
        }
    }

    fn save_state(&self) -> Result<StreamState> {
        match self {
            TrainStream::Local(s) => Ok(s.save_state()),
            TrainStream::Remote(_) => Err(Error::StateMismatch(
                "a server-mode stream cannot be checkpointed".into(),
            )),
        }
    }

    fn restore_state(&mut self, state: &StreamState) -> Result<()> {
        match self {
            TrainStream::Local(s) => s.restore_state(state),
            TrainStream::Remote(_) => Err(Error::StateMismatch(
                "a server-mode stream cannot be restored".into(),
            )),
        }
    }
}

/// Everything the loop owns apart from the extension list; extensions get
/// a mutable view of this during trigger dispatch.
struct LoopCore<F: Scalar> {
    graph: Graph<F>,
    inputs: BTreeMap<String, VarId>,
    output: VarId,
    cost: VarId,
    channels: BTreeMap<String, VarId>,
    grad_vars: BTreeMap<String, VarId>,
    param_vars: BTreeMap<String, VarId>,
    params: ParamStore<F>,
    chain: RuleChain,
    chain_state: ChainState<F>,
    constraints: Vec<NormConstraint>,
    train_cg: ComputationGraph,
    eval_cg: ComputationGraph,
    stream: TrainStream,
    status: TrainingStatus,
    log: TrainingLog,
    epoch_started: bool,
    pipeline_value: serde_json::Value,
    rules_value: serde_json::Value,
}

impl<F: Scalar> LoopCore<F> {
    /// Binds one stream item plus the current parameters; returns the
    /// bindings and the runtime batch size.
    fn bind<'a>(&'a self, item: &Item) -> Result<(Bindings<'a, F>, usize)> {
        let mut bindings = Bindings::new();
        let mut batch = 0usize;
        for (source, &var) in &self.inputs {
            let value = item
                .get(source.as_str())
                .ok_or_else(|| Error::UnknownSource(source.clone()))?;
            let tensor = match value {
                Value::Tensor(t) => t.cast_scalar::<F>(),
                Value::List(_) => {
                    return Err(Error::ShapeMismatch(format!(
                        "source {source:?} reaches the trainer ragged; pad it first"
                    )))
                }
            };
            batch = tensor.shape().first().copied().unwrap_or(1);
            bindings.insert(var, tensor);
        }
        for (key, &var) in &self.param_vars {
            bindings.insert_ref(var, self.params.get(key)?);
        }
        Ok((bindings, batch))
    }

    /// One batch: forward + gradients, step rules, update, constraints.
    fn train_on(&mut self, item: &Item) -> Result<()> {
        let cost_value;
        let mut grads = BTreeMap::new();
        {
            let (bindings, _) = self.bind(item)?;
            let values = self.graph.forward(&self.train_cg, &bindings)?;
            cost_value = values.scalar(self.cost)?;
            for (key, &grad_var) in &self.grad_vars {
                grads.insert(key.clone(), values.get(grad_var)?.clone());
            }
        }
        let steps = compute_steps(&self.chain, &mut self.chain_state, &grads)?;
        for (key, step) in &steps {
            let param = self.params.get_mut(key)?;
            for (p, &s) in param.data_mut().iter_mut().zip(step.data()) {
                *p -= s;
            }
        }
        for constraint in &self.constraints {
            constraint.apply(&mut self.params)?;
        }
        self.status.iterations_done += 1;
        self.log
            .record(self.status.iterations_done, "train_cost", cost_value.to_f64());
        Ok(())
    }

    /// Example-weighted mean of each channel over one pass of a validation
    /// pipeline.
    fn monitor(&mut self, pipeline: &PipelineSpec, channels: &[String]) -> Result<()> {
        let mut stream = pipeline.build()?;
        let mut weighted: BTreeMap<&String, f64> = channels.iter().map(|c| (c, 0.0)).collect();
        let mut examples = 0.0f64;
        while let Some(step) = stream.next()? {
            match step {
                StreamItem::Item(item) => {
                    let (bindings, batch) = self.bind(&item)?;
                    let values = self.graph.forward(&self.eval_cg, &bindings)?;
                    for channel in channels {
                        let var = self.channels[channel];
                        let v = values.scalar(var)?.to_f64();
                        *weighted.get_mut(channel).expect("prefilled") += v * batch as f64;
                    }
                    examples += batch as f64;
                }
                StreamItem::EpochEnd => break,
            }
        }
        let iteration = self.status.iterations_done;
        for channel in channels {
            let value = if examples == 0.0 {
                eprintln!("warning: empty validation stream; valid_{channel} is NaN");
                f64::NAN
            } else {
                weighted[channel] / examples
            };
            self.log.record(iteration, &format!("valid_{channel}"), value);
        }
        Ok(())
    }

    fn write_snapshot(&self, path: &Path, extension_states: Vec<ExtensionState>) -> Result<()> {
        let content = snapshot::SnapshotContent {
            status: self.status,
            epoch_started: self.epoch_started,
            log: self.log.to_data(),
            parameters: self.params.as_map(),
            rule_states: &self.chain_state.rules,
            stream_state: self.stream.save_state()?,
            extension_states,
            rule_chain: self.rules_value.clone(),
            pipeline: self.pipeline_value.clone(),
        };
        snapshot::write_snapshot(path, content)
    }
}

impl Extension {
    fn state(&self) -> ExtensionState {
        match self {
            Extension::FinishAfter { .. } => ExtensionState::FinishAfter {},
            Extension::Monitoring { .. } => ExtensionState::Monitoring {},
            Extension::Checkpoint { .. } => ExtensionState::Checkpoint {},
            Extension::Printing { .. } => ExtensionState::Printing {},
            Extension::LogToFile {
                written_through, ..
            } => ExtensionState::LogToFile {
                written_through: *written_through,
            },
        }
    }

    fn restore_state(&mut self, state: &ExtensionState) -> Result<()> {
        match (self, state) {
            (Extension::FinishAfter { .. }, ExtensionState::FinishAfter {})
            | (Extension::Monitoring { .. }, ExtensionState::Monitoring {})
            | (Extension::Checkpoint { .. }, ExtensionState::Checkpoint {})
            | (Extension::Printing { .. }, ExtensionState::Printing {}) => Ok(()),
            (
                Extension::LogToFile {
                    written_through, ..
                },
                ExtensionState::LogToFile {
                    written_through: saved,
                },
            ) => {
                *written_through = *saved;
                Ok(())
            }
            _ => Err(Error::SpecMismatch(
                "snapshot extension states do not match the configured extensions".into(),
            )),
        }
    }

    fn fire<F: Scalar>(
        &mut self,
        trigger: Trigger,
        core: &mut LoopCore<F>,
        before: &[Extension],
        after: &[Extension],
    ) -> Result<()> {
        match self {
            Extension::FinishAfter { iterations, epochs } => {
                if trigger == Trigger::AfterBatch {
                    if let Some(n) = iterations {
                        if core.status.iterations_done >= *n {
                            core.status.stop_requested = true;
                        }
                    }
                }
                if trigger == Trigger::AfterEpoch {
                    if let Some(n) = epochs {
                        if core.status.epochs_done >= *n {
                            core.status.stop_requested = true;
                        }
                    }
                }
                Ok(())
            }
            Extension::Monitoring { pipeline, channels } => {
                if trigger == Trigger::AfterEpoch {
                    core.monitor(pipeline, channels)?;
                }
                Ok(())
            }
            Extension::Checkpoint {
                path,
                every,
                abort_on_error,
            } => {
                let due = match trigger {
                    Trigger::AfterBatch => {
                        *every > 0 && core.status.iterations_done.is_multiple_of(*every)
                    }
                    Trigger::OnInterrupt => true,
                    _ => false,
                };
                if !due {
                    return Ok(());
                }
                let mut states: Vec<ExtensionState> =
                    before.iter().map(Extension::state).collect();
                states.push(ExtensionState::Checkpoint {});
                states.extend(after.iter().map(Extension::state));
                match core.write_snapshot(path, states) {
                    Ok(()) => Ok(()),
                    Err(e) if *abort_on_error => Err(e),
                    Err(e) => {
                        eprintln!("warning: checkpoint to {} failed: {e}", path.display());
                        Ok(())
                    }
                }
            }
            Extension::Printing { every } => {
                match trigger {
                    Trigger::BeforeTraining => println!("training: start"),
                    Trigger::AfterBatch => {
                        let k = core.status.iterations_done;
                        if *every > 0 && k.is_multiple_of(*every) {
                            let cost = core
                                .log
                                .row(k)
                                .and_then(|row| row.get("train_cost"))
                                .copied()
                                .unwrap_or(f64::NAN);
                            println!("iteration {k}: train_cost {cost}");
                        }
                    }
                    Trigger::AfterEpoch => {
                        println!(
                            "epoch {} done after iteration {}",
                            core.status.epochs_done, core.status.iterations_done
                        );
                    }
                    Trigger::AfterTraining => {
                        println!(
                            "training: finished after {} iterations, {} epochs",
                            core.status.iterations_done, core.status.epochs_done
                        );
                    }
                    _ => {}
                }
                Ok(())
            }
            Extension::LogToFile {
                path,
                written_through,
            } => {
                let result = match trigger {
                    Trigger::BeforeTraining => {
                        rewrite_log_file(path, &core.log, *written_through)
                    }
                    Trigger::AfterBatch => {
                        // a row is flushed once no later trigger can add
                        // channels to it, i.e. when the next iteration starts
                        let limit = core.status.iterations_done.saturating_sub(1);
                        append_log_rows(path, &core.log, written_through, limit)
                    }
                    Trigger::AfterTraining | Trigger::OnInterrupt => {
                        append_log_rows(path, &core.log, written_through, u64::MAX)
                    }
                    _ => Ok(()),
                };
                if let Err(e) = result {
                    eprintln!("warning: log file {} failed: {e}", path.display());
                }
                Ok(())
            }
        }
    }
}

fn log_line(iteration: u64, row: &BTreeMap<String, f64>) -> Result<String> {
    let line = LogLine {
        iteration,
        channels: row
            .iter()
            .map(|(k, &v)| (k.clone(), v.is_finite().then_some(v)))
            .collect(),
    };
    Ok(serde_json::to_string(&line)?)
}

fn rewrite_log_file(path: &Path, log: &TrainingLog, written_through: u64) -> Result<()> {
    let mut out = String::new();
    for (&iteration, row) in log.rows() {
        if iteration <= written_through {
            out.push_str(&log_line(iteration, row)?);
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn append_log_rows(
    path: &Path,
    log: &TrainingLog,
    written_through: &mut u64,
    limit: u64,
) -> Result<()> {
    let mut file = std::fs::OpenOptions::new().append(true).create(true).open(path)?;
    for (&iteration, row) in log.rows() {
        if iteration > *written_through && iteration <= limit {
            file.write_all(log_line(iteration, row)?.as_bytes())?;
            file.write_all(b"\n")?;
            *written_through = iteration;
        }
    }
    Ok(())
}

fn parse_roles(names: &[String]) -> Result<RoleSet> {
    if names.is_empty() {
        return Ok(RoleSet::WEIGHT);
    }
    let mut roles = RoleSet::empty();
    for name in names {
        roles |= match name.as_str() {
            "input" => RoleSet::INPUT,
            "output" => RoleSet::OUTPUT,
            "parameter" => RoleSet::PARAMETER,
            "weight" => RoleSet::WEIGHT,
            "bias" => RoleSet::BIAS,
            "auxiliary" => RoleSet::AUXILIARY,
            "cost" => RoleSet::COST,
            other => return Err(Error::InvalidArgument(format!("unknown role {other:?}"))),
        };
    }
    Ok(roles)
}

fn fire_all<F: Scalar>(
    extensions: &mut [Extension],
    trigger: Trigger,
    core: &mut LoopCore<F>,
) -> Result<()> {
    for i in 0..extensions.len() {
        let (before, rest) = extensions.split_at_mut(i);
        let (ext, after) = rest.split_first_mut().expect("index in range");
        ext.fire(trigger, core, before, after)?;
    }
    Ok(())
}

/// The training orchestrator.
pub struct MainLoop<F: Scalar> {
    core: LoopCore<F>,
    extensions: Vec<Extension>,
    interrupt: Arc<AtomicBool>,
}

impl<F: Scalar> MainLoop<F> {
    /// Builds a loop with a local pipeline from the spec.
    pub fn new(spec: TrainSpec) -> Result<Self> {
        let stream = TrainStream::Local(spec.pipeline.build()?);
        Self::with_stream(spec, stream)
    }

    /// Builds a loop over an explicit data source (e.g. a TCP client).
    pub fn with_stream(spec: TrainSpec, stream: TrainStream) -> Result<Self> {
        let model = build_model::<F>(&spec.model)?;
        let mut graph = model.graph;
        let chain = RuleChain::new(spec.rules.clone());
        let registered: Vec<(String, Vec<usize>)> = model
            .params
            .iter()
            .map(|(k, t)| (k.clone(), t.shape().to_vec()))
            .collect();
        let chain_state = ChainState::new(&chain, &registered);

        let wrt: Vec<VarId> = model.param_vars.values().copied().collect();
        let grads = graph.grad(model.cost, &wrt)?;
        let grad_vars: BTreeMap<String, VarId> =
            model.param_vars.keys().cloned().zip(grads.iter().copied()).collect();
        let mut outputs = vec![model.cost];
        outputs.extend_from_slice(&grads);
        let train_cg = graph.cg(&outputs)?;
        let channel_vars: Vec<VarId> = model.channels.values().copied().collect();
        let eval_cg = graph.cg(&channel_vars)?;

        let mut constraints = Vec::new();
        for c in &spec.constraints {
            match c {
                ConstraintSpec::WeightNorm { limit, roles } => {
                    let roles = parse_roles(roles)?;
                    let selected: Vec<String> = graph
                        .variable_filter(
                            &train_cg,
                            &Filter {
                                roles,
                                ..Filter::default()
                            },
                        )
                        .into_iter()
                        .filter(|&v| graph.is_parameter(v))
                        .map(|v| graph.parameter_key(v))
                        .collect();
                    constraints.push(NormConstraint::new(*limit, selected)?);
                }
            }
        }

        let mut extensions = Vec::new();
        for e in &spec.extensions {
            extensions.push(match e {
                ExtensionSpec::FinishAfter { iterations, epochs } => Extension::FinishAfter {
                    iterations: *iterations,
                    epochs: *epochs,
                },
                ExtensionSpec::Monitoring { pipeline, channels } => {
                    let channels = if channels.is_empty() {
                        model.channels.keys().cloned().collect()
                    } else {
                        channels.clone()
                    };
                    for channel in &channels {
                        if !model.channels.contains_key(channel) {
                            return Err(Error::InvalidArgument(format!(
                                "monitoring channel {channel:?} is not a model output"
                            )));
                        }
                    }
                    Extension::Monitoring {
                        pipeline: pipeline.clone(),
                        channels,
                    }
                }
                ExtensionSpec::Checkpoint {
                    path,
                    every_n_iterations,
                    abort_on_error,
                } => {
                    if matches!(stream, TrainStream::Remote(_)) {
                        return Err(Error::InvalidArgument(
                            "checkpointing is unavailable with a server-mode stream".into(),
                        ));
                    }
                    Extension::Checkpoint {
                        path: path.clone(),
                        every: *every_n_iterations,
                        abort_on_error: *abort_on_error,
                    }
                }
                ExtensionSpec::Printing { every_n } => Extension::Printing { every: *every_n },
                ExtensionSpec::LogToFile { path } => Extension::LogToFile {
                    path: path.clone(),
                    written_through: 0,
                },
            });
        }

        let core = LoopCore {
            graph,
            inputs: model.inputs,
            output: model.output,
            cost: model.cost,
            channels: model.channels,
            grad_vars,
            param_vars: model.param_vars,
            params: model.params,
            chain,
            chain_state,
            constraints,
            train_cg,
            eval_cg,
            stream,
            status: TrainingStatus::default(),
            log: TrainingLog::default(),
            epoch_started: false,
            pipeline_value: spec.pipeline.to_value()?,
            rules_value: serde_json::to_value(&spec.rules)?,
        };
        Ok(MainLoop {
            core,
            extensions,
            interrupt: Arc::new(AtomicBool::new(false)),
        })
    }

    /// Restores a snapshot. The spec's pipeline and rule chain must match
    /// the ones stored in the snapshot.
    pub fn resume(spec: TrainSpec, snapshot_path: &Path) -> Result<Self> {
        let loaded = snapshot::load_snapshot::<F>(snapshot_path)?;
        let mut out = Self::new(spec)?;

        if loaded.doc.pipeline != out.core.pipeline_value {
            return Err(Error::SpecMismatch(
                "snapshot was taken with a different pipeline spec".into(),
            ));
        }
        if loaded.doc.rule_chain != out.core.rules_value {
            return Err(Error::SpecMismatch(
                "snapshot was taken with a different rule chain".into(),
            ));
        }

        // parameters
        let expected: Vec<&String> = out.core.params.keys().collect();
        let got: Vec<&String> = loaded.parameters.keys().collect();
        if expected != got {
            return Err(Error::SpecMismatch(
                "snapshot parameters do not match the model".into(),
            ));
        }
        for (key, tensor) in loaded.parameters {
            let slot = out.core.params.get_mut(&key)?;
            if slot.shape() != tensor.shape() {
                return Err(Error::SpecMismatch(format!(
                    "parameter {key:?} has shape {:?} in the snapshot, {:?} in the model",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }

        // step-rule buffers
        out.core.chain_state.rules = loaded.rule_states;
        if !out.core.chain_state.matches(&out.core.chain) {
            return Err(Error::SpecMismatch(
                "snapshot step-rule state does not match the rule chain".into(),
            ));
        }

        out.core.stream.restore_state(&loaded.doc.stream_state)?;
        out.core.status = loaded.doc.status;
        out.core.epoch_started = loaded.doc.epoch_started;
        out.core.log = TrainingLog::from_data(&loaded.doc.log);

        if loaded.doc.extension_states.len() != out.extensions.len() {
            return Err(Error::SpecMismatch(format!(
                "snapshot has {} extension states, loop has {} extensions",
                loaded.doc.extension_states.len(),
                out.extensions.len()
            )));
        }
        for (ext, state) in out.extensions.iter_mut().zip(&loaded.doc.extension_states) {
            ext.restore_state(state)?;
        }

        // a resumed run continues; stop flags belong to the old process
        out.core.status.stop_requested = false;
        out.core.status.training_finished = false;
        Ok(out)
    }

    /// Flag polled at batch boundaries; setting it checkpoints (via the
    /// ON_INTERRUPT trigger) and leaves the loop.
    pub fn interrupt_flag(&self) -> Arc<AtomicBool> {
        self.interrupt.clone()
    }

    pub fn status(&self) -> &TrainingStatus {
        &self.core.status
    }

    pub fn log(&self) -> &TrainingLog {
        &self.core.log
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.core.params
    }

    pub fn graph(&self) -> &Graph<F> {
        &self.core.graph
    }

    pub fn model_output_channels(&self) -> &BTreeMap<String, VarId> {
        &self.core.channels
    }

    /// Stream source name -> bound input variable.
    pub fn model_inputs(&self) -> &BTreeMap<String, VarId> {
        &self.core.inputs
    }

    /// Parameter store key -> parameter variable.
    pub fn param_vars(&self) -> &BTreeMap<String, VarId> {
        &self.core.param_vars
    }

    /// The network output variable (before the cost).
    pub fn network_output(&self) -> VarId {
        self.core.output
    }

    fn fire(&mut self, trigger: Trigger) -> Result<()> {
        match fire_all(&mut self.extensions, trigger, &mut self.core) {
            Ok(()) => Ok(()),
            Err(e) => {
                // extension failure aborts with interrupt semantics
                let _ = fire_all(&mut self.extensions, Trigger::OnInterrupt, &mut self.core);
                Err(e)
            }
        }
    }

    /// Runs until an extension requests a stop, the stream exhausts, or the
    /// interrupt flag is raised.
    pub fn run(&mut self) -> Result<()> {
        self.fire(Trigger::BeforeTraining)?;
        loop {
            if self.core.status.stop_requested {
                self.core.status.training_finished = true;
                break;
            }
            if self.interrupt.load(Ordering::Relaxed) {
                fire_all(&mut self.extensions, Trigger::OnInterrupt, &mut self.core)?;
                return Ok(());
            }
            match self.core.stream.next()? {
                Some(StreamItem::Item(item)) => {
                    if !self.core.epoch_started {
                        self.core.epoch_started = true;
                        self.fire(Trigger::BeforeEpoch)?;
                    }
                    self.fire(Trigger::BeforeBatch)?;
                    self.core.train_on(&item)?;
                    self.fire(Trigger::AfterBatch)?;
                }
                Some(StreamItem::EpochEnd) => {
                    self.core.status.epochs_done += 1;
                    self.core.epoch_started = false;
                    self.fire(Trigger::AfterEpoch)?;
                }
                None => {
                    self.core.status.training_finished = true;
                    break;
                }
            }
        }
        self.fire(Trigger::AfterTraining)?;
        Ok(())
    }
}
