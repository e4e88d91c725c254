//! Whole-training-state snapshots.
//!
//! Layout: magic `"BFCK0001"` ∥ u32 LE json_length ∥ JSON state tree ∥
//! 64-byte-aligned little-endian blobs — the container's binary-tensor
//! conventions, reused. Parameters and step-rule buffers live in the blobs
//! and are referenced from the JSON as `{blob_index, dtype, shape}`;
//! RNG states travel as hex u64 pairs inside the stream state tree.
//! Snapshots are written to a temporary file and renamed into place, so an
//! interrupted checkpoint never corrupts the previous one.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::steprules::RuleState;
use crate::stream::StreamState;
use crate::tensor::{DType, Scalar, Tensor};

use super::{ExtensionState, TrainingStatus};

pub const MAGIC: &[u8; 8] = b"BFCK0001";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub blob_index: usize,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    fn nbytes(&self) -> u64 {
        (self.shape.iter().product::<usize>() * self.dtype.size_of()) as u64
    }
}

type EntryMap = BTreeMap<String, TensorEntry>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleStateEntry {
    Stateless {},
    Momentum { velocity: EntryMap },
    AdaGrad { accumulator: EntryMap },
    RmsProp { accumulator: EntryMap },
    AdaDelta {
        grad_accumulator: EntryMap,
        delta_accumulator: EntryMap,
    },
    Adam {
        first_moment: EntryMap,
        second_moment: EntryMap,
        timestep: u64,
    },
}

/// The JSON document at the head of a snapshot file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotDoc {
    pub format_version: u32,
    pub status: TrainingStatus,
    pub epoch_started: bool,
    pub log: BTreeMap<u64, BTreeMap<String, Option<f64>>>,
    pub parameters: EntryMap,
    pub rule_state: Vec<RuleStateEntry>,
    pub stream_state: StreamState,
    pub extension_states: Vec<ExtensionState>,
    /// Rule-chain and pipeline specs, stored for integrity checking.
    pub rule_chain: serde_json::Value,
    pub pipeline: serde_json::Value,
}

struct BlobCollector<F: Scalar> {
    blobs: Vec<Vec<u8>>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> BlobCollector<F> {
    fn new() -> Self {
        BlobCollector {
            blobs: Vec::new(),
            _marker: std::marker::PhantomData,
        }
    }

    fn push(&mut self, tensor: &Tensor<F>) -> TensorEntry {
        let entry = TensorEntry {
            blob_index: self.blobs.len(),
            dtype: F::DTYPE,
            shape: tensor.shape().to_vec(),
        };
        self.blobs.push(tensor.to_le_bytes());
        entry
    }

    fn push_map(&mut self, tensors: &BTreeMap<String, Tensor<F>>) -> EntryMap {
        tensors
            .iter()
            .map(|(k, t)| (k.clone(), self.push(t)))
            .collect()
    }
}

/// Serializes the rule states, appending their buffers to the collector.
fn rule_entries<F: Scalar>(
    rules: &[RuleState<F>],
    collector: &mut BlobCollector<F>,
) -> Vec<RuleStateEntry> {
    rules
        .iter()
        .map(|rule| match rule {
            RuleState::Stateless => RuleStateEntry::Stateless {},
            RuleState::Momentum { velocity } => RuleStateEntry::Momentum {
                velocity: collector.push_map(velocity),
            },
            RuleState::AdaGrad { accumulator } => RuleStateEntry::AdaGrad {
                accumulator: collector.push_map(accumulator),
            },
            RuleState::RmsProp { accumulator } => RuleStateEntry::RmsProp {
                accumulator: collector.push_map(accumulator),
            },
            RuleState::AdaDelta {
                grad_accumulator,
                delta_accumulator,
            } => RuleStateEntry::AdaDelta {
                grad_accumulator: collector.push_map(grad_accumulator),
                delta_accumulator: collector.push_map(delta_accumulator),
            },
            RuleState::Adam {
                first_moment,
                second_moment,
                timestep,
            } => RuleStateEntry::Adam {
                first_moment: collector.push_map(first_moment),
                second_moment: collector.push_map(second_moment),
                timestep: *timestep,
            },
        })
        .collect()
}

pub struct SnapshotContent<'a, F: Scalar> {
    pub status: TrainingStatus,
    pub epoch_started: bool,
    pub log: BTreeMap<u64, BTreeMap<String, Option<f64>>>,
    pub parameters: &'a BTreeMap<String, Tensor<F>>,
    pub rule_states: &'a [RuleState<F>],
    pub stream_state: StreamState,
    pub extension_states: Vec<ExtensionState>,
    pub rule_chain: serde_json::Value,
    pub pipeline: serde_json::Value,
}

/// Writes a snapshot atomically (temp file, then rename).
pub fn write_snapshot<F: Scalar>(path: &Path, content: SnapshotContent<'_, F>) -> Result<()> {
    let mut collector = BlobCollector::<F>::new();
    let parameters = collector.push_map(content.parameters);
    let rule_state = rule_entries(content.rule_states, &mut collector);
    let doc = SnapshotDoc {
        format_version: FORMAT_VERSION,
        status: content.status,
        epoch_started: content.epoch_started,
        log: content.log,
        parameters,
        rule_state,
        stream_state: content.stream_state,
        extension_states: content.extension_states,
        rule_chain: content.rule_chain,
        pipeline: content.pipeline,
    };
    let header = serde_json::to_vec(&doc)?;
    let tmp = path.with_extension("tmp");
    blob::write_file(&tmp, MAGIC, &collector.blobs, |_offsets| Ok(header.clone()))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Snapshot parsed back into typed tensors.
pub struct LoadedSnapshot<F: Scalar> {
    pub doc: SnapshotDoc,
    pub parameters: BTreeMap<String, Tensor<F>>,
    pub rule_states: Vec<RuleState<F>>,
}

/// Reads only the JSON document (no blobs); used for inspection.
pub fn read_snapshot_doc(path: &Path) -> Result<SnapshotDoc> {
    let mut file = std::fs::File::open(path)?;
    let bytes = blob::read_header_bytes(&mut file, path, MAGIC)?;
    let doc: SnapshotDoc = serde_json::from_slice(&bytes)
        .map_err(|e| Error::MalformedHeader(format!("invalid snapshot json: {e}")))?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(doc.format_version));
    }
    Ok(doc)
}

fn collect_entries(doc: &SnapshotDoc) -> Result<Vec<TensorEntry>> {
    let mut all: Vec<TensorEntry> = doc.parameters.values().cloned().collect();
    for rule in &doc.rule_state {
        let maps: Vec<&EntryMap> = match rule {
            RuleStateEntry::Stateless {} => vec![],
            RuleStateEntry::Momentum { velocity } => vec![velocity],
            RuleStateEntry::AdaGrad { accumulator } => vec![accumulator],
            RuleStateEntry::RmsProp { accumulator } => vec![accumulator],
            RuleStateEntry::AdaDelta {
                grad_accumulator,
                delta_accumulator,
            } => vec![grad_accumulator, delta_accumulator],
            RuleStateEntry::Adam {
                first_moment,
                second_moment,
                ..
            } => vec![first_moment, second_moment],
        };
        for map in maps {
            all.extend(map.values().cloned());
        }
    }
    all.sort_by_key(|e| e.blob_index);
    for (i, entry) in all.iter().enumerate() {
        if entry.blob_index != i {
            return Err(Error::MalformedHeader(format!(
                "snapshot blob indices are not contiguous at {i}"
            )));
        }
    }
    Ok(all)
}

/// Loads a snapshot, materializing parameters and rule buffers.
pub fn load_snapshot<F: Scalar>(path: &Path) -> Result<LoadedSnapshot<F>> {
    let mut file = std::fs::File::open(path)?;
    let header = blob::read_header_bytes(&mut file, path, MAGIC)?;
    let doc: SnapshotDoc = serde_json::from_slice(&header)
        .map_err(|e| Error::MalformedHeader(format!("invalid snapshot json: {e}")))?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(doc.format_version));
    }

    let entries = collect_entries(&doc)?;
    let lens: Vec<u64> = entries.iter().map(|e| e.nbytes()).collect();
    let offsets = blob::blob_offsets(8, header.len() as u64, &lens);

    let mut tensors: Vec<Tensor<F>> = Vec::with_capacity(entries.len());
    for (entry, &offset) in entries.iter().zip(&offsets) {
        if entry.dtype != F::DTYPE {
            return Err(Error::DTypeMismatch {
                expected: F::DTYPE.name().into(),
                actual: entry.dtype.name().into(),
            });
        }
        let bytes = blob::read_range(&mut file, offset, entry.nbytes() as usize)?;
        tensors.push(Tensor::from_le_bytes(entry.shape.clone(), &bytes)?);
    }
    let fetch = |map: &EntryMap| -> BTreeMap<String, Tensor<F>> {
        map.iter()
            .map(|(k, e)| (k.clone(), tensors[e.blob_index].clone()))
            .collect()
    };

    let parameters = fetch(&doc.parameters);
    let rule_states = doc
        .rule_state
        .iter()
        .map(|rule| match rule {
            RuleStateEntry::Stateless {} => RuleState::Stateless,
            RuleStateEntry::Momentum { velocity } => RuleState::Momentum {
                velocity: fetch(velocity),
            },
            RuleStateEntry::AdaGrad { accumulator } => RuleState::AdaGrad {
                accumulator: fetch(accumulator),
            },
            RuleStateEntry::RmsProp { accumulator } => RuleState::RmsProp {
                accumulator: fetch(accumulator),
            },
            RuleStateEntry::AdaDelta {
                grad_accumulator,
                delta_accumulator,
            } => RuleState::AdaDelta {
                grad_accumulator: fetch(grad_accumulator),
                delta_accumulator: fetch(delta_accumulator),
            },
            RuleStateEntry::Adam {
                first_moment,
                second_moment,
                timestep,
            } => RuleState::Adam {
                first_moment: fetch(first_moment),
                second_moment: fetch(second_moment),
                timestep: *timestep,
            },
        })
        .collect();

    Ok(LoadedSnapshot {
        doc,
        parameters,
        rule_states,
    })
}
