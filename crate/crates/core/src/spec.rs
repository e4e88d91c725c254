//! Serializable pipeline descriptions.
//!
//! A pipeline crosses process boundaries (TCP server, CLI, snapshots) as a
//! JSON spec, never as live objects; building the same spec twice yields
//! identical pipelines.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::{Backend, Dataset};
use crate::error::Result;
use crate::iteration::{LastBatchPolicy, Scheme};
use crate::stream::{CropLayout, Stream, Transformer};

fn default_policy() -> LastBatchPolicy {
    LastBatchPolicy::Keep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemeSpec {
    Sequential {
        batch_size: usize,
        #[serde(default = "default_policy")]
        policy: LastBatchPolicy,
    },
    Shuffled {
        batch_size: usize,
        seed: u64,
        #[serde(default = "default_policy")]
        policy: LastBatchPolicy,
    },
    Bootstrap {
        batch_size: usize,
        seed: u64,
        #[serde(default = "default_policy")]
        policy: LastBatchPolicy,
    },
    /// Sequential over an explicit index list (cross-validation folds).
    SequentialIndices {
        indices: Vec<usize>,
        batch_size: usize,
        #[serde(default = "default_policy")]
        policy: LastBatchPolicy,
    },
}

impl SchemeSpec {
    pub fn build(&self, num_examples: usize) -> Result<Scheme> {
        match self {
            SchemeSpec::Sequential { batch_size, policy } => {
                Scheme::sequential(num_examples, *batch_size, *policy)
            }
            SchemeSpec::Shuffled {
                batch_size,
                seed,
                policy,
            } => Scheme::shuffled(num_examples, *batch_size, *seed, *policy),
            SchemeSpec::Bootstrap {
                batch_size,
                seed,
                policy,
            } => Scheme::bootstrap(num_examples, *batch_size, *seed, *policy),
            SchemeSpec::SequentialIndices {
                indices,
                batch_size,
                policy,
            } => Scheme::sequential_indices(indices.clone(), *batch_size, *policy),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformerSpec {
    Mapping {
        function: String,
        #[serde(default)]
        params: serde_json::Value,
    },
    Batch {
        size: usize,
        #[serde(default = "default_policy")]
        policy: LastBatchPolicy,
    },
    Padding {
        #[serde(default)]
        pad_value: f64,
        #[serde(default)]
        exempt: Vec<String>,
    },
    Ngrams {
        n: usize,
        source: String,
    },
    RandomCrop {
        source: String,
        height: usize,
        width: usize,
        seed: u64,
        #[serde(default)]
        layout: CropLayout,
    },
}

impl TransformerSpec {
    pub fn build(&self) -> Result<Transformer> {
        match self {
            TransformerSpec::Mapping { function, params } => {
                Transformer::mapping(function, params.clone())
            }
            TransformerSpec::Batch { size, policy } => Transformer::batch(*size, *policy),
            TransformerSpec::Padding { pad_value, exempt } => {
                Ok(Transformer::padding(*pad_value, exempt.clone()))
            }
            TransformerSpec::Ngrams { n, source } => Transformer::ngrams(*n, source.clone()),
            TransformerSpec::RandomCrop {
                source,
                height,
                width,
                seed,
                layout,
            } => Transformer::random_crop(source.clone(), *height, *width, *seed, *layout),
        }
    }
}

/// Complete description of a pipeline: container, split, scheme,
/// transformer chain, and an optional epoch budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub container: PathBuf,
    pub split: String,
    #[serde(default)]
    pub backend: Backend,
    pub scheme: SchemeSpec,
    /// `None` = endless epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transformers: Vec<TransformerSpec>,
}

impl PipelineSpec {
    pub fn build(&self) -> Result<Stream> {
        let dataset = Dataset::open(&self.container, &self.split, self.backend)?;
        let scheme = self.scheme.build(dataset.num_examples())?;
        let mut stream = Stream::base(dataset, scheme, self.epochs)?;
        for spec in &self.transformers {
            stream = stream.with(spec.build()?);
        }
        Ok(stream)
    }

    /// Canonical JSON value, used for snapshot integrity checks.
    pub fn to_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_json_round_trip() {
        let spec = PipelineSpec {
            container: PathBuf::from("data/synth-blobs.bfdc"),
            split: "train".into(),
            backend: Backend::OutOfCore,
            scheme: SchemeSpec::Shuffled {
                batch_size: 16,
                seed: 7,
                policy: LastBatchPolicy::Keep,
            },
            epochs: Some(3),
            transformers: vec![
                TransformerSpec::Mapping {
                    function: "one_hot".into(),
                    params: serde_json::json!({"source": "targets", "classes": 2}),
                },
                TransformerSpec::Batch {
                    size: 4,
                    policy: LastBatchPolicy::Drop,
                },
            ],
        };
        let json = serde_json::to_string_pretty(&spec).unwrap();
        let back: PipelineSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn defaults_fill_in() {
        let json = serde_json::json!({
            "container": "c.bfdc",
            "split": "train",
            "scheme": {"kind": "sequential", "batch_size": 2},
        });
        let spec: PipelineSpec = serde_json::from_value(json).unwrap();
        assert_eq!(spec.backend, Backend::InMemory);
        assert_eq!(spec.epochs, None);
        assert!(spec.transformers.is_empty());
    }

    #[test]
    fn explicit_index_schemes_and_casts_build_and_run() {
        use crate::container::{
            write_container, Interval, Provenance, SourcePayload, SplitDescriptor,
        };
        use crate::stream::StreamItem;
        use crate::tensor::{DType, Tensor, Value};
        use std::collections::BTreeMap;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bfdc");
        let per_source: BTreeMap<String, Option<Interval>> =
            [("x".to_string(), Some(Interval { start: 0, stop: 6 }))]
                .into_iter()
                .collect();
        write_container(
            &path,
            &[SourcePayload {
                name: "x".into(),
                axis_labels: vec!["batch".into(), "value".into()],
                data: Tensor::new(vec![6, 1], (0..6).map(f64::from).collect())
                    .unwrap()
                    .into(),
            }],
            &[SplitDescriptor {
                name: "all".into(),
                per_source,
            }],
            &Provenance {
                created_by: "t".into(),
                command_line: "t".into(),
            },
        )
        .unwrap();

        // a cross-validation-style fold: explicit indices, cast to f32
        let spec = PipelineSpec {
            container: path,
            split: "all".into(),
            backend: Backend::InMemory,
            scheme: SchemeSpec::SequentialIndices {
                indices: vec![1, 3, 5],
                batch_size: 2,
                policy: LastBatchPolicy::Keep,
            },
            epochs: Some(1),
            transformers: vec![TransformerSpec::Mapping {
                function: "cast_to".into(),
                params: serde_json::json!({"dtype": "f32"}),
            }],
        };
        let mut stream = spec.build().unwrap();
        let mut rows = Vec::new();
        while let Some(step) = stream.next().unwrap() {
            if let StreamItem::Item(item) = step {
                match &item["x"] {
                    Value::Tensor(t) => {
                        assert_eq!(t.dtype(), DType::F32);
                        rows.push(t.cast_scalar::<f64>().into_data());
                    }
                    Value::List(_) => panic!("unexpected ragged value"),
                }
            }
        }
        assert_eq!(rows, vec![vec![1.0, 3.0], vec![5.0]]);

        // an out-of-range index is caught when the stream is built
        let mut bad = spec.clone();
        bad.scheme = SchemeSpec::SequentialIndices {
            indices: vec![0, 9],
            batch_size: 1,
            policy: LastBatchPolicy::Keep,
        };
        assert!(bad.build().is_err());
    }

    #[test]
    fn bad_transformer_fails_at_build() {
        let spec = PipelineSpec {
            container: PathBuf::from("missing.bfdc"),
            split: "train".into(),
            backend: Backend::InMemory,
            scheme: SchemeSpec::Sequential {
                batch_size: 1,
                policy: LastBatchPolicy::Keep,
            },
            epochs: None,
            transformers: vec![],
        };
        assert!(spec.build().is_err()); // container does not exist
    }
}
