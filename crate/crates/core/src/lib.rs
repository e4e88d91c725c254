//! Deterministic data pipelines and bit-reproducible gradient-descent
//! training.
//!
//! The crate bundles four pieces that usually live in separate libraries:
//!
//! * a bit-exact dataset container format ([`container`]) with download,
//!   convert, validate, and info tooling ([`registry`]);
//! * serializable iteration schemes and stream transformers ([`iteration`],
//!   [`stream`]), plus a TCP server that runs a pipeline in its own process
//!   and streams items over a length-prefixed binary protocol ([`server`]);
//! * an annotated reverse-mode computational graph with role-based queries
//!   and model-agnostic regularization rewrites ([`graph`], [`bricks`]);
//! * composable optimizer step rules ([`steprules`]) and a checkpointable
//!   main loop ([`mainloop`]) whose resumption is bit-identical to an
//!   uninterrupted run.
//!
//! Training math is generic over [`tensor::Scalar`] (`f32` or `f64`); the
//! aliases at the crate root pin the default `f64` precision used by the
//! CLI and the test suite.

pub mod blob;
pub mod bricks;
pub mod container;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod iteration;
pub mod mainloop;
pub mod model;
pub mod registry;
pub mod rng;
pub mod server;
pub mod spec;
pub mod steprules;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Item, TensorData, Value};

/// Default training precision.
pub type DefaultScalar = f64;

pub type Tensor = tensor::Tensor<DefaultScalar>;
pub type Graph = graph::Graph<DefaultScalar>;
pub type ParamStore = bricks::ParamStore<DefaultScalar>;
pub type ChainState = steprules::ChainState<DefaultScalar>;
pub type Model = model::Model<DefaultScalar>;
pub type MainLoop = mainloop::MainLoop<DefaultScalar>;
