//! Quantized MLP training, streamlining to integer-only inference and a
//! folded-dataflow hardware cost model.
//!
//! Pipeline: [`datasets`] feeds [`trainer`], which fits a [`model::NetworkSpec`]
//! with fake-quantized weights and activations. [`streamline`] compiles the
//! trained network into an [`streamline::IntegerNetwork`] and [`hwsim`]
//! estimates its throughput and resources on a board. [`sweep`] runs the
//! whole grid of bit-widths and foldings.

pub mod container;
pub mod datasets;
pub mod error;
pub mod hwsim;
pub mod model;
pub mod numerics;
pub mod quantizers;
pub mod streamline;
pub mod sweep;
pub mod trainer;

pub use datasets::{DatasetHandle, DatasetKind, Split};
pub use error::{Error, Result};
pub use hwsim::{BoardBudget, FoldingConfig, LogicCostModel, NetworkDims, ResourceReport};
pub use model::{build_mlp, NetworkSpec};
pub use numerics::{Rng, Tensor};
pub use quantizers::{QuantSpec, QuantizedTensor, ThresholdSet};
pub use streamline::{streamline, verify_equivalence, IntegerNetwork};
pub use sweep::{run_sweep, SweepPlan};
pub use trainer::{TrainConfig, TrainLog};
