//! Attribution maps, the perturb-until-flip evaluation and bias decay for
//! small piecewise-linear classifiers.
//!
//! Networks are described by [`NetworkSpec`], instantiated as a
//! [`Checkpoint`] and evaluated on a recording [`graph::Graph`], from which
//! [`Explainer`] reads gradients, activity and bias attributions.

pub mod attribution;
pub mod decay;
pub mod error;
pub mod eval;
pub mod graph;
pub mod netzoo;
pub mod ops;
pub mod resize;
pub mod tensor;

pub use attribution::{AttributionKind, AttributionMap, DecompositionReport, Explainer, PsiConfig, SaliencyMap};
pub use decay::{run_decay, DecaySchedule, DistillConfig, TrajectoryRow};
pub use error::{Error, Result};
pub use eval::{EvalConfig, EvalRecord, Method, MethodComparison, Metric, PerturbConfig};
pub use netzoo::{Checkpoint, Dataset, InputShape, NetworkSpec};
pub use resize::{resize_map, ResizeMode};
pub use tensor::Tensor;
