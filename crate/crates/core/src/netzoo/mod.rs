//! Network definitions, checkpoints, data, training and bias analyses.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod network;
pub mod random;
pub mod spec;
pub mod train;

pub use analysis::{
    evaluate_topk, fit_output_regression, scale_shift_sweep, zero_bias, AccuracyTable, RegressionFit,
};
pub use checkpoint::{build_network, build_network_with, Checkpoint, InitOptions, ParamRole, TensorArchive};
pub use data::{ingest_idx, synth_patch_dataset, Dataset, DatasetManifest, PatchConfig, Split};
pub use random::{random_image, SpecSampler};
pub use network::{image_to_nchw, nchw_to_image, BiasSite, ForwardTrace, LayerTrace};
pub use spec::{ActShape, InputShape, LayerSpec, Layout, NetworkSpec};
pub use train::{train_classifier, OptimizerKind, TrainConfig, TrainOutcome};
