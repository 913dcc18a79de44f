//! Training of Lipschitz-constrained feed-forward networks under
//! differential privacy without per-sample gradient clipping.
//!
//! Per-layer gradient-norm bounds are certified analytically by propagating
//! activation-norm bounds forward and cotangent-norm bounds backward
//! through the network; the resulting sensitivities calibrate Gaussian
//! noise whose privacy cost is tracked by a Rényi-DP accountant.
//!
//! Modules:
//! - [`numerics`]: tensors, power iteration, Björck orthonormalization,
//!   convolution and projection primitives.
//! - [`layers`]: the Lipschitz layer catalog and the `Network` container.
//! - [`losses`]: classification losses with analytic Lipschitz constants.
//! - [`bounds`]: the bound-backpropagation engine and closed-form
//!   cross-checks.
//! - [`accountant`]: Rényi-DP accounting and budget inversion.
//! - [`trainer`]: the projected DP-SGD loops and runtime auditing.
//! - [`data`]: dataset ingestion, preprocessing and seeded batching.
//! - [`oracles`]: independent brute-force references used for validation.

// Index-based loops are kept where they mirror the matrix/tensor math
// more directly than iterator chains.
#![allow(clippy::needless_range_loop)]

pub mod accountant;
pub mod bounds;
pub mod data;
pub mod layers;
pub mod losses;
pub mod numerics;
pub mod oracles;
pub mod trainer;

pub use accountant::{AccountantParams, AccountantState, RdpCurve, Strategy};
pub use bounds::{Neighboring, SensitivityReport, TheoremInputs};
pub use data::{Dataset, Preprocess};
pub use layers::{
    make_residual, ConvMode, LayerDescriptor, MergeRule, Network, ProjectionSettings,
};
pub use losses::LossKind;
pub use numerics::{Padding, PowerIterationState, Tensor};
pub use trainer::{fit, BoundsRefresh, DpTrainer, EpochMetrics, TrainConfig};
