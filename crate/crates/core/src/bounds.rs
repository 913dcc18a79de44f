//! Bound backpropagation: replays the chain rule with scalar norm bounds.
//! A forward pass propagates activation-norm bounds, a backward pass
//! propagates cotangent-norm bounds, and their product with per-layer
//! parameter-Jacobian constants yields per-layer sensitivities.
//!
//! The closed-form expressions for dense chains live here as well and act
//! as independent cross-checks on the layer-by-layer cascade.

use crate::layers::{LayerDescriptor, ModelError, Network};
use crate::losses::LossKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, BoundsError>;

/// Dataset adjacency relation used for sensitivity accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Neighboring {
    /// One record swapped for another; sensitivity carries a factor 2.
    ReplaceOne,
    /// One record added or removed; factor 1.
    AddRemove,
}

impl Neighboring {
    pub fn factor(&self) -> f64 {
        match self {
            Neighboring::ReplaceOne => 2.0,
            Neighboring::AddRemove => 1.0,
        }
    }
}

/// Per-layer outcome of the bound backpropagation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// Activation-norm bounds X_0 .. X_D (input bound first, one entry per
    /// layer output after it).
    pub per_layer_input_bound: Vec<f64>,
    /// Cotangent-norm bound seen at each layer's output during the backward
    /// cascade, in layer order.
    pub per_layer_backward_factor: Vec<f64>,
    /// Per-layer sensitivities of the batch-mean gradient query; zero for
    /// parameterless layers.
    pub per_layer_sensitivity: Vec<f64>,
    /// Euclidean aggregation of the per-layer sensitivities.
    pub global_sensitivity: f64,
    pub batch_size: usize,
    pub loss_constant: f64,
    pub neighboring_factor: f64,
}

impl SensitivityReport {
    /// Per-sample gradient-norm bound for layer `d`, recovered from the
    /// batch-mean sensitivity.
    pub fn per_sample_bound(&self, layer: usize) -> f64 {
        self.per_layer_sensitivity[layer] * self.batch_size as f64 / self.neighboring_factor
    }

    /// Indices of layers that receive noise, i.e. layers with parameters
    /// and a positive sensitivity.
    pub fn noised_layers(&self) -> usize {
        self.per_layer_sensitivity
            .iter()
            .filter(|&&d| d > 0.0)
            .count()
    }
}

/// Euclidean aggregation of per-layer sensitivities.
pub fn global_sensitivity(report: &SensitivityReport) -> f64 {
    aggregate(&report.per_layer_sensitivity)
}

fn aggregate(deltas: &[f64]) -> f64 {
    let mut acc = 0.0;
    for d in deltas {
        acc += d * d;
    }
    acc.sqrt()
}

/// Forward bound pass, backward cascade, per-layer sensitivities.
///
/// The backward bound starts at `factor * L / b` where `factor` is the
/// neighboring-relation constant and `L` the loss Lipschitz constant, so
/// every reported sensitivity is that of the batch-mean gradient query.
/// Gradient-clip layers cap the cascade at `factor * C / b`.
pub fn backpropagation_for_bounds(
    network: &mut Network,
    input_bound: f64,
    loss: &LossKind,
    batch_size: usize,
    neighboring: Neighboring,
) -> Result<SensitivityReport> {
    if batch_size == 0 {
        return Err(BoundsError::InvalidArgument(
            "batch_size must be at least 1".into(),
        ));
    }
    if input_bound < 0.0 {
        return Err(BoundsError::InvalidArgument(
            "input bound must be non-negative".into(),
        ));
    }
    loss.validate()
        .map_err(|e| BoundsError::InvalidArgument(e.to_string()))?;
    network.verify_constraints(1e-6)?;

    let n = network.depth();
    let factor = neighboring.factor();
    let b = batch_size as f64;
    let loss_constant = loss.lipschitz_constant();

    // Forward pass: X_d per layer, with a stack of skip bounds.
    let mut input_bounds = Vec::with_capacity(n + 1);
    input_bounds.push(input_bound);
    let mut x = input_bound;
    let mut skip_bounds: Vec<f64> = Vec::new();
    for layer in network.layers() {
        x = match &layer.desc {
            LayerDescriptor::ResidualSplit => {
                skip_bounds.push(x);
                x
            }
            LayerDescriptor::ResidualMerge { rule } => {
                let skip = skip_bounds.pop().expect("balanced residuals");
                rule.factor() * (x + skip)
            }
            _ => layer.propagate_input_bound(x),
        };
        input_bounds.push(x);
    }

    // Backward pass: cotangent bound cascade with per-layer sensitivities.
    let mut sensitivities = vec![0.0; n];
    let mut backward = vec![0.0; n];
    let mut g = factor * loss_constant / b;
    let mut skip_cotangents: Vec<f64> = Vec::new();
    for i in (0..n).rev() {
        let layer = &network.layers()[i];
        backward[i] = g;
        match &layer.desc {
            LayerDescriptor::ResidualMerge { rule } => {
                let f = rule.factor();
                g *= f;
                skip_cotangents.push(g);
            }
            LayerDescriptor::ResidualSplit => {
                let skip = skip_cotangents.pop().expect("balanced residuals");
                g += skip;
            }
            LayerDescriptor::ClipGradient { clip } => {
                g = g.min(factor * clip / b);
            }
            _ => {
                sensitivities[i] = g * layer.jacobian_param_bound(input_bounds[i]);
                g *= layer.jacobian_input_bound();
            }
        }
    }

    let global = aggregate(&sensitivities);
    Ok(SensitivityReport {
        per_layer_input_bound: input_bounds,
        per_layer_backward_factor: backward,
        per_layer_sensitivity: sensitivities,
        global_sensitivity: global,
        batch_size,
        loss_constant,
        neighboring_factor: factor,
    })
}

/// Inputs for the closed-form dense-chain bounds: `T` affine blocks with
/// spectral norm `U`, bias norms at most `B`, activations `S`-Lipschitz and
/// zero at zero, input norm at most `X`, loss constant `L`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TheoremInputs {
    pub s: f64,
    pub u: f64,
    pub b: f64,
    pub x: f64,
    pub t: usize,
    pub l: f64,
}

impl TheoremInputs {
    pub fn alpha(&self) -> f64 {
        self.s * self.u
    }
}

/// Norm bound on the activation after `t` blocks of the recursion
/// `h <- S (U h + B)` started at `h = X`.
pub fn activation_norm_bound(t: usize, s: f64, u: f64, b: f64, x: f64) -> f64 {
    let alpha = s * u;
    if (alpha - 1.0).abs() < 1e-12 {
        s * x + t as f64 * s * b
    } else {
        let beta = s * b / (1.0 - alpha);
        alpha.powi(t as i32) * (x - beta) + beta
    }
}

/// Explicit non-asymptotic bound on the whole per-sample gradient vector of
/// a dense chain, split on the contraction factor `alpha = S U`.
pub fn theoretical_gradient_bound(inputs: &TheoremInputs) -> f64 {
    let TheoremInputs { s, u: _, b, x, t, l } = *inputs;
    if l == 0.0 {
        return 0.0;
    }
    let alpha = inputs.alpha();
    let tf = t as f64;
    if (alpha - 1.0).abs() < 1e-9 {
        let sum = 1.0
            + x * x
            + tf * (1.0 + s * s * x * x)
            + s * s * b * x * tf * (tf + 1.0)
            + s * s * b * b * tf * (tf + 1.0) * (2.0 * tf + 1.0) / 6.0;
        l * sum.sqrt()
    } else {
        let beta = s * b / (1.0 - alpha);
        let geo1 = (alpha - alpha.powi(-(t as i32))) / (alpha - 1.0);
        let geo2 = (alpha * alpha - alpha.powi(-2 * t as i32)) / (alpha * alpha - 1.0);
        let sum = (tf + 1.0) * (x - beta) * (x - beta)
            + 2.0 * (x - beta) * beta * geo1
            + (beta * beta + 1.0) * geo2;
        l * alpha.powi(t as i32) * sum.sqrt()
    }
}

/// Tail probability that the batch-mean gradient deviates from its
/// expectation by more than `u` times the per-sample bound.
pub fn concentration_tail(u: f64, batch_size: usize) -> Result<f64> {
    if batch_size == 0 {
        return Err(BoundsError::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    let sqrt_b = (batch_size as f64).sqrt();
    let threshold = 2.0 / sqrt_b;
    if u < threshold {
        return Err(BoundsError::InvalidArgument(format!(
            "tail bound applies for u >= 2/sqrt(b) = {threshold}, got {u}"
        )));
    }
    let d = u - threshold;
    Ok((-(sqrt_b / 8.0) * d * d).exp())
}
