//! Catalog of Lipschitz layers and the `Network` container.
//!
//! Every layer exposes five behaviors: forward evaluation, vector-Jacobian
//! product (reverse mode), input-bound propagation, input-Jacobian bound,
//! parameter-Jacobian bound, and projection onto its constraint set.

use crate::numerics::{
    bjorck_orthonormalize, conv2d_input_adjoint, conv2d_kernel_gradient, conv2d_with_geometry,
    matvec, matvec_transpose, power_iteration, project_bias, spectral_norm, ConvGeometry,
    NumericsError, Padding, PowerIterationState, Tensor, PROJECTION_SLACK,
};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error at layer {layer}: {message}")]
    Shape { layer: usize, message: String },
    #[error("invalid layer descriptor at layer {layer}: {message}")]
    InvalidDescriptor { layer: usize, message: String },
    #[error("unbalanced residual split/merge structure")]
    UnbalancedResidual,
    #[error("projection did not converge at layer {layer}: residual {residual}")]
    ProjectionNonConvergence { layer: usize, residual: f64 },
    #[error("Lipschitz constraint violated at layer {layer}: sigma {sigma} > {target} (tol {tol})")]
    ConstraintViolated {
        layer: usize,
        sigma: f64,
        target: f64,
        tol: f64,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How the two paths of a residual block are recombined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeRule {
    /// `y = branch + skip`; backward bound doubles.
    PlainAdd,
    /// `y = 0.5 (branch + skip)`; keeps the block 1-Lipschitz.
    OneLipAdd,
}

impl MergeRule {
    pub fn factor(&self) -> f64 {
        match self {
            MergeRule::PlainAdd => 1.0,
            MergeRule::OneLipAdd => 0.5,
        }
    }
}

/// Constraint regime of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    /// Spectral norm of the full linear operator constrained by projection.
    Plain,
    /// Reshaped-kernel orthogonalization with a fixed 1/sqrt(window)
    /// rescale that keeps the operator within its Lipschitz target.
    Rko,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDescriptor {
    /// Forward identity inside the ball of radius `bound`; inputs beyond it
    /// are radially projected back.
    BoundedInput { bound: f64 },
    SpectralDense { units: usize, lipschitz: f64 },
    OrthoDense { units: usize, lipschitz: f64 },
    SpectralConv2D {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        mode: ConvMode,
        lipschitz: f64,
    },
    Bias { bound: f64 },
    GroupSort2,
    ReLU,
    Tanh,
    ScaledL2NormPooling2D { pool: (usize, usize) },
    LayerCentering,
    Flatten,
    /// Identity at the forward pass; rescales the cotangent to norm at most
    /// `clip` in the backward pass.
    ClipGradient { clip: f64 },
    ResidualSplit,
    ResidualMerge { rule: MergeRule },
}

impl LayerDescriptor {
    pub fn name(&self) -> &'static str {
        match self {
            LayerDescriptor::BoundedInput { .. } => "bounded_input",
            LayerDescriptor::SpectralDense { .. } => "spectral_dense",
            LayerDescriptor::OrthoDense { .. } => "ortho_dense",
            LayerDescriptor::SpectralConv2D { .. } => "spectral_conv2d",
            LayerDescriptor::Bias { .. } => "bias",
            LayerDescriptor::GroupSort2 => "group_sort2",
            LayerDescriptor::ReLU => "relu",
            LayerDescriptor::Tanh => "tanh",
            LayerDescriptor::ScaledL2NormPooling2D { .. } => "scaled_l2_norm_pooling2d",
            LayerDescriptor::LayerCentering => "layer_centering",
            LayerDescriptor::Flatten => "flatten",
            LayerDescriptor::ClipGradient { .. } => "clip_gradient",
            LayerDescriptor::ResidualSplit => "residual_split",
            LayerDescriptor::ResidualMerge { .. } => "residual_merge",
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let fail = |message: String| {
            Err(ModelError::InvalidDescriptor {
                layer: index,
                message,
            })
        };
        match self {
            LayerDescriptor::BoundedInput { bound } if *bound <= 0.0 => {
                fail(format!("input bound must be positive, got {bound}"))
            }
            LayerDescriptor::SpectralDense { units, lipschitz }
            | LayerDescriptor::OrthoDense { units, lipschitz } => {
                if *units == 0 {
                    fail("units must be positive".into())
                } else if *lipschitz <= 0.0 {
                    fail(format!("lipschitz target must be positive, got {lipschitz}"))
                } else {
                    Ok(())
                }
            }
            LayerDescriptor::SpectralConv2D {
                filters,
                kernel,
                stride,
                lipschitz,
                ..
            } => {
                if *filters == 0 || kernel.0 == 0 || kernel.1 == 0 {
                    fail("filters and kernel dims must be positive".into())
                } else if stride.0 == 0 || stride.1 == 0 {
                    fail("strides must be positive".into())
                } else if *lipschitz <= 0.0 {
                    fail(format!("lipschitz target must be positive, got {lipschitz}"))
                } else {
                    Ok(())
                }
            }
            LayerDescriptor::Bias { bound } if *bound < 0.0 => {
                fail(format!("bias bound must be non-negative, got {bound}"))
            }
            LayerDescriptor::ScaledL2NormPooling2D { pool } => {
                if pool.0 == 0 || pool.1 == 0 {
                    fail("pool dims must be positive".into())
                } else {
                    Ok(())
                }
            }
            LayerDescriptor::ClipGradient { clip } if *clip <= 0.0 => {
                fail(format!("clip constant must be positive, got {clip}"))
            }
            _ => Ok(()),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerDescriptor::SpectralDense { .. }
                | LayerDescriptor::OrthoDense { .. }
                | LayerDescriptor::SpectralConv2D { .. }
                | LayerDescriptor::Bias { .. }
        )
    }
}

/// Convenience constructor for a residual block: wraps `inner` between a
/// split and a merge. The inner layers must preserve the activation shape,
/// which is checked when the network is built.
pub fn make_residual(
    inner: Vec<LayerDescriptor>,
    rule: MergeRule,
) -> Vec<LayerDescriptor> {
    let mut out = Vec::with_capacity(inner.len() + 2);
    out.push(LayerDescriptor::ResidualSplit);
    out.extend(inner);
    out.push(LayerDescriptor::ResidualMerge { rule });
    out
}

/// A layer descriptor bound to concrete shapes, parameters and caches.
#[derive(Debug, Clone)]
pub struct Layer {
    pub desc: LayerDescriptor,
    pub weight: Option<Tensor>,
    pub pi_state: Option<PowerIterationState>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    conv_geo: Option<ConvGeometry>,
}

/// Settings for the projection step. The cold budget is spent the first
/// time; warm-started calls typically converge within a few iterations.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionSettings {
    pub pi_max_iters: usize,
    pub pi_tol: f64,
    pub bjorck_iters: usize,
    pub bjorck_tol: f64,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        Self {
            pi_max_iters: crate::numerics::PI_MAX_ITERS_COLD,
            pi_tol: crate::numerics::PI_TOL,
            bjorck_iters: 60,
            bjorck_tol: 1e-9,
        }
    }
}

impl ProjectionSettings {
    /// Tight settings used when projecting at initialization, where the
    /// certificate is about to be derived from the constraint.
    pub fn strict() -> Self {
        Self {
            pi_max_iters: 1000,
            pi_tol: 1e-12,
            bjorck_iters: 80,
            bjorck_tol: 1e-10,
        }
    }
}

impl Layer {
    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// Fixed architectural output scale: 1 everywhere except RKO
    /// convolutions, whose stored kernel is orthogonal in reshaped form and
    /// is applied with a `lipschitz / sqrt(window)` factor.
    fn arch_scale(&self) -> f64 {
        match &self.desc {
            LayerDescriptor::SpectralConv2D {
                mode: ConvMode::Rko,
                kernel,
                lipschitz,
                ..
            } => lipschitz / ((kernel.0 * kernel.1) as f64).sqrt(),
            _ => 1.0,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.in_shape.as_slice() {
            return Err(ModelError::Shape {
                layer: usize::MAX,
                message: format!(
                    "forward input shape {:?} does not match layer input {:?}",
                    x.shape(),
                    self.in_shape
                ),
            });
        }
        match &self.desc {
            LayerDescriptor::BoundedInput { bound } => {
                let n = x.norm();
                if n > *bound {
                    Ok(x.scale(bound / n))
                } else {
                    Ok(x.clone())
                }
            }
            LayerDescriptor::SpectralDense { .. } | LayerDescriptor::OrthoDense { .. } => {
                let w = self.weight.as_ref().expect("dense layer has weight");
                let y = matvec(w, x.data())?;
                Ok(Tensor::from_vec(y))
            }
            LayerDescriptor::SpectralConv2D { .. } => {
                let k = self.weight.as_ref().expect("conv layer has kernel");
                let geo = self.conv_geo.as_ref().expect("conv geometry");
                let mut y = conv2d_with_geometry(x, k, geo)?;
                let s = self.arch_scale();
                if s != 1.0 {
                    y.scale_in_place(s);
                }
                Ok(y)
            }
            LayerDescriptor::Bias { .. } => {
                let b = self.weight.as_ref().expect("bias layer has vector");
                let mut y = x.clone();
                for (v, bv) in y.data_mut().iter_mut().zip(b.data()) {
                    *v += bv;
                }
                Ok(y)
            }
            LayerDescriptor::GroupSort2 => {
                let mut y = x.clone();
                let d = y.data_mut();
                for p in (0..d.len()).step_by(2) {
                    if d[p] > d[p + 1] {
                        d.swap(p, p + 1);
                    }
                }
                Ok(y)
            }
            LayerDescriptor::ReLU => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                Ok(y)
            }
            LayerDescriptor::Tanh => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    *v = v.tanh();
                }
                Ok(y)
            }
            LayerDescriptor::ScaledL2NormPooling2D { pool } => {
                let (h, w, c) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (ph, pw) = *pool;
                let (oh, ow) = (h / ph, w / pw);
                let mut out = Tensor::zeros(vec![oh, ow, c]);
                for oi in 0..oh {
                    for oj in 0..ow {
                        for ch in 0..c {
                            let mut acc = 0.0;
                            for a in 0..ph {
                                for b in 0..pw {
                                    let v = x.data()[((oi * ph + a) * w + (oj * pw + b)) * c + ch];
                                    acc += v * v;
                                }
                            }
                            out.data_mut()[(oi * ow + oj) * c + ch] = acc.sqrt();
                        }
                    }
                }
                Ok(out)
            }
            LayerDescriptor::LayerCentering => {
                let mut acc = 0.0;
                for v in x.data() {
                    acc += v;
                }
                let mean = acc / x.len() as f64;
                let mut y = x.clone();
                for v in y.data_mut() {
                    *v -= mean;
                }
                Ok(y)
            }
            LayerDescriptor::Flatten => Ok(x.reshape(self.out_shape.clone())?),
            LayerDescriptor::ClipGradient { .. } => Ok(x.clone()),
            LayerDescriptor::ResidualSplit | LayerDescriptor::ResidualMerge { .. } => {
                unreachable!("residual plumbing is handled by Network")
            }
        }
    }

    /// Reverse-mode product: returns the input cotangent and, for
    /// parameterized layers, the per-sample parameter gradient.
    pub fn vjp(&self, x: &Tensor, cotangent: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        if cotangent.shape() != self.out_shape.as_slice() {
            return Err(ModelError::Shape {
                layer: usize::MAX,
                message: format!(
                    "cotangent shape {:?} does not match layer output {:?}",
                    cotangent.shape(),
                    self.out_shape
                ),
            });
        }
        match &self.desc {
            LayerDescriptor::BoundedInput { bound } => {
                let n = x.norm();
                if n <= *bound {
                    Ok((cotangent.clone(), None))
                } else {
                    // Jacobian of the radial projection b x / ||x||:
                    // (b/||x||) (I - x x^T / ||x||^2).
                    let scale = bound / n;
                    let xg = x.dot(cotangent)?;
                    let mut gin = cotangent.scale(scale);
                    gin.axpy_in_place(-scale * xg / (n * n), x)?;
                    Ok((gin, None))
                }
            }
            LayerDescriptor::SpectralDense { .. } | LayerDescriptor::OrthoDense { .. } => {
                let w = self.weight.as_ref().expect("dense layer has weight");
                let gin = matvec_transpose(w, cotangent.data())?;
                let (units, input) = (w.shape()[0], w.shape()[1]);
                let mut gw = vec![0.0; units * input];
                for r in 0..units {
                    let gr = cotangent.data()[r];
                    for c in 0..input {
                        gw[r * input + c] = gr * x.data()[c];
                    }
                }
                Ok((
                    Tensor::from_vec(gin),
                    Some(Tensor::matrix(units, input, gw)?),
                ))
            }
            LayerDescriptor::SpectralConv2D { .. } => {
                let k = self.weight.as_ref().expect("conv layer has kernel");
                let geo = self.conv_geo.as_ref().expect("conv geometry");
                let s = self.arch_scale();
                let g = if s != 1.0 {
                    cotangent.scale(s)
                } else {
                    cotangent.clone()
                };
                let gin = conv2d_input_adjoint(&g, k, geo)?;
                let gk = conv2d_kernel_gradient(x, &g, geo)?;
                Ok((gin, Some(gk)))
            }
            LayerDescriptor::Bias { .. } => Ok((cotangent.clone(), Some(cotangent.clone()))),
            LayerDescriptor::GroupSort2 => {
                let mut gin = Tensor::zeros(self.in_shape.clone());
                let xd = x.data();
                let gd = cotangent.data();
                let out = gin.data_mut();
                for p in (0..xd.len()).step_by(2) {
                    // Stable tie-breaking: equal pairs keep original order,
                    // so the gradient routes back to original positions.
                    if xd[p] > xd[p + 1] {
                        out[p] = gd[p + 1];
                        out[p + 1] = gd[p];
                    } else {
                        out[p] = gd[p];
                        out[p + 1] = gd[p + 1];
                    }
                }
                Ok((gin, None))
            }
            LayerDescriptor::ReLU => {
                let mut gin = cotangent.clone();
                for (g, v) in gin.data_mut().iter_mut().zip(x.data()) {
                    if *v <= 0.0 {
                        *g = 0.0;
                    }
                }
                Ok((gin, None))
            }
            LayerDescriptor::Tanh => {
                let mut gin = cotangent.clone();
                for (g, v) in gin.data_mut().iter_mut().zip(x.data()) {
                    let t = v.tanh();
                    *g *= 1.0 - t * t;
                }
                Ok((gin, None))
            }
            LayerDescriptor::ScaledL2NormPooling2D { pool } => {
                let (h, w, c) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (ph, pw) = *pool;
                let (oh, ow) = (h / ph, w / pw);
                let mut gin = Tensor::zeros(self.in_shape.clone());
                for oi in 0..oh {
                    for oj in 0..ow {
                        for ch in 0..c {
                            let mut acc = 0.0;
                            for a in 0..ph {
                                for b in 0..pw {
                                    let v = x.data()[((oi * ph + a) * w + (oj * pw + b)) * c + ch];
                                    acc += v * v;
                                }
                            }
                            let norm = acc.sqrt();
                            if norm == 0.0 {
                                continue;
                            }
                            let g = cotangent.data()[(oi * ow + oj) * c + ch];
                            for a in 0..ph {
                                for b in 0..pw {
                                    let idx = ((oi * ph + a) * w + (oj * pw + b)) * c + ch;
                                    gin.data_mut()[idx] = g * x.data()[idx] / norm;
                                }
                            }
                        }
                    }
                }
                Ok((gin, None))
            }
            LayerDescriptor::LayerCentering => {
                let mut acc = 0.0;
                for v in cotangent.data() {
                    acc += v;
                }
                let mean = acc / cotangent.len() as f64;
                let mut gin = cotangent.clone();
                for v in gin.data_mut() {
                    *v -= mean;
                }
                Ok((gin, None))
            }
            LayerDescriptor::Flatten => Ok((cotangent.reshape(self.in_shape.clone())?, None)),
            LayerDescriptor::ClipGradient { clip } => {
                let n = cotangent.norm();
                let gin = if n > *clip {
                    cotangent.scale(clip / n)
                } else {
                    cotangent.clone()
                };
                Ok((gin, None))
            }
            LayerDescriptor::ResidualSplit | LayerDescriptor::ResidualMerge { .. } => {
                unreachable!("residual plumbing is handled by Network")
            }
        }
    }

    /// Upper bound on the output norm given an input-norm bound.
    pub fn propagate_input_bound(&self, x_in: f64) -> f64 {
        match &self.desc {
            LayerDescriptor::BoundedInput { bound } => x_in.min(*bound),
            LayerDescriptor::SpectralDense { lipschitz, .. }
            | LayerDescriptor::OrthoDense { lipschitz, .. }
            | LayerDescriptor::SpectralConv2D { lipschitz, .. } => lipschitz * x_in,
            LayerDescriptor::Bias { bound } => x_in + bound,
            _ => x_in,
        }
    }

    /// Spectral-norm bound of the layer Jacobian with respect to its input.
    /// Residual blocks are handled by the bound engine as a whole.
    pub fn jacobian_input_bound(&self) -> f64 {
        match &self.desc {
            LayerDescriptor::SpectralDense { lipschitz, .. }
            | LayerDescriptor::OrthoDense { lipschitz, .. }
            | LayerDescriptor::SpectralConv2D { lipschitz, .. } => *lipschitz,
            _ => 1.0,
        }
    }

    /// Spectral-norm bound of the layer Jacobian with respect to its
    /// parameters, given an input-norm bound. Parameterless layers return 0.
    pub fn jacobian_param_bound(&self, x_in: f64) -> f64 {
        match &self.desc {
            LayerDescriptor::SpectralDense { .. } | LayerDescriptor::OrthoDense { .. } => x_in,
            LayerDescriptor::SpectralConv2D {
                kernel,
                mode,
                lipschitz,
                ..
            } => {
                let s = (kernel.0 * kernel.1) as f64;
                match mode {
                    ConvMode::Plain => s.sqrt() * x_in,
                    ConvMode::Rko => {
                        // Reshaped-kernel constant for stride-1 same padding,
                        // in terms of the image and window dimensions. The
                        // lipschitz target scales the whole layer.
                        let (h, wd) = (self.in_shape[0] as f64, self.in_shape[1] as f64);
                        let (kh, kw) = (kernel.0 as f64, kernel.1 as f64);
                        let denom =
                            (1.0 - (kh - 1.0) / (2.0 * h)) * (1.0 - (kw - 1.0) / (2.0 * wd));
                        lipschitz * (1.0 / denom).sqrt() * x_in
                    }
                }
            }
            LayerDescriptor::Bias { .. } => 1.0,
            _ => 0.0,
        }
    }

    /// Project the layer parameters onto the constraint set.
    pub fn project(&mut self, settings: &ProjectionSettings) -> Result<()> {
        match &self.desc {
            LayerDescriptor::SpectralDense { lipschitz, .. } => {
                let w = self.weight.as_ref().expect("dense weight");
                let st = self.pi_state.as_mut().expect("pi state");
                let projected = crate::numerics::project_spectral(
                    w,
                    *lipschitz,
                    st,
                    settings.pi_max_iters,
                    settings.pi_tol,
                )?;
                self.weight = Some(projected);
                Ok(())
            }
            LayerDescriptor::OrthoDense { lipschitz, .. } => {
                let w = self.weight.as_ref().expect("dense weight");
                let st = self.pi_state.as_mut().expect("pi state");
                let sigma = spectral_norm(w, st, settings.pi_max_iters, settings.pi_tol)?;
                if sigma == 0.0 {
                    return Err(ModelError::ProjectionNonConvergence {
                        layer: usize::MAX,
                        residual: f64::INFINITY,
                    });
                }
                let normalized = w.scale(1.0 / sigma);
                let out =
                    bjorck_orthonormalize(&normalized, settings.bjorck_iters, settings.bjorck_tol)?;
                if !out.converged && out.residual > 1e-6 {
                    return Err(ModelError::ProjectionNonConvergence {
                        layer: usize::MAX,
                        residual: out.residual,
                    });
                }
                self.weight = Some(if *lipschitz == 1.0 {
                    out.matrix
                } else {
                    out.matrix.scale(*lipschitz)
                });
                Ok(())
            }
            LayerDescriptor::SpectralConv2D {
                mode, lipschitz, ..
            } => match (*mode, *lipschitz) {
                (ConvMode::Plain, lipschitz) => {
                    // Power iteration underestimates, so rescale until the
                    // re-estimated operator norm is feasible.
                    for _ in 0..6 {
                        let sigma = self.conv_operator_norm(settings)?;
                        if sigma <= lipschitz * (1.0 + PROJECTION_SLACK) {
                            break;
                        }
                        let k = self.weight.as_ref().expect("kernel");
                        self.weight = Some(k.scale(lipschitz / sigma));
                    }
                    Ok(())
                }
                (ConvMode::Rko, _) => {
                    let k = self.weight.as_ref().expect("kernel");
                    let shape = k.shape().to_vec();
                    let rows = shape[0] * shape[1] * shape[2];
                    let cols = shape[3];
                    let m = k.reshape(vec![rows, cols])?;
                    let st = self.pi_state.as_mut().expect("pi state");
                    let sigma = spectral_norm(&m, st, settings.pi_max_iters, settings.pi_tol)?;
                    if sigma == 0.0 {
                        return Err(ModelError::ProjectionNonConvergence {
                            layer: usize::MAX,
                            residual: f64::INFINITY,
                        });
                    }
                    let out = bjorck_orthonormalize(
                        &m.scale(1.0 / sigma),
                        settings.bjorck_iters,
                        settings.bjorck_tol,
                    )?;
                    if !out.converged && out.residual > 1e-6 {
                        return Err(ModelError::ProjectionNonConvergence {
                            layer: usize::MAX,
                            residual: out.residual,
                        });
                    }
                    self.weight = Some(out.matrix.reshape(shape)?);
                    Ok(())
                }
            },
            LayerDescriptor::Bias { bound } => {
                let b = self.weight.as_ref().expect("bias vector");
                self.weight = Some(project_bias(b, *bound)?);
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Spectral norm of the convolution as a linear operator on inputs,
    /// estimated by power iteration with an input-shaped iterate.
    fn conv_operator_norm(&mut self, settings: &ProjectionSettings) -> Result<f64> {
        let k = self.weight.as_ref().expect("kernel").clone();
        let geo = *self.conv_geo.as_ref().expect("conv geometry");
        let in_shape = self.in_shape.clone();
        let out_shape = self.out_shape.clone();
        let st = self.pi_state.as_mut().expect("pi state");
        let sigma = power_iteration(
            |u| {
                let x = Tensor::new(in_shape.clone(), u.to_vec())
                    .map_err(|_| NumericsError::NonFinite("conv power iteration"))?;
                Ok(conv2d_with_geometry(&x, &k, &geo)?.data().to_vec())
            },
            |v| {
                let g = Tensor::new(out_shape.clone(), v.to_vec())
                    .map_err(|_| NumericsError::NonFinite("conv power iteration"))?;
                Ok(conv2d_input_adjoint(&g, &k, &geo)?.data().to_vec())
            },
            st,
            settings.pi_max_iters,
            settings.pi_tol,
        )?;
        Ok(sigma)
    }

    /// Re-estimate the constrained quantity and compare against the target.
    /// Returns the measured value and the target (None for unconstrained
    /// layers).
    pub fn constraint_gap(&mut self, settings: &ProjectionSettings) -> Result<Option<(f64, f64)>> {
        match &self.desc {
            LayerDescriptor::SpectralDense { lipschitz, .. }
            | LayerDescriptor::OrthoDense { lipschitz, .. } => {
                let target = *lipschitz;
                let w = self.weight.as_ref().expect("dense weight").clone();
                let st = self.pi_state.as_mut().expect("pi state");
                let sigma = spectral_norm(&w, st, settings.pi_max_iters, settings.pi_tol)?;
                Ok(Some((sigma, target)))
            }
            LayerDescriptor::SpectralConv2D {
                mode, lipschitz, ..
            } => {
                let target = *lipschitz;
                match *mode {
                    ConvMode::Plain => {
                        let sigma = self.conv_operator_norm(settings)?;
                        Ok(Some((sigma, target)))
                    }
                    ConvMode::Rko => {
                        // The stored kernel is orthogonal in reshaped form
                        // and the forward applies lipschitz/sqrt(s); the
                        // operator norm is then at most the target.
                        let k = self.weight.as_ref().expect("kernel");
                        let shape = k.shape().to_vec();
                        let m = k.reshape(vec![shape[0] * shape[1] * shape[2], shape[3]])?;
                        let st = self.pi_state.as_mut().expect("pi state");
                        let sigma =
                            spectral_norm(&m, st, settings.pi_max_iters, settings.pi_tol)?;
                        // sigma of the reshaped matrix must be 1 for the
                        // certificate to hold.
                        Ok(Some((sigma * target, target)))
                    }
                }
            }
            LayerDescriptor::Bias { bound } => {
                let b = self.weight.as_ref().expect("bias vector");
                Ok(Some((b.norm(), *bound)))
            }
            _ => Ok(None),
        }
    }
}

/// Record of one forward pass, retaining what the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input seen by each layer, in layer order.
    pub inputs: Vec<Tensor>,
    pub output: Tensor,
}

/// Ordered list of layers with composed shapes and balanced residual spans.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
}

impl Network {
    /// Build a network from descriptors, inferring shapes and initializing
    /// parameters from the given RNG. Projection is not applied here;
    /// call `project_all` before deriving certificates.
    pub fn new<R: Rng>(
        input_shape: Vec<usize>,
        descriptors: Vec<LayerDescriptor>,
        rng: &mut R,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(ModelError::Shape {
                layer: 0,
                message: format!("invalid input shape {input_shape:?}"),
            });
        }
        let mut layers = Vec::with_capacity(descriptors.len());
        let mut shape = input_shape.clone();
        let mut skip_shapes: Vec<Vec<usize>> = Vec::new();
        for (i, desc) in descriptors.into_iter().enumerate() {
            desc.validate(i)?;
            let in_shape = shape.clone();
            let out_shape = match &desc {
                LayerDescriptor::BoundedInput { .. }
                | LayerDescriptor::ReLU
                | LayerDescriptor::Tanh
                | LayerDescriptor::LayerCentering
                | LayerDescriptor::ClipGradient { .. } => in_shape.clone(),
                LayerDescriptor::GroupSort2 => {
                    let numel: usize = in_shape.iter().product();
                    if !numel.is_multiple_of(2) {
                        return Err(ModelError::Shape {
                            layer: i,
                            message: format!(
                                "group_sort2 needs an even element count, got shape {in_shape:?}"
                            ),
                        });
                    }
                    in_shape.clone()
                }
                LayerDescriptor::SpectralDense { units, .. }
                | LayerDescriptor::OrthoDense { units, .. } => {
                    if in_shape.len() != 1 {
                        return Err(ModelError::Shape {
                            layer: i,
                            message: format!(
                                "dense layers need a flat input, got {in_shape:?} (insert flatten)"
                            ),
                        });
                    }
                    vec![*units]
                }
                LayerDescriptor::SpectralConv2D {
                    filters,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if in_shape.len() != 3 {
                        return Err(ModelError::Shape {
                            layer: i,
                            message: format!("conv needs an H x W x C input, got {in_shape:?}"),
                        });
                    }
                    let geo = ConvGeometry::infer(
                        &in_shape,
                        &[kernel.0, kernel.1, in_shape[2], *filters],
                        *stride,
                        *padding,
                    )
                    .map_err(|e| ModelError::Shape {
                        layer: i,
                        message: e.to_string(),
                    })?;
                    geo.output_shape()
                }
                LayerDescriptor::Bias { .. } => in_shape.clone(),
                LayerDescriptor::ScaledL2NormPooling2D { pool } => {
                    if in_shape.len() != 3 {
                        return Err(ModelError::Shape {
                            layer: i,
                            message: format!("pooling needs an H x W x C input, got {in_shape:?}"),
                        });
                    }
                    if !in_shape[0].is_multiple_of(pool.0) || !in_shape[1].is_multiple_of(pool.1) {
                        return Err(ModelError::Shape {
                            layer: i,
                            message: format!(
                                "pool {pool:?} does not tile input {:?}",
                                &in_shape[..2]
                            ),
                        });
                    }
                    vec![in_shape[0] / pool.0, in_shape[1] / pool.1, in_shape[2]]
                }
                LayerDescriptor::Flatten => {
                    vec![in_shape.iter().product()]
                }
                LayerDescriptor::ResidualSplit => {
                    skip_shapes.push(in_shape.clone());
                    in_shape.clone()
                }
                LayerDescriptor::ResidualMerge { .. } => {
                    let skip = skip_shapes.pop().ok_or(ModelError::UnbalancedResidual)?;
                    if skip != in_shape {
                        return Err(ModelError::Shape {
                            layer: i,
                            message: format!(
                                "residual branch changed shape: skip {skip:?} vs branch {in_shape:?}"
                            ),
                        });
                    }
                    in_shape.clone()
                }
            };

            let (weight, pi_state, conv_geo) = match &desc {
                LayerDescriptor::SpectralDense { units, .. }
                | LayerDescriptor::OrthoDense { units, .. } => {
                    let fan_in = in_shape[0];
                    let scale = 1.0 / (fan_in as f64).sqrt();
                    let data: Vec<f64> = (0..units * fan_in)
                        .map(|_| {
                            let z: f64 = rng.sample(StandardNormal);
                            z * scale
                        })
                        .collect();
                    (
                        Some(Tensor::matrix(*units, fan_in, data)?),
                        Some(PowerIterationState::new(fan_in)),
                        None,
                    )
                }
                LayerDescriptor::SpectralConv2D {
                    filters,
                    kernel,
                    stride,
                    padding,
                    mode,
                    ..
                } => {
                    let c = in_shape[2];
                    let fan_in = kernel.0 * kernel.1 * c;
                    let scale = 1.0 / (fan_in as f64).sqrt();
                    let data: Vec<f64> = (0..fan_in * filters)
                        .map(|_| {
                            let z: f64 = rng.sample(StandardNormal);
                            z * scale
                        })
                        .collect();
                    let geo = ConvGeometry::infer(
                        &in_shape,
                        &[kernel.0, kernel.1, c, *filters],
                        *stride,
                        *padding,
                    )?;
                    let pi_dim = match mode {
                        // Plain mode iterates in input space of the operator.
                        ConvMode::Plain => in_shape.iter().product(),
                        // RKO mode iterates on the reshaped kernel matrix.
                        ConvMode::Rko => *filters,
                    };
                    (
                        Some(Tensor::new(
                            vec![kernel.0, kernel.1, c, *filters],
                            data,
                        )?),
                        Some(PowerIterationState::new(pi_dim)),
                        Some(geo),
                    )
                }
                LayerDescriptor::Bias { .. } => {
                    (Some(Tensor::zeros(in_shape.clone())), None, None)
                }
                _ => (None, None, None),
            };

            layers.push(Layer {
                desc,
                weight,
                pi_state,
                in_shape,
                out_shape: out_shape.clone(),
                conv_geo,
            });
            shape = out_shape;
        }
        if !skip_shapes.is_empty() {
            return Err(ModelError::UnbalancedResidual);
        }
        Ok(Self {
            layers,
            input_shape,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map(|l| l.out_shape.as_slice())
            .unwrap_or(&self.input_shape)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<ForwardTrace> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(ModelError::Shape {
                layer: 0,
                message: format!(
                    "input shape {:?} does not match network input {:?}",
                    x.shape(),
                    self.input_shape
                ),
            });
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut skip_stack: Vec<Tensor> = Vec::new();
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            cur = match &layer.desc {
                LayerDescriptor::ResidualSplit => {
                    skip_stack.push(cur.clone());
                    cur
                }
                LayerDescriptor::ResidualMerge { rule } => {
                    let skip = skip_stack.pop().ok_or(ModelError::UnbalancedResidual)?;
                    let mut merged = cur.add(&skip)?;
                    if let MergeRule::OneLipAdd = rule {
                        merged.scale_in_place(0.5);
                    }
                    merged
                }
                _ => layer.forward(&cur).map_err(|e| at_layer(e, i))?,
            };
        }
        Ok(ForwardTrace {
            inputs,
            output: cur,
        })
    }

    /// Backward pass from an output cotangent. Returns the input cotangent
    /// and one parameter gradient slot per layer.
    pub fn vjp(
        &self,
        trace: &ForwardTrace,
        cotangent: &Tensor,
    ) -> Result<(Tensor, Vec<Option<Tensor>>)> {
        let n = self.layers.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut skip_cotangents: Vec<Tensor> = Vec::new();
        let mut g = cotangent.clone();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            g = match &layer.desc {
                LayerDescriptor::ResidualMerge { rule } => {
                    let f = rule.factor();
                    let branch = if f == 1.0 { g.clone() } else { g.scale(f) };
                    skip_cotangents.push(branch.clone());
                    branch
                }
                LayerDescriptor::ResidualSplit => {
                    let skip = skip_cotangents
                        .pop()
                        .ok_or(ModelError::UnbalancedResidual)?;
                    g.add(&skip)?
                }
                _ => {
                    let (gin, gparam) =
                        layer.vjp(&trace.inputs[i], &g).map_err(|e| at_layer(e, i))?;
                    grads[i] = gparam;
                    gin
                }
            };
        }
        Ok((g, grads))
    }

    /// Project every parameterized layer onto its constraint set.
    pub fn project_all(&mut self, settings: &ProjectionSettings) -> Result<()> {
        for i in 0..self.layers.len() {
            self.layers[i].project(settings).map_err(|e| at_layer(e, i))?;
        }
        Ok(())
    }

    /// Verify that every constraint holds within the given relative
    /// tolerance, re-estimating spectral norms with warm-started iterations.
    pub fn verify_constraints(&mut self, tol: f64) -> Result<()> {
        let settings = ProjectionSettings::default();
        for i in 0..self.layers.len() {
            if let Some((value, target)) = self.layers[i]
                .constraint_gap(&settings)
                .map_err(|e| at_layer(e, i))?
            {
                if value > target * (1.0 + tol) + 1e-15 {
                    return Err(ModelError::ConstraintViolated {
                        layer: i,
                        sigma: value,
                        target,
                        tol,
                    });
                }
            }
        }
        Ok(())
    }

    /// Indices of layers carrying trainable parameters.
    pub fn param_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.desc.has_params())
            .map(|(i, _)| i)
            .collect()
    }

    /// Stable `layerNN.kind` names for checkpointing.
    pub fn param_names(&self) -> Vec<(usize, String)> {
        self.param_layer_indices()
            .into_iter()
            .map(|i| (i, format!("layer{:03}.{}", i, self.layers[i].desc.name())))
            .collect()
    }
}

fn at_layer(e: ModelError, layer: usize) -> ModelError {
    match e {
        ModelError::Shape { message, .. } => ModelError::Shape { layer, message },
        ModelError::InvalidDescriptor { message, .. } => {
            ModelError::InvalidDescriptor { layer, message }
        }
        ModelError::ProjectionNonConvergence { residual, .. } => {
            ModelError::ProjectionNonConvergence { layer, residual }
        }
        other => other,
    }
}
