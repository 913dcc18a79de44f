//! Minimal dense linear algebra: tensors, matrix products, 2D convolution,
//! spectral-norm estimation via power iteration, Björck orthonormalization
//! and the projection primitives used by every other module.
//!
//! All reductions accumulate sequentially in row-major order so that results
//! are reproducible across runs on the same machine.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default power-iteration budget for a cold start (fresh vector).
pub const PI_MAX_ITERS_COLD: usize = 100;
/// Default power-iteration budget when warm-started from a cached vector.
pub const PI_MAX_ITERS_WARM: usize = 10;
/// Default power-iteration convergence tolerance on successive estimates.
pub const PI_TOL: f64 = 1e-9;
/// Default Björck iteration count.
pub const BJORCK_ITERS: usize = 15;
/// Default Björck orthonormality residual tolerance.
pub const BJORCK_TOL: f64 = 1e-6;
/// Relative slack under which a spectral projection is treated as a no-op,
/// keeping repeated projections bitwise idempotent.
pub const PROJECTION_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Dense row-major tensor of 64-bit reals. The sole numeric carrier for
/// inputs, weights, gradients and bounds throughout the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    /// 1-D tensor from raw values.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            shape: vec![n],
            data,
        }
    }

    /// 2-D tensor (matrix) with `rows * cols` row-major entries.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                expected: self.shape.clone(),
                got: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Euclidean norm, accumulated sequentially.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "dot",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op: "sub",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// `self += factor * other`, shapes must match.
    pub fn axpy_in_place(&mut self, factor: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op: "axpy",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn assert_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(op));
        }
        Ok(())
    }
}

/// `y = W x` for a `rows x cols` matrix and `cols` vector.
pub fn matvec(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (rows, cols) = matrix_dims(w, "matvec")?;
    if x.len() != cols {
        return Err(NumericsError::ShapeMismatch {
            op: "matvec",
            expected: vec![cols],
            got: vec![x.len()],
        });
    }
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        let mut acc = 0.0;
        let row = &w.data[r * cols..(r + 1) * cols];
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        y[r] = acc;
    }
    Ok(y)
}

/// `y = W^T x` for a `rows x cols` matrix and `rows` vector.
pub fn matvec_transpose(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (rows, cols) = matrix_dims(w, "matvec_transpose")?;
    if x.len() != rows {
        return Err(NumericsError::ShapeMismatch {
            op: "matvec_transpose",
            expected: vec![rows],
            got: vec![x.len()],
        });
    }
    let mut y = vec![0.0; cols];
    for r in 0..rows {
        let xr = x[r];
        let row = &w.data[r * cols..(r + 1) * cols];
        for c in 0..cols {
            y[c] += row[c] * xr;
        }
    }
    Ok(y)
}

/// `C = A^T A` for a `rows x cols` matrix, producing `cols x cols`.
/// The row index is outermost for cache locality; each output element still
/// accumulates over rows in ascending order, so results stay reproducible.
pub fn gram(a: &Tensor) -> Result<Tensor> {
    let (rows, cols) = matrix_dims(a, "gram")?;
    let mut out = vec![0.0; cols * cols];
    for r in 0..rows {
        let row = &a.data[r * cols..(r + 1) * cols];
        for i in 0..cols {
            let ri = row[i];
            let dst = &mut out[i * cols..(i + 1) * cols];
            for j in 0..cols {
                dst[j] += ri * row[j];
            }
        }
    }
    Tensor::matrix(cols, cols, out)
}

/// `C = A B` for `m x k` and `k x n` matrices. The contraction index sits
/// in the middle loop; per-element accumulation order over `t` is ascending
/// as in the textbook triple loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul")?;
    let (k2, n) = matrix_dims(b, "matmul")?;
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            expected: vec![k, n],
            got: vec![k2, n],
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let ait = a.data[i * k + t];
            let brow = &b.data[t * n..(t + 1) * n];
            for j in 0..n {
                dst[j] += ait * brow[j];
            }
        }
    }
    Tensor::matrix(m, n, out)
}

fn matrix_dims(w: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if w.shape.len() != 2 {
        return Err(NumericsError::InvalidArgument(format!(
            "{op} requires a 2-D tensor, got shape {:?}",
            w.shape
        )));
    }
    Ok((w.shape[0], w.shape[1]))
}

/// Cached right-singular-vector estimate for warm-started power iteration.
///
/// Weight matrices move slowly between projection calls, so the converged
/// vector from the previous call is a high-quality initialization for the
/// next one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerIterationState {
    u: Vec<f64>,
    last_estimate: f64,
}

impl PowerIterationState {
    /// Fresh state with a deterministic pseudo-random unit vector of the
    /// operator's input dimension.
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "power iteration state needs a positive dimension");
        // splitmix64 stream seeded by the dimension: deterministic, and very
        // unlikely to be orthogonal to the leading singular vector.
        let mut z = 0x9E37_79B9_7F4A_7C15u64 ^ (dim as u64);
        let mut u = Vec::with_capacity(dim);
        for _ in 0..dim {
            z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut x = z;
            x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            x ^= x >> 31;
            u.push((x as f64 / u64::MAX as f64) - 0.5);
        }
        let mut state = Self {
            u,
            last_estimate: 0.0,
        };
        state.renormalize();
        state
    }

    pub fn vector(&self) -> &[f64] {
        &self.u
    }

    pub fn last_estimate(&self) -> f64 {
        self.last_estimate
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    fn renormalize(&mut self) {
        let mut acc = 0.0;
        for v in &self.u {
            acc += v * v;
        }
        let n = acc.sqrt();
        if n > 0.0 {
            for v in &mut self.u {
                *v /= n;
            }
        } else {
            // Degenerate: restart from a basis vector.
            self.u[0] = 1.0;
            for v in &mut self.u[1..] {
                *v = 0.0;
            }
        }
    }
}

/// Power iteration on an arbitrary linear operator given as an
/// apply / apply-adjoint pair. `state.u` lives in the operator's input space.
///
/// Returns the largest-singular-value estimate; a zero operator returns 0
/// and leaves the cached unit vector untouched.
pub fn power_iteration<F, G>(
    apply: F,
    apply_adjoint: G,
    state: &mut PowerIterationState,
    max_iters: usize,
    tol: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if max_iters == 0 {
        return Err(NumericsError::InvalidArgument(
            "power iteration needs max_iters >= 1".into(),
        ));
    }
    if tol <= 0.0 {
        return Err(NumericsError::InvalidArgument(
            "power iteration needs tol > 0".into(),
        ));
    }
    let mut estimate = 0.0;
    let mut prev = f64::NAN;
    for _ in 0..max_iters {
        let wu = apply(&state.u)?;
        let mut acc = 0.0;
        for v in &wu {
            acc += v * v;
        }
        estimate = acc.sqrt();
        if estimate == 0.0 {
            // Zero operator (or u in its kernel after an exact zero image):
            // report 0 without touching the cached direction.
            state.last_estimate = 0.0;
            return Ok(0.0);
        }
        let back = apply_adjoint(&wu)?;
        let mut nacc = 0.0;
        for v in &back {
            nacc += v * v;
        }
        let bn = nacc.sqrt();
        if bn == 0.0 {
            state.last_estimate = estimate;
            return Ok(estimate);
        }
        state.u = back.iter().map(|v| v / bn).collect();
        if !prev.is_nan() && (estimate - prev).abs() < tol {
            break;
        }
        prev = estimate;
    }
    state.last_estimate = estimate;
    Ok(estimate)
}

/// Largest singular value of a 2-D matrix by warm-started power iteration.
pub fn spectral_norm(
    w: &Tensor,
    state: &mut PowerIterationState,
    max_iters: usize,
    tol: f64,
) -> Result<f64> {
    let (_, cols) = matrix_dims(w, "spectral_norm")?;
    if state.dim() != cols {
        return Err(NumericsError::ShapeMismatch {
            op: "spectral_norm",
            expected: vec![cols],
            got: vec![state.dim()],
        });
    }
    power_iteration(
        |u| matvec(w, u),
        |v| matvec_transpose(w, v),
        state,
        max_iters,
        tol,
    )
}

/// Outcome of a Björck orthonormalization run.
#[derive(Debug, Clone)]
pub struct BjorckOutcome {
    pub matrix: Tensor,
    pub converged: bool,
    pub residual: f64,
}

/// Björck orthonormalization `W <- W (3I - W^T W) / 2`, iterated until the
/// orthonormality residual drops below `tol` or the budget is exhausted.
///
/// The caller must pre-scale the input so its spectral norm is at most 1;
/// the iteration diverges beyond sqrt(3). For tall or square matrices the
/// residual is `||W^T W - I||_F`; for wide ones `||W W^T - I||_F`.
pub fn bjorck_orthonormalize(w: &Tensor, iters: usize, tol: f64) -> Result<BjorckOutcome> {
    let (rows, cols) = matrix_dims(w, "bjorck_orthonormalize")?;
    if iters == 0 {
        return Err(NumericsError::InvalidArgument(
            "bjorck_orthonormalize needs iters >= 1".into(),
        ));
    }
    let wide = rows < cols;
    let mut cur = w.clone();
    let mut residual = bjorck_residual(&cur, wide)?;
    if residual <= tol {
        return Ok(BjorckOutcome {
            matrix: cur,
            converged: true,
            residual,
        });
    }
    for _ in 0..iters {
        cur = bjorck_step(&cur, wide)?;
        residual = bjorck_residual(&cur, wide)?;
        if residual <= tol {
            return Ok(BjorckOutcome {
                matrix: cur,
                converged: true,
                residual,
            });
        }
    }
    Ok(BjorckOutcome {
        matrix: cur,
        converged: false,
        residual,
    })
}

fn bjorck_step(w: &Tensor, wide: bool) -> Result<Tensor> {
    let (rows, cols) = matrix_dims(w, "bjorck_step")?;
    if wide {
        // W <- 1.5 W - 0.5 (W W^T) W
        let wt = transpose(w)?;
        let wwt = matmul(w, &wt)?;
        let www = matmul(&wwt, w)?;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows * cols {
            out[i] = 1.5 * w.data[i] - 0.5 * www.data[i];
        }
        Tensor::matrix(rows, cols, out)
    } else {
        // W <- 1.5 W - 0.5 W (W^T W)
        let g = gram(w)?;
        let wg = matmul(w, &g)?;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows * cols {
            out[i] = 1.5 * w.data[i] - 0.5 * wg.data[i];
        }
        Tensor::matrix(rows, cols, out)
    }
}

fn bjorck_residual(w: &Tensor, wide: bool) -> Result<f64> {
    let g = if wide {
        let wt = transpose(w)?;
        matmul(w, &wt)?
    } else {
        gram(w)?
    };
    let n = g.shape[0];
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            let d = g.data[i * n + j] - target;
            acc += d * d;
        }
    }
    Ok(acc.sqrt())
}

pub fn transpose(w: &Tensor) -> Result<Tensor> {
    let (rows, cols) = matrix_dims(w, "transpose")?;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = w.data[r * cols + c];
        }
    }
    Tensor::matrix(cols, rows, out)
}

/// Spectral projection `W -> W min(1, target / sigma_max(W))`.
///
/// A matrix already within `target (1 + PROJECTION_SLACK)` passes through
/// untouched, which makes repeated projections exactly idempotent. Because
/// power iteration only ever underestimates the true norm, the scale-down
/// is re-checked and repeated until the re-estimated norm is feasible;
/// the warm-started state makes the extra rounds cheap.
pub fn project_spectral(
    w: &Tensor,
    target: f64,
    state: &mut PowerIterationState,
    max_iters: usize,
    tol: f64,
) -> Result<Tensor> {
    if target <= 0.0 {
        return Err(NumericsError::InvalidArgument(
            "project_spectral needs target > 0".into(),
        ));
    }
    let mut cur = w.clone();
    for _ in 0..6 {
        let sigma = spectral_norm(&cur, state, max_iters, tol)?;
        if sigma <= target * (1.0 + PROJECTION_SLACK) {
            return Ok(cur);
        }
        cur = cur.scale(target / sigma);
    }
    Ok(cur)
}

/// Radial projection of a bias vector onto the ball of the given radius.
pub fn project_bias(b: &Tensor, bound: f64) -> Result<Tensor> {
    if bound < 0.0 {
        return Err(NumericsError::InvalidArgument(
            "project_bias needs bound >= 0".into(),
        ));
    }
    let n = b.norm();
    if n <= bound || n == 0.0 {
        return Ok(b.clone());
    }
    Ok(b.scale(bound / n))
}

/// Padding scheme for 2-D convolution. Both preserve spatial dimensions at
/// stride 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    Circular,
}

/// Geometry of a convolution: kernel window, strides and padding offsets.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn infer(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        if input_shape.len() != 3 {
            return Err(NumericsError::InvalidArgument(format!(
                "conv2d input must be H x W x C, got {input_shape:?}"
            )));
        }
        if kernel_shape.len() != 4 {
            return Err(NumericsError::InvalidArgument(format!(
                "conv2d kernel must be h x w x C x F, got {kernel_shape:?}"
            )));
        }
        let (in_h, in_w, in_c) = (input_shape[0], input_shape[1], input_shape[2]);
        let (k_h, k_w, kc, out_c) = (
            kernel_shape[0],
            kernel_shape[1],
            kernel_shape[2],
            kernel_shape[3],
        );
        if kc != in_c {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                expected: vec![k_h, k_w, in_c, out_c],
                got: kernel_shape.to_vec(),
            });
        }
        if k_h > in_h || k_w > in_w {
            return Err(NumericsError::InvalidArgument(format!(
                "kernel {k_h}x{k_w} larger than input {in_h}x{in_w}"
            )));
        }
        let (stride_h, stride_w) = stride;
        if stride_h == 0 || stride_w == 0 {
            return Err(NumericsError::InvalidArgument(
                "conv2d strides must be >= 1".into(),
            ));
        }
        // "Same" padding: spatial dims preserved at stride 1, ceil division
        // beyond, with the extra padding placed bottom/right.
        let out_h = in_h.div_ceil(stride_h);
        let out_w = in_w.div_ceil(stride_w);
        let pad_h_total = ((out_h - 1) * stride_h + k_h).saturating_sub(in_h);
        let pad_w_total = ((out_w - 1) * stride_w + k_w).saturating_sub(in_w);
        Ok(Self {
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_c,
            stride_h,
            stride_w,
            out_h,
            out_w,
            pad_top: pad_h_total / 2,
            pad_left: pad_w_total / 2,
            padding,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.out_h, self.out_w, self.out_c]
    }

    /// Resolve a padded coordinate to an input coordinate, or `None` when it
    /// falls into zero padding.
    fn resolve(&self, i: isize, max: usize) -> Option<usize> {
        match self.padding {
            Padding::Zero => {
                if i < 0 || i >= max as isize {
                    None
                } else {
                    Some(i as usize)
                }
            }
            Padding::Circular => Some(i.rem_euclid(max as isize) as usize),
        }
    }
}

/// 2-D cross-correlation of an `H x W x C` input with an `h x w x C x F`
/// kernel under "same" padding semantics.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: (usize, usize), padding: Padding) -> Result<Tensor> {
    let geo = ConvGeometry::infer(x.shape(), kernel.shape(), stride, padding)?;
    conv2d_with_geometry(x, kernel, &geo)
}

pub fn conv2d_with_geometry(x: &Tensor, kernel: &Tensor, geo: &ConvGeometry) -> Result<Tensor> {
    let (h, w, c) = (geo.in_h, geo.in_w, geo.in_c);
    let (kh, kw, f) = (geo.k_h, geo.k_w, geo.out_c);
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0; geo.out_h * geo.out_w * f];
    for oi in 0..geo.out_h {
        for oj in 0..geo.out_w {
            for of in 0..f {
                let mut acc = 0.0;
                for a in 0..kh {
                    let ii = (oi * geo.stride_h + a) as isize - geo.pad_top as isize;
                    let Some(ri) = geo.resolve(ii, h) else { continue };
                    for b in 0..kw {
                        let jj = (oj * geo.stride_w + b) as isize - geo.pad_left as isize;
                        let Some(rj) = geo.resolve(jj, w) else { continue };
                        for ch in 0..c {
                            acc += xd[(ri * w + rj) * c + ch] * kd[((a * kw + b) * c + ch) * f + of];
                        }
                    }
                }
                out[(oi * geo.out_w + oj) * f + of] = acc;
            }
        }
    }
    Tensor::new(geo.output_shape(), out)
}

/// Adjoint of the convolution with respect to its input: scatters an output
/// cotangent back into input space. This is the exact transpose of
/// `conv2d_with_geometry` as a linear map in `x`.
pub fn conv2d_input_adjoint(
    cotangent: &Tensor,
    kernel: &Tensor,
    geo: &ConvGeometry,
) -> Result<Tensor> {
    let (h, w, c) = (geo.in_h, geo.in_w, geo.in_c);
    let (kh, kw, f) = (geo.k_h, geo.k_w, geo.out_c);
    let gd = cotangent.data();
    let kd = kernel.data();
    let mut out = vec![0.0; h * w * c];
    for oi in 0..geo.out_h {
        for oj in 0..geo.out_w {
            for a in 0..kh {
                let ii = (oi * geo.stride_h + a) as isize - geo.pad_top as isize;
                let Some(ri) = geo.resolve(ii, h) else { continue };
                for b in 0..kw {
                    let jj = (oj * geo.stride_w + b) as isize - geo.pad_left as isize;
                    let Some(rj) = geo.resolve(jj, w) else { continue };
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for of in 0..f {
                            acc += gd[(oi * geo.out_w + oj) * f + of]
                                * kd[((a * kw + b) * c + ch) * f + of];
                        }
                        out[(ri * w + rj) * c + ch] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Gradient of the convolution with respect to the kernel, for one sample.
pub fn conv2d_kernel_gradient(
    x: &Tensor,
    cotangent: &Tensor,
    geo: &ConvGeometry,
) -> Result<Tensor> {
    let (h, w, c) = (geo.in_h, geo.in_w, geo.in_c);
    let (kh, kw, f) = (geo.k_h, geo.k_w, geo.out_c);
    let xd = x.data();
    let gd = cotangent.data();
    let mut out = vec![0.0; kh * kw * c * f];
    for oi in 0..geo.out_h {
        for oj in 0..geo.out_w {
            for a in 0..kh {
                let ii = (oi * geo.stride_h + a) as isize - geo.pad_top as isize;
                let Some(ri) = geo.resolve(ii, h) else { continue };
                for b in 0..kw {
                    let jj = (oj * geo.stride_w + b) as isize - geo.pad_left as isize;
                    let Some(rj) = geo.resolve(jj, w) else { continue };
                    for ch in 0..c {
                        let xv = xd[(ri * w + rj) * c + ch];
                        for of in 0..f {
                            out[((a * kw + b) * c + ch) * f + of] +=
                                xv * gd[(oi * geo.out_w + oj) * f + of];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![kh, kw, c, f], out)
}
