//! Independent brute-force references: central-difference gradients,
//! per-sample gradient norms, one-sided-Jacobi SVD and a numerically
//! integrated subsampled-Gaussian Rényi divergence.
//!
//! Each oracle keeps its own loops and reductions so it does not share a
//! code path with the machinery it validates.

use crate::layers::Network;
use crate::losses::LossKind;
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default central-difference step on 64-bit reals.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("jacobi svd did not converge within {0} sweeps")]
    SvdNonConvergence(usize),
    #[error("quadrature did not converge: {0}")]
    QuadratureNonConvergence(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("model error: {0}")]
    Model(String),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// One reference-versus-implementation comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub quantity: String,
    pub reference: f64,
    pub implementation: f64,
    pub absolute_error: f64,
    pub relative_error: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Passes when either the absolute or the relative error is within the
    /// threshold.
    pub fn evaluate(
        quantity: impl Into<String>,
        reference: f64,
        implementation: f64,
        threshold: f64,
    ) -> Self {
        let absolute_error = (reference - implementation).abs();
        let scale = reference.abs().max(implementation.abs());
        let relative_error = if scale > 0.0 {
            absolute_error / scale
        } else {
            0.0
        };
        Self {
            quantity: quantity.into(),
            reference,
            implementation,
            absolute_error,
            relative_error,
            threshold,
            pass: absolute_error <= threshold || relative_error <= threshold,
        }
    }
}

/// Central finite differences of a scalar function, one coordinate at a
/// time.
pub fn finite_difference_gradient<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite differences need a positive step");
    let mut grad = vec![0.0; point.len()];
    let mut work = point.to_vec();
    for i in 0..point.len() {
        let orig = work[i];
        work[i] = orig + step;
        let up = f(&work);
        work[i] = orig - step;
        let down = f(&work);
        work[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Per-sample, per-layer parameter gradient norms: each sample runs through
/// forward and reverse mode individually, with no averaging. Layers without
/// parameters report 0.
pub fn per_sample_gradient_norms(
    network: &Network,
    xs: &[Tensor],
    ys: &[Vec<f64>],
    loss: &LossKind,
) -> Result<Vec<Vec<f64>>> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(OracleError::InvalidArgument(format!(
            "need matching non-empty batches, got {} inputs and {} labels",
            xs.len(),
            ys.len()
        )));
    }
    let mut out = Vec::with_capacity(xs.len());
    for (x, y) in xs.iter().zip(ys) {
        let trace = network
            .forward_trace(x)
            .map_err(|e| OracleError::Model(e.to_string()))?;
        let logits = trace.output.data();
        let g = loss
            .loss_gradient(logits, y)
            .map_err(|e| OracleError::Model(e.to_string()))?;
        let cotangent = Tensor::new(trace.output.shape().to_vec(), g)
            .map_err(|e| OracleError::Model(e.to_string()))?;
        let (_, grads) = network
            .vjp(&trace, &cotangent)
            .map_err(|e| OracleError::Model(e.to_string()))?;
        let norms: Vec<f64> = grads
            .iter()
            .map(|gp| match gp {
                Some(t) => {
                    let mut acc = 0.0;
                    for v in t.data() {
                        acc += v * v;
                    }
                    acc.sqrt()
                }
                None => 0.0,
            })
            .collect();
        out.push(norms);
    }
    Ok(out)
}

const JACOBI_MAX_SWEEPS: usize = 64;
const JACOBI_TOL: f64 = 1e-12;

/// Singular values by one-sided Jacobi (Hestenes) iteration, sorted
/// descending. Intended for desk-scale matrices (dims up to 256).
pub fn svd_reference(m: &Tensor) -> Result<Vec<f64>> {
    if m.shape().len() != 2 {
        return Err(OracleError::InvalidArgument(format!(
            "svd_reference needs a matrix, got shape {:?}",
            m.shape()
        )));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    if rows.max(cols) > 256 {
        return Err(OracleError::InvalidArgument(
            "svd_reference is limited to dims <= 256".into(),
        ));
    }
    // Work on columns; a wide matrix is transposed first (same singular
    // values).
    let (r, c, wide) = if rows < cols {
        (cols, rows, true)
    } else {
        (rows, cols, false)
    };
    let mut col: Vec<Vec<f64>> = vec![vec![0.0; r]; c];
    for i in 0..rows {
        for j in 0..cols {
            let v = m.data()[i * cols + j];
            if wide {
                col[i][j] = v;
            } else {
                col[j][i] = v;
            }
        }
    }
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..c.saturating_sub(1) {
            for j in i + 1..c {
                let mut aii = 0.0;
                let mut ajj = 0.0;
                let mut aij = 0.0;
                for k in 0..r {
                    aii += col[i][k] * col[i][k];
                    ajj += col[j][k] * col[j][k];
                    aij += col[i][k] * col[j][k];
                }
                if aij.abs() <= JACOBI_TOL * (aii * ajj).sqrt() || aij == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (ajj - aii) / (2.0 * aij);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for k in 0..r {
                    let vi = col[i][k];
                    let vj = col[j][k];
                    col[i][k] = cs * vi - sn * vj;
                    col[j][k] = sn * vi + cs * vj;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(OracleError::SvdNonConvergence(JACOBI_MAX_SWEEPS));
    }
    let mut svs: Vec<f64> = col
        .iter()
        .map(|column| {
            let mut acc = 0.0;
            for v in column {
                acc += v * v;
            }
            acc.sqrt()
        })
        .collect();
    svs.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(svs)
}

/// Rényi divergence of a Poisson-subsampled Gaussian step, by adaptive
/// quadrature of the divergence integrand in log space, maximized over the
/// two divergence directions.
pub fn rdp_numerical_oracle(sigma: f64, p: f64, alpha: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(OracleError::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if alpha <= 1.0 {
        return Err(OracleError::InvalidArgument(format!(
            "alpha must exceed 1, got {alpha}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(OracleError::InvalidArgument(format!(
            "p must be in [0, 1], got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let log_mix = |x: f64| -> f64 {
        if p == 1.0 {
            log_normal_pdf(x, 1.0, sigma)
        } else {
            log_sum_exp2(
                (1.0 - p).ln() + log_normal_pdf(x, 0.0, sigma),
                p.ln() + log_normal_pdf(x, 1.0, sigma),
            )
        }
    };
    let log_base = |x: f64| log_normal_pdf(x, 0.0, sigma);
    // The exponentially tilted integrand can peak near x = alpha, so the
    // window extends well past both the base mass and the tilt. Panels
    // narrower than sigma keep the sharp bump visible to the initial
    // Simpson probes.
    let lo = -(20.0 * sigma + alpha);
    let hi = 1.0 + 20.0 * sigma + alpha;
    let panel = (0.5 * sigma).min(0.5);
    let d1 = renyi_divergence_quadrature(&log_mix, &log_base, alpha, lo, hi, panel)?;
    let d2 = renyi_divergence_quadrature(&log_base, &log_mix, alpha, lo, hi, panel)?;
    Ok(d1.max(d2))
}

fn log_normal_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `(1/(alpha-1)) ln Int p(x)^alpha q(x)^(1-alpha) dx` with the integrand
/// evaluated as `exp(g(x) - M)` for a grid-estimated maximum `M`, summed
/// over fixed-width panels that are each refined adaptively.
fn renyi_divergence_quadrature(
    log_p: &dyn Fn(f64) -> f64,
    log_q: &dyn Fn(f64) -> f64,
    alpha: f64,
    lo: f64,
    hi: f64,
    panel: f64,
) -> Result<f64> {
    let g = |x: f64| alpha * log_p(x) + (1.0 - alpha) * log_q(x);
    let mut m = f64::NEG_INFINITY;
    const GRID: usize = 4001;
    for i in 0..GRID {
        let x = lo + (hi - lo) * i as f64 / (GRID - 1) as f64;
        m = m.max(g(x));
    }
    let f = |x: f64| (g(x) - m).exp();
    let panels = ((hi - lo) / panel).ceil() as usize;
    let per_panel_tol = 1e-10 / panels as f64;
    let mut integral = 0.0;
    for i in 0..panels {
        let a = lo + (hi - lo) * i as f64 / panels as f64;
        let b = lo + (hi - lo) * (i + 1) as f64 / panels as f64;
        // Panels negligible at five probe points cannot contribute above
        // the tolerance: the integrand features are wider than a panel.
        if (0..=4).all(|k| f(a + (b - a) * k as f64 / 4.0) < 1e-14) {
            continue;
        }
        integral += adaptive_simpson(&f, a, b, per_panel_tol, 48)?;
    }
    if integral <= 0.0 {
        return Err(OracleError::QuadratureNonConvergence(
            "non-positive integral".into(),
        ));
    }
    Ok(((m + integral.ln()) / (alpha - 1.0)).max(0.0))
}

fn adaptive_simpson(
    f: &dyn Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
    max_depth: usize,
) -> Result<f64> {
    let mid = 0.5 * (lo + hi);
    let (flo, fmid, fhi) = (f(lo), f(mid), f(hi));
    let whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi);
    simpson_recurse(f, lo, hi, flo, fmid, fhi, whole, tol, max_depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_recurse(
    f: &dyn Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    flo: f64,
    fmid: f64,
    fhi: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> Result<f64> {
    let mid = 0.5 * (lo + hi);
    let lmid = 0.5 * (lo + mid);
    let rmid = 0.5 * (mid + hi);
    let (flm, frm) = (f(lmid), f(rmid));
    let left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid);
    let right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(OracleError::QuadratureNonConvergence(format!(
            "interval [{lo}, {hi}] did not meet tolerance"
        )));
    }
    let l = simpson_recurse(f, lo, mid, flo, flm, fmid, left, tol / 2.0, depth - 1)?;
    let r = simpson_recurse(f, mid, hi, fmid, frm, fhi, right, tol / 2.0, depth - 1)?;
    Ok(l + r)
}
