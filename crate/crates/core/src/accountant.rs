//! Rényi-DP accounting for the training mechanism: Gaussian-mechanism RDP,
//! Poisson-subsampling amplification at integer orders, per-step composition
//! under the local or global noise strategy, conversion to (epsilon, delta)
//! and privacy-budget inversion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AccountError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, AccountError>;

/// Smallest and largest Rényi orders tracked by the accountant. The optimal
/// order for desk-scale noise multipliers and deltas falls inside this
/// range, and grid minimization is exact on the grid.
pub const ORDER_MIN: u64 = 2;
pub const ORDER_MAX: u64 = 256;

/// Sampling note attached to every accounting report: epsilon is computed
/// under Poisson sampling with probability p = b/N even when the data
/// loader shuffles without replacement.
pub const SAMPLING_ASSUMPTION: &str =
    "epsilon assumes Poisson sampling with probability p = batch_size / dataset_size; \
     the shuffle-without-replacement loader is accounted under this convention";

/// Noise placement strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Per-layer noise scaled by each layer's sensitivity.
    Local,
    /// A single noise scale derived from the global sensitivity.
    Global,
}

/// Rényi divergence accumulated per order over the integer grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<u64>,
    values: Vec<f64>,
}

impl RdpCurve {
    pub fn zero() -> Self {
        let orders: Vec<u64> = (ORDER_MIN..=ORDER_MAX).collect();
        let values = vec![0.0; orders.len()];
        Self { orders, values }
    }

    pub fn orders(&self) -> &[u64] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn add_in_place(&mut self, other: &RdpCurve) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&self, factor: f64) -> RdpCurve {
        RdpCurve {
            orders: self.orders.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// RDP of the unamplified Gaussian mechanism: `alpha / (2 sigma^2)`.
pub fn rdp_gaussian(sigma: f64, alpha: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(AccountError::InvalidArgument(format!(
            "noise multiplier must be positive, got {sigma}"
        )));
    }
    if alpha <= 1.0 {
        return Err(AccountError::InvalidArgument(format!(
            "Renyi order must exceed 1, got {alpha}"
        )));
    }
    Ok(alpha / (2.0 * sigma * sigma))
}

/// Integer-order RDP bound for the Poisson-subsampled Gaussian mechanism:
///
/// `(1/(alpha-1)) ln sum_{k=0..alpha} C(alpha,k) (1-p)^(alpha-k) p^k
///  exp(k(k-1)/(2 sigma^2))`
///
/// evaluated with log-sum-exp stabilization. Fractional orders are rejected;
/// when needed they are answered by `rdp_subsampled_monotone` which rounds
/// up to the next integer order and flags the substitution.
pub fn rdp_subsampled_gaussian(sigma: f64, p: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AccountError::InvalidArgument(format!(
            "sampling probability must be in [0, 1], got {p}"
        )));
    }
    if alpha.fract() != 0.0 || alpha < 2.0 {
        return Err(AccountError::InvalidArgument(format!(
            "the sampled-Gaussian bound needs an integer order >= 2, got {alpha}"
        )));
    }
    if sigma <= 0.0 {
        return Err(AccountError::InvalidArgument(format!(
            "noise multiplier must be positive, got {sigma}"
        )));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return rdp_gaussian(sigma, alpha);
    }
    let a = alpha as u64;
    let ln_p = p.ln();
    let ln_q = (1.0 - p).ln();
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
    // ln C(alpha, k) built incrementally to avoid lgamma.
    let mut ln_binom = 0.0;
    let mut terms = Vec::with_capacity(a as usize + 1);
    for k in 0..=a {
        if k > 0 {
            ln_binom += ((a - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        terms.push(
            ln_binom + (alpha - kf) * ln_q + kf * ln_p + kf * (kf - 1.0) * inv_2s2,
        );
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    for t in &terms {
        acc += (t - m).exp();
    }
    let log_moment = m + acc.ln();
    Ok((log_moment / (alpha - 1.0)).max(0.0))
}

/// Monotone stand-in for fractional orders: the value at the next integer
/// order, which upper-bounds the fractional one since RDP is nondecreasing
/// in the order. The flag reports that a substitution happened.
pub fn rdp_subsampled_monotone(sigma: f64, p: f64, alpha: f64) -> Result<(f64, bool)> {
    if alpha.fract() == 0.0 && alpha >= 2.0 {
        return Ok((rdp_subsampled_gaussian(sigma, p, alpha)?, false));
    }
    if alpha <= 1.0 {
        return Err(AccountError::InvalidArgument(format!(
            "Renyi order must exceed 1, got {alpha}"
        )));
    }
    let up = alpha.ceil().max(2.0);
    Ok((rdp_subsampled_gaussian(sigma, p, up)?, true))
}

/// Mechanism parameters driving the per-step privacy cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountantParams {
    /// Noise multiplier applied per noised quantity.
    pub sigma: f64,
    /// Poisson sampling probability, batch_size / dataset_size.
    pub sampling_probability: f64,
    pub strategy: Strategy,
    /// Number of independently noised layers (those with positive
    /// sensitivity); only meaningful under the local strategy.
    pub noised_layers: usize,
    /// Target delta carried along for reporting.
    pub delta: f64,
}

impl AccountantParams {
    /// Effective noise multiplier of the per-step mechanism. The joint
    /// non-isotropic Gaussian over D noised blocks with per-block
    /// multiplier sigma composes to a single mechanism at sigma / sqrt(D).
    pub fn effective_sigma(&self) -> Result<f64> {
        match self.strategy {
            Strategy::Global => Ok(self.sigma),
            Strategy::Local => {
                if self.noised_layers == 0 {
                    return Err(AccountError::InvalidArgument(
                        "local strategy needs at least one noised layer".into(),
                    ));
                }
                Ok(self.sigma / (self.noised_layers as f64).sqrt())
            }
        }
    }
}

/// Accumulated RDP over the course of training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccountantState {
    pub params: AccountantParams,
    accumulated: RdpCurve,
    steps: usize,
}

impl AccountantState {
    pub fn new(params: AccountantParams) -> Result<Self> {
        if params.sigma <= 0.0 {
            return Err(AccountError::InvalidArgument(format!(
                "noise multiplier must be positive, got {}",
                params.sigma
            )));
        }
        if !(0.0..=1.0).contains(&params.sampling_probability) {
            return Err(AccountError::InvalidArgument(format!(
                "sampling probability must be in [0, 1], got {}",
                params.sampling_probability
            )));
        }
        if !(0.0 < params.delta && params.delta < 1.0) {
            return Err(AccountError::InvalidArgument(format!(
                "delta must be in (0, 1), got {}",
                params.delta
            )));
        }
        Ok(Self {
            params,
            accumulated: RdpCurve::zero(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn accumulated(&self) -> &RdpCurve {
        &self.accumulated
    }

    /// RDP cost of one training step at every tracked order.
    pub fn per_step_curve(&self) -> Result<RdpCurve> {
        per_step_curve(&self.params)
    }

    /// Add one step's curve to the accumulator.
    pub fn compose_step(&mut self) -> Result<()> {
        let step = self.per_step_curve()?;
        self.accumulated.add_in_place(&step);
        self.steps += 1;
        Ok(())
    }

    /// Convert the accumulated curve to epsilon at the given delta:
    /// the minimum over orders of `rho(alpha) + ln(1/delta) / (alpha - 1)`.
    pub fn epsilon_at(&self, delta: f64) -> Result<f64> {
        if !(0.0 < delta && delta < 1.0) {
            return Err(AccountError::InvalidArgument(format!(
                "delta must be in (0, 1), got {delta}"
            )));
        }
        if self.steps == 0 {
            return Ok(0.0);
        }
        Ok(curve_to_epsilon(&self.accumulated, delta).0)
    }

    /// The order attaining the epsilon minimum.
    pub fn optimal_order(&self, delta: f64) -> Result<u64> {
        if !(0.0 < delta && delta < 1.0) {
            return Err(AccountError::InvalidArgument(format!(
                "delta must be in (0, 1), got {delta}"
            )));
        }
        Ok(curve_to_epsilon(&self.accumulated, delta).1)
    }
}

fn per_step_curve(params: &AccountantParams) -> Result<RdpCurve> {
    let sigma = params.effective_sigma()?;
    let p = params.sampling_probability;
    let mut curve = RdpCurve::zero();
    for i in 0..curve.orders.len() {
        let alpha = curve.orders[i] as f64;
        curve.values[i] = if p >= 1.0 {
            rdp_gaussian(sigma, alpha)?
        } else {
            rdp_subsampled_gaussian(sigma, p, alpha)?
        };
    }
    Ok(curve)
}

fn curve_to_epsilon(curve: &RdpCurve, delta: f64) -> (f64, u64) {
    let ln_inv_delta = (1.0 / delta).ln();
    let mut best = f64::INFINITY;
    let mut best_order = curve.orders[0];
    for (&alpha, &rho) in curve.orders.iter().zip(&curve.values) {
        let eps = rho + ln_inv_delta / (alpha as f64 - 1.0);
        if eps < best {
            best = eps;
            best_order = alpha;
        }
    }
    (best, best_order)
}

/// Largest step count whose composed epsilon stays within the budget.
/// Returns 0 when even a single step exceeds it.
pub fn max_steps_for_budget(
    epsilon_max: f64,
    delta: f64,
    sigma: f64,
    sampling_probability: f64,
    strategy: Strategy,
    noised_layers: usize,
) -> Result<usize> {
    if epsilon_max <= 0.0 {
        return Err(AccountError::InvalidArgument(format!(
            "epsilon budget must be positive, got {epsilon_max}"
        )));
    }
    let params = AccountantParams {
        sigma,
        sampling_probability,
        strategy,
        noised_layers,
        delta,
    };
    let step = per_step_curve(&params)?;
    if !(0.0 < delta && delta < 1.0) {
        return Err(AccountError::InvalidArgument(format!(
            "delta must be in (0, 1), got {delta}"
        )));
    }
    let eps_at = |t: usize| curve_to_epsilon(&step.scale(t as f64), delta).0;
    if eps_at(1) > epsilon_max {
        return Ok(0);
    }
    // Exponential growth then bisection; epsilon is monotone in the step
    // count so the search is exact.
    let mut lo = 1usize;
    let mut hi = 2usize;
    const CAP: usize = 1 << 40;
    while eps_at(hi) <= epsilon_max {
        lo = hi;
        if hi >= CAP {
            return Ok(hi);
        }
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if eps_at(mid) <= epsilon_max {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Classic Gaussian-mechanism calibration `sigma = sqrt(2 ln(1.25/delta)) / epsilon`.
pub fn calibrate_gaussian_classic(epsilon: f64, delta: f64) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(AccountError::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if !(0.0 < delta && delta < 1.0) {
        return Err(AccountError::InvalidArgument(format!(
            "delta must be in (0, 1), got {delta}"
        )));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}
