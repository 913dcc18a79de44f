//! Classification losses with analytic Lipschitz constants with respect to
//! the logits. Multi-output losses (hinge, Kantorovich-Rubinstein and their
//! combination) produce one value per class and are reduced by mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("labels must be one-hot, got {0:?}")]
    NotOneHot(Vec<f64>),
    #[error("binary labels must be -1 or +1, got {0}")]
    NotBinaryLabel(f64),
    #[error("shape mismatch: {0} logits vs {1} label entries")]
    ShapeMismatch(usize, usize),
    #[error("invalid loss hyper-parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Supported loss functions together with their hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy on `y_hat / tau`.
    TauCategoricalCrossentropy { tau: f64 },
    /// Per-class hinge against signed one-vs-all targets.
    MulticlassHinge { margin: f64 },
    /// Per-class `y_hat_i - y_i` values, mean-reduced.
    KantorovichRubinstein,
    /// `alpha * hinge + kr`.
    HingeKantorovichRubinstein { margin: f64, alpha: f64 },
    /// Stabilized cosine similarity `y_hat_j / max(k * x_min, ||y_hat||)`.
    KCosineSimilarity { k: f64, x_min: f64 },
    /// `-log sigmoid(y_hat * y)` with labels in {-1, +1}; single logit.
    BinaryCrossentropy,
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossKind::TauCategoricalCrossentropy { tau } if *tau <= 0.0 => Err(
                LossError::InvalidParameter(format!("tau must be positive, got {tau}")),
            ),
            LossKind::MulticlassHinge { margin } if *margin <= 0.0 => Err(
                LossError::InvalidParameter(format!("margin must be positive, got {margin}")),
            ),
            LossKind::HingeKantorovichRubinstein { margin, alpha } => {
                if *margin <= 0.0 {
                    Err(LossError::InvalidParameter(format!(
                        "margin must be positive, got {margin}"
                    )))
                } else if *alpha < 0.0 {
                    Err(LossError::InvalidParameter(format!(
                        "alpha must be non-negative, got {alpha}"
                    )))
                } else {
                    Ok(())
                }
            }
            LossKind::KCosineSimilarity { k, x_min } => {
                if *k <= 0.0 || *x_min <= 0.0 {
                    Err(LossError::InvalidParameter(format!(
                        "k and x_min must be positive, got k={k}, x_min={x_min}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Lipschitz constant of the loss with respect to the logits.
    pub fn lipschitz_constant(&self) -> f64 {
        match self {
            LossKind::TauCategoricalCrossentropy { tau } => std::f64::consts::SQRT_2 / tau,
            LossKind::MulticlassHinge { .. } => 1.0,
            LossKind::KantorovichRubinstein => 1.0,
            LossKind::HingeKantorovichRubinstein { alpha, .. } => 1.0 + alpha,
            LossKind::KCosineSimilarity { k, x_min } => 1.0 / (k * x_min),
            LossKind::BinaryCrossentropy => 1.0,
        }
    }

    /// Scalar loss after the documented reduction (mean over classes for the
    /// multi-output forms).
    pub fn loss_value(&self, y_hat: &[f64], y: &[f64]) -> Result<f64> {
        self.check_labels(y_hat, y)?;
        match self {
            LossKind::TauCategoricalCrossentropy { tau } => {
                let j = one_hot_index(y).expect("checked");
                let z: Vec<f64> = y_hat.iter().map(|v| v / tau).collect();
                Ok(log_sum_exp(&z) - z[j])
            }
            LossKind::MulticlassHinge { margin } => {
                Ok(mean(&hinge_vector(y_hat, y, *margin)))
            }
            LossKind::KantorovichRubinstein => Ok(mean(&kr_vector(y_hat, y))),
            LossKind::HingeKantorovichRubinstein { margin, alpha } => {
                let h = mean(&hinge_vector(y_hat, y, *margin));
                let kr = mean(&kr_vector(y_hat, y));
                Ok(alpha * h + kr)
            }
            LossKind::KCosineSimilarity { k, x_min } => {
                let j = one_hot_index(y).expect("checked");
                let n = l2(y_hat);
                Ok(y_hat[j] / (k * x_min).max(n))
            }
            LossKind::BinaryCrossentropy => {
                let t = y_hat[0] * y[0];
                // log(1 + exp(-t)) computed without overflow.
                Ok((-t).max(0.0) + (-t.abs()).exp().ln_1p())
            }
        }
    }

    /// Per-class values of the multi-output losses, before mean reduction.
    pub fn loss_vector(&self, y_hat: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_labels(y_hat, y)?;
        match self {
            LossKind::MulticlassHinge { margin } => Ok(hinge_vector(y_hat, y, *margin)),
            LossKind::KantorovichRubinstein => Ok(kr_vector(y_hat, y)),
            LossKind::HingeKantorovichRubinstein { margin, alpha } => {
                let h = hinge_vector(y_hat, y, *margin);
                let kr = kr_vector(y_hat, y);
                Ok(h.iter().zip(&kr).map(|(a, b)| alpha * a + b).collect())
            }
            _ => Err(LossError::InvalidParameter(
                "loss_vector is only defined for the multi-output losses".into(),
            )),
        }
    }

    /// Exact gradient of `loss_value` with respect to the logits.
    pub fn loss_gradient(&self, y_hat: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_labels(y_hat, y)?;
        let k = y_hat.len();
        match self {
            LossKind::TauCategoricalCrossentropy { tau } => {
                let z: Vec<f64> = y_hat.iter().map(|v| v / tau).collect();
                let s = softmax(&z);
                Ok(s.iter().zip(y).map(|(si, yi)| (si - yi) / tau).collect())
            }
            LossKind::MulticlassHinge { margin } => Ok(hinge_gradient(y_hat, y, *margin)),
            LossKind::KantorovichRubinstein => Ok(vec![1.0 / k as f64; k]),
            LossKind::HingeKantorovichRubinstein { margin, alpha } => {
                let h = hinge_gradient(y_hat, y, *margin);
                Ok(h.iter().map(|hi| alpha * hi + 1.0 / k as f64).collect())
            }
            LossKind::KCosineSimilarity { k: kk, x_min } => {
                let j = one_hot_index(y).expect("checked");
                let c = kk * x_min;
                let n = l2(y_hat);
                if n <= c {
                    let mut g = vec![0.0; k];
                    g[j] = 1.0 / c;
                    Ok(g)
                } else {
                    let yj = y_hat[j];
                    let mut g: Vec<f64> =
                        y_hat.iter().map(|v| -yj * v / (n * n * n)).collect();
                    g[j] += 1.0 / n;
                    Ok(g)
                }
            }
            LossKind::BinaryCrossentropy => {
                let t = y_hat[0] * y[0];
                // d/dy_hat of log(1+exp(-t)) = -y * sigmoid(-t)
                Ok(vec![-y[0] * sigmoid(-t)])
            }
        }
    }

    fn check_labels(&self, y_hat: &[f64], y: &[f64]) -> Result<()> {
        self.validate()?;
        if y_hat.len() != y.len() {
            return Err(LossError::ShapeMismatch(y_hat.len(), y.len()));
        }
        match self {
            LossKind::BinaryCrossentropy => {
                if y_hat.len() != 1 {
                    return Err(LossError::ShapeMismatch(y_hat.len(), 1));
                }
                if y[0] != 1.0 && y[0] != -1.0 {
                    return Err(LossError::NotBinaryLabel(y[0]));
                }
                Ok(())
            }
            _ => {
                if one_hot_index(y).is_none() {
                    return Err(LossError::NotOneHot(y.to_vec()));
                }
                Ok(())
            }
        }
    }
}

/// Index of the single 1.0 entry of a one-hot vector, if it is one.
pub fn one_hot_index(y: &[f64]) -> Option<usize> {
    let mut idx = None;
    for (i, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if idx.is_some() {
                return None;
            }
            idx = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    idx
}

fn hinge_vector(y_hat: &[f64], y: &[f64], margin: f64) -> Vec<f64> {
    // Signed one-vs-all targets: +1 for the true class, -1 elsewhere.
    y_hat
        .iter()
        .zip(y)
        .map(|(&yh, &yi)| {
            let sign = 2.0 * yi - 1.0;
            (margin / 2.0 - yh * sign).max(0.0)
        })
        .collect()
}

fn hinge_gradient(y_hat: &[f64], y: &[f64], margin: f64) -> Vec<f64> {
    let k = y_hat.len() as f64;
    y_hat
        .iter()
        .zip(y)
        .map(|(&yh, &yi)| {
            let sign = 2.0 * yi - 1.0;
            if margin / 2.0 - yh * sign > 0.0 {
                -sign / k
            } else {
                0.0
            }
        })
        .collect()
}

fn kr_vector(y_hat: &[f64], y: &[f64]) -> Vec<f64> {
    y_hat.iter().zip(y).map(|(&yh, &yi)| yh - yi).collect()
}

fn mean(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in v {
        acc += x;
    }
    acc / v.len() as f64
}

fn l2(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in v {
        acc += x * x;
    }
    acc.sqrt()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    for v in z {
        acc += (v - m).exp();
    }
    m + acc.ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
