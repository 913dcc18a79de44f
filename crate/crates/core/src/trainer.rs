//! Projected DP-SGD without per-sample clipping: per-layer noise calibrated
//! to certified sensitivities (local strategy) or a single noise scale from
//! the global sensitivity, with the accountant composed once per step and
//! runtime auditing of the certified gradient bounds.

use crate::accountant::{AccountError, AccountantParams, AccountantState, Strategy};
use crate::bounds::{
    backpropagation_for_bounds, BoundsError, Neighboring, SensitivityReport,
};
use crate::data::{epoch_batches, DataError, Dataset};
use crate::layers::{ModelError, Network, ProjectionSettings};
use crate::losses::{LossError, LossKind};
use crate::numerics::Tensor;
use crate::oracles::{per_sample_gradient_norms, OracleError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Audit ratios above this are certificate violations.
pub const AUDIT_TOLERANCE: f64 = 1e-6;

/// Per-sample work inside a batch is spread over this many contiguous
/// chunks. The count is a constant (not the core count) and partial sums
/// are merged in chunk order, so results do not depend on the machine or
/// the scheduler.
const BATCH_CHUNKS: usize = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("certificate violation: observed/bound ratio {ratio} at layer {layer}, sample {sample}")]
    CertificateViolation {
        ratio: f64,
        layer: usize,
        sample: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Account(#[from] AccountError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("oracle failure: {0}")]
    Oracle(#[from] OracleError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// When the sensitivity report is recomputed. Projections keep constraints
/// tight between steps, so a per-epoch refresh is a documented cheaper
/// option; recomputing every step is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundsRefresh {
    PerStep,
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub strategy: Strategy,
    pub neighboring: Neighboring,
    pub epsilon_max: Option<f64>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub rng_seed: u64,
    /// Audit the gradient-norm certificate every this many epochs; 0
    /// disables auditing.
    pub audit_every: usize,
    pub bounds_refresh: BoundsRefresh,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.noise_multiplier < 0.0 {
            return Err(TrainError::InvalidConfig(
                "noise_multiplier must be non-negative".into(),
            ));
        }
        if !(0.0 < self.delta && self.delta < 1.0) {
            return Err(TrainError::InvalidConfig("delta must be in (0, 1)".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(
                "momentum must be in [0, 1)".into(),
            ));
        }
        if self.epsilon_max.is_some() && self.noise_multiplier == 0.0 {
            return Err(TrainError::InvalidConfig(
                "an epsilon budget requires a positive noise multiplier".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch record emitted by `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Cumulative optimizer steps taken so far.
    pub step: usize,
    pub train_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub strategy: Strategy,
    pub noise_multiplier: f64,
    pub per_layer_sensitivity: Vec<f64>,
    pub audit_ratio: Option<f64>,
    pub budget_exhausted: bool,
}

/// Result of one step attempt.
#[derive(Debug)]
pub enum StepOutcome {
    Applied(StepStats),
    /// Composing one more step would exceed the epsilon budget; nothing was
    /// changed.
    BudgetRefused,
}

#[derive(Debug)]
pub struct StepStats {
    pub mean_loss: f64,
    pub report: SensitivityReport,
}

/// Holds the optimizer and privacy state across steps.
pub struct DpTrainer {
    config: TrainConfig,
    loss: LossKind,
    accountant: Option<AccountantState>,
    momentum_buffers: Vec<Option<Tensor>>,
    noise_rng: ChaCha8Rng,
    input_bound: f64,
}

impl DpTrainer {
    pub fn new(
        network: &Network,
        loss: LossKind,
        config: TrainConfig,
        dataset_size: usize,
        input_bound: f64,
    ) -> Result<Self> {
        config.validate()?;
        if dataset_size == 0 {
            return Err(TrainError::InvalidConfig("empty dataset".into()));
        }
        if config.batch_size > dataset_size {
            return Err(TrainError::InvalidConfig(format!(
                "batch_size {} exceeds dataset size {dataset_size}",
                config.batch_size
            )));
        }
        let sampling_probability = config.batch_size as f64 / dataset_size as f64;
        let accountant = if config.noise_multiplier > 0.0 {
            // The layer count is pinned after the first report; filled in
            // lazily because sensitivities depend on the projected network.
            Some(AccountantState::new(AccountantParams {
                sigma: config.noise_multiplier,
                sampling_probability,
                strategy: config.strategy,
                noised_layers: network.param_layer_indices().len().max(1),
                delta: config.delta,
            })?)
        } else {
            None
        };
        let momentum_buffers = vec![None; network.depth()];
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        noise_rng.set_stream(2);
        Ok(Self {
            config,
            loss,
            accountant,
            momentum_buffers,
            noise_rng,
            input_bound,
        })
    }

    pub fn accountant(&self) -> Option<&AccountantState> {
        self.accountant.as_ref()
    }

    pub fn epsilon(&self) -> Result<Option<f64>> {
        match &self.accountant {
            Some(acc) => Ok(Some(acc.epsilon_at(self.config.delta)?)),
            None => Ok(None),
        }
    }

    /// Certified sensitivity report for the network as it stands.
    pub fn certify(&self, network: &mut Network) -> Result<SensitivityReport> {
        Ok(backpropagation_for_bounds(
            network,
            self.input_bound,
            &self.loss,
            self.config.batch_size,
            self.config.neighboring,
        )?)
    }

    /// One DP-SGD step under the configured strategy.
    pub fn step(
        &mut self,
        network: &mut Network,
        xs: &[Tensor],
        ys: &[Vec<f64>],
        report: Option<&SensitivityReport>,
    ) -> Result<StepOutcome> {
        let owned;
        let report = match report {
            Some(r) => r,
            None => {
                owned = self.certify(network)?;
                &owned
            }
        };
        let noised_layers = report.noised_layers().max(1);

        // Budget check before any mechanism output is produced.
        if let (Some(acc), Some(eps_max)) = (&self.accountant, self.config.epsilon_max) {
            let mut tentative = acc.clone();
            tentative.params.noised_layers = noised_layers;
            tentative.compose_step()?;
            if tentative.epsilon_at(self.config.delta)? > eps_max {
                return Ok(StepOutcome::BudgetRefused);
            }
        }

        // Batch-mean gradients: fixed contiguous chunks accumulate their
        // samples in index order and the partials merge in chunk order.
        let b = xs.len();
        if b == 0 || b != ys.len() {
            return Err(TrainError::InvalidConfig(format!(
                "batch needs matching non-empty inputs and labels, got {b} and {}",
                ys.len()
            )));
        }
        let chunk_size = b.div_ceil(BATCH_CHUNKS);
        let partials: Vec<Result<(Vec<Option<Tensor>>, f64)>> = xs
            .par_chunks(chunk_size)
            .zip(ys.par_chunks(chunk_size))
            .map(|(cxs, cys)| {
                let mut grads: Vec<Option<Tensor>> = vec![None; network.depth()];
                let mut loss_acc = 0.0;
                for (x, y) in cxs.iter().zip(cys) {
                    let trace = network.forward_trace(x)?;
                    loss_acc += self.loss.loss_value(trace.output.data(), y)?;
                    let g = self.loss.loss_gradient(trace.output.data(), y)?;
                    let cot = Tensor::new(trace.output.shape().to_vec(), g)
                        .map_err(ModelError::Numerics)?;
                    let (_, sample_grads) = network.vjp(&trace, &cot)?;
                    for (slot, sg) in grads.iter_mut().zip(sample_grads) {
                        if let Some(sg) = sg {
                            match slot {
                                Some(t) => {
                                    t.axpy_in_place(1.0, &sg).map_err(ModelError::Numerics)?
                                }
                                None => *slot = Some(sg),
                            }
                        }
                    }
                }
                Ok((grads, loss_acc))
            })
            .collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; network.depth()];
        let mut loss_acc = 0.0;
        for partial in partials {
            let (chunk_grads, chunk_loss) = partial?;
            loss_acc += chunk_loss;
            for (slot, sg) in grads.iter_mut().zip(chunk_grads) {
                if let Some(sg) = sg {
                    match slot {
                        Some(t) => t.axpy_in_place(1.0, &sg).map_err(ModelError::Numerics)?,
                        None => *slot = Some(sg),
                    }
                }
            }
        }
        let inv_b = 1.0 / b as f64;
        for g in grads.iter_mut().flatten() {
            g.scale_in_place(inv_b);
        }
        let mean_loss = loss_acc * inv_b;

        // Account for the step.
        if let Some(acc) = &mut self.accountant {
            acc.params.noised_layers = noised_layers;
            acc.compose_step()?;
        }

        // Perturb, descend, project.
        let sigma = self.config.noise_multiplier;
        for (i, g) in grads.iter_mut().enumerate() {
            let Some(g) = g else { continue };
            if sigma > 0.0 {
                let std = match self.config.strategy {
                    Strategy::Local => sigma * report.per_layer_sensitivity[i],
                    Strategy::Global => sigma * report.global_sensitivity,
                };
                for v in g.data_mut() {
                    let z: f64 = self.noise_rng.sample(StandardNormal);
                    *v += std * z;
                }
            }
            let update = if self.config.momentum > 0.0 {
                let buf = &mut self.momentum_buffers[i];
                match buf {
                    Some(m) => {
                        m.scale_in_place(self.config.momentum);
                        m.axpy_in_place(1.0, g).map_err(ModelError::Numerics)?;
                    }
                    None => *buf = Some(g.clone()),
                }
                buf.as_ref().expect("buffer just written").clone()
            } else {
                g.clone()
            };
            let w = network.layers_mut()[i]
                .weight
                .as_mut()
                .expect("gradient implies parameters");
            w.axpy_in_place(-self.config.learning_rate, &update)
                .map_err(ModelError::Numerics)?;
        }
        network.project_all(&ProjectionSettings::default())?;
        Ok(StepOutcome::Applied(StepStats {
            mean_loss,
            report: report.clone(),
        }))
    }
}

/// Step with per-layer noise scaled by each layer's sensitivity.
pub fn dp_train_step_local(
    trainer: &mut DpTrainer,
    network: &mut Network,
    xs: &[Tensor],
    ys: &[Vec<f64>],
) -> Result<StepOutcome> {
    if trainer.config.strategy != Strategy::Local {
        return Err(TrainError::InvalidConfig(
            "trainer is not configured for the local strategy".into(),
        ));
    }
    trainer.step(network, xs, ys, None)
}

/// Step with a single noise scale from the global sensitivity.
pub fn dp_train_step_global(
    trainer: &mut DpTrainer,
    network: &mut Network,
    xs: &[Tensor],
    ys: &[Vec<f64>],
) -> Result<StepOutcome> {
    if trainer.config.strategy != Strategy::Global {
        return Err(TrainError::InvalidConfig(
            "trainer is not configured for the global strategy".into(),
        ));
    }
    trainer.step(network, xs, ys, None)
}

/// Max over samples and layers of observed / certified per-sample gradient
/// norm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub max_ratio: f64,
    pub worst_layer: usize,
    pub worst_sample: usize,
    pub per_layer_max_ratio: Vec<f64>,
    pub samples_checked: usize,
    pub pass: bool,
}

/// Compare observed per-sample gradient norms against the certified bounds.
/// Layers with a zero bound must see zero gradients.
pub fn audit_gradient_bounds(
    network: &mut Network,
    xs: &[Tensor],
    ys: &[Vec<f64>],
    loss: &LossKind,
    input_bound: f64,
    batch_size: usize,
    neighboring: Neighboring,
) -> Result<AuditReport> {
    let report =
        backpropagation_for_bounds(network, input_bound, loss, batch_size, neighboring)?;
    let norms = per_sample_gradient_norms(network, xs, ys, loss)?;
    let depth = network.depth();
    let mut per_layer_max_ratio = vec![0.0f64; depth];
    let mut max_ratio = 0.0f64;
    let (mut worst_layer, mut worst_sample) = (0, 0);
    for (s, sample) in norms.iter().enumerate() {
        for (l, &observed) in sample.iter().enumerate() {
            let bound = report.per_sample_bound(l);
            let ratio = if bound > 0.0 {
                observed / bound
            } else if observed <= 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            if ratio > per_layer_max_ratio[l] {
                per_layer_max_ratio[l] = ratio;
            }
            if ratio > max_ratio {
                max_ratio = ratio;
                worst_layer = l;
                worst_sample = s;
            }
        }
    }
    Ok(AuditReport {
        max_ratio,
        worst_layer,
        worst_sample,
        per_layer_max_ratio,
        samples_checked: norms.len(),
        pass: max_ratio <= 1.0 + AUDIT_TOLERANCE,
    })
}

/// Fraction of samples whose arg-max logit matches the label. The count is
/// an integer sum, so evaluating samples in parallel stays deterministic.
pub fn evaluate_accuracy(network: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::InvalidConfig("empty evaluation set".into()));
    }
    let correct = data
        .features
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(x, y)| {
            let out = network.forward(x)?;
            Ok(usize::from(argmax(out.data()) == argmax(y)))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / data.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Run epochs of DP-SGD steps until the epoch budget or the privacy budget
/// is exhausted. The network is projected before the first step; metrics
/// are emitted once per epoch.
pub fn fit(
    network: &mut Network,
    loss: &LossKind,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::InvalidConfig("empty training dataset".into()));
    }
    if train.feature_shape() != network.input_shape() {
        return Err(TrainError::InvalidConfig(format!(
            "dataset features {:?} do not match network input {:?}",
            train.feature_shape(),
            network.input_shape()
        )));
    }
    let out_dim: usize = network.output_shape().iter().product();
    if train.num_classes != out_dim {
        return Err(TrainError::InvalidConfig(format!(
            "dataset has {} classes but the network emits {out_dim} logits",
            train.num_classes
        )));
    }

    network.project_all(&ProjectionSettings::strict())?;
    let mut trainer = DpTrainer::new(
        network,
        loss.clone(),
        config.clone(),
        train.len(),
        train.input_bound,
    )?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    data_rng.set_stream(1);

    let mut history = Vec::with_capacity(config.epochs);
    let mut total_steps = 0usize;
    for epoch in 0..config.epochs {
        let batches = epoch_batches(train.len(), config.batch_size, &mut data_rng)?;
        let epoch_report = match config.bounds_refresh {
            BoundsRefresh::PerEpoch => Some(trainer.certify(network)?),
            BoundsRefresh::PerStep => None,
        };
        let mut losses = Vec::with_capacity(batches.len());
        let mut last_report: Option<SensitivityReport> = None;
        let mut exhausted = false;
        let mut last_batch: Option<Vec<usize>> = None;
        for batch in &batches {
            let xs: Vec<Tensor> = batch.iter().map(|&i| train.features[i].clone()).collect();
            let ys: Vec<Vec<f64>> = batch.iter().map(|&i| train.labels[i].clone()).collect();
            match trainer.step(network, &xs, &ys, epoch_report.as_ref())? {
                StepOutcome::Applied(stats) => {
                    losses.push(stats.mean_loss);
                    last_report = Some(stats.report);
                    total_steps += 1;
                    last_batch = Some(batch.clone());
                }
                StepOutcome::BudgetRefused => {
                    exhausted = true;
                    break;
                }
            }
        }

        let train_loss = if losses.is_empty() {
            None
        } else {
            let mut acc = 0.0;
            for l in &losses {
                acc += l;
            }
            Some(acc / losses.len() as f64)
        };
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(evaluate_accuracy(network, val)?)
        };

        let run_audit =
            config.audit_every > 0 && (epoch + 1).is_multiple_of(config.audit_every);
        let audit_ratio = if let (true, Some(batch)) = (run_audit, last_batch.as_ref()) {
            let xs: Vec<Tensor> = batch.iter().map(|&i| train.features[i].clone()).collect();
            let ys: Vec<Vec<f64>> = batch.iter().map(|&i| train.labels[i].clone()).collect();
            let audit = audit_gradient_bounds(
                network,
                &xs,
                &ys,
                loss,
                train.input_bound,
                config.batch_size,
                config.neighboring,
            )?;
            if !audit.pass {
                return Err(TrainError::CertificateViolation {
                    ratio: audit.max_ratio,
                    layer: audit.worst_layer,
                    sample: audit.worst_sample,
                });
            }
            Some(audit.max_ratio)
        } else {
            None
        };

        let per_layer_sensitivity = last_report
            .map(|r| r.per_layer_sensitivity)
            .unwrap_or_else(|| vec![0.0; network.depth()]);
        history.push(EpochMetrics {
            epoch,
            step: total_steps,
            train_loss,
            val_accuracy,
            epsilon: trainer.epsilon()?,
            delta: config.delta,
            strategy: config.strategy,
            noise_multiplier: config.noise_multiplier,
            per_layer_sensitivity,
            audit_ratio,
            budget_exhausted: exhausted,
        });
        if exhausted {
            break;
        }
    }
    Ok(history)
}
